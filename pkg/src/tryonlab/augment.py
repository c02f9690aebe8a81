"""Crop sampling and the photometric augmentation chain for teacher/student views.

Scale ranges follow the multi-crop convention: global views cover
[0.25, 1] of the image area, local views [0.05, 0.25]. "Scale" means AREA
ratio throughout. Images are numpy H x W x 3 float arrays in [0, 1];
augment_view output may leave [0, 1] after normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)


@dataclass(frozen=True)
class CropBox:
    """Normalized crop rectangle plus its derived integer pixel rect."""

    cx: float            # center x in [0, 1]
    cy: float            # center y in [0, 1]
    area_ratio: float    # fraction of whole-image area
    aspect: float        # width / height
    left: int
    top: int
    width: int
    height: int

    def validate(self, image_size: tuple) -> None:
        h, w = image_size
        if not (0.0 < self.area_ratio <= 1.0 + 1e-9):
            raise ConfigurationError(f"area_ratio {self.area_ratio} outside (0, 1]")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("crop rect must be at least 1 x 1")
        if self.left < 0 or self.top < 0 or self.left + self.width > w \
                or self.top + self.height > h:
            raise ConfigurationError(
                f"crop rect {(self.top, self.left, self.height, self.width)} "
                f"leaves image bounds {image_size}")


def crop_box_from_rect(left, top, width, height, image_size) -> CropBox:
    h, w = image_size
    box = CropBox(cx=(left + width / 2.0) / w, cy=(top + height / 2.0) / h,
                  area_ratio=(width * height) / float(h * w),
                  aspect=width / float(height),
                  left=int(left), top=int(top), width=int(width), height=int(height))
    box.validate(image_size)
    return box


def crop_box_from_center(center_xy, area_px, aspect, image_size) -> CropBox:
    """Build an in-bounds rect of the requested area centered as close to
    center_xy (pixels) as clamping allows; size is preserved, the center is
    shifted minimally."""
    h, w = image_size
    bw = int(round(math.sqrt(area_px * aspect)))
    bh = int(round(math.sqrt(area_px / aspect)))
    bw = min(max(bw, 1), w)
    bh = min(max(bh, 1), h)
    cx, cy = center_xy
    left = int(round(cx - bw / 2.0))
    top = int(round(cy - bh / 2.0))
    left = min(max(left, 0), w - bw)
    top = min(max(top, 0), h - bh)
    return crop_box_from_rect(left, top, bw, bh, image_size)


def sample_crop_box(rng: np.random.Generator, scale_range, image_size,
                    aspect_range=ASPECT_RANGE):
    """Random-resized-crop box: area ratio uniform in scale_range, aspect
    log-uniform in aspect_range, position uniform among in-bounds
    placements. Returns (CropBox, fell_back) where fell_back means 10
    attempts were infeasible and a center crop at the low scale was used.
    """
    lo, hi = scale_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ConfigurationError(f"scale_range {scale_range} must satisfy 0 < lo <= hi <= 1")
    h, w = image_size
    area = h * w
    for _ in range(10):
        target = rng.uniform(lo, hi) * area
        aspect = math.exp(rng.uniform(math.log(aspect_range[0]),
                                      math.log(aspect_range[1])))
        bw = int(round(math.sqrt(target * aspect)))
        bh = int(round(math.sqrt(target / aspect)))
        if 1 <= bw <= w and 1 <= bh <= h:
            left = int(rng.integers(0, w - bw + 1))
            top = int(rng.integers(0, h - bh + 1))
            return crop_box_from_rect(left, top, bw, bh, image_size), False
    box = crop_box_from_center((w / 2.0, h / 2.0), lo * area, 1.0, image_size)
    return box, True


@dataclass(frozen=True)
class AugmentPolicy:
    """Photometric chain parameters; order is fixed in augment_view."""

    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_range: tuple = (0.1, 2.0)
    norm_mean: tuple = (0.5, 0.5, 0.5)
    norm_std: tuple = (0.5, 0.5, 0.5)
    rng_seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.flip_prob <= 1.0 and 0.0 <= self.blur_prob <= 1.0):
            raise ConfigurationError("probabilities must lie in [0, 1]")
        if self.blur_sigma_range[0] > self.blur_sigma_range[1]:
            raise ConfigurationError("blur_sigma_range must be ordered")
        if any(s == 0 for s in self.norm_std):
            raise ConfigurationError("norm_std components must be nonzero")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(flip_prob=0.0, brightness=0.0, contrast=0.0, saturation=0.0,
                   blur_prob=0.0, norm_mean=(0.0, 0.0, 0.0), norm_std=(1.0, 1.0, 1.0))


LUMA = np.array([0.299, 0.587, 0.114])

# Keys bicubic kernel, a = -0.5 (the classic photographic convention).


def _cubic_weights(frac: np.ndarray) -> np.ndarray:
    """Weights for the 4 taps at offsets (-1, 0, 1, 2) from floor(src)."""
    a = -0.5

    def k(x):
        x = np.abs(x)
        w = np.where(x <= 1.0, (a + 2.0) * x ** 3 - (a + 3.0) * x ** 2 + 1.0,
                     np.where(x < 2.0, a * (x ** 3 - 5.0 * x ** 2 + 8.0 * x - 4.0), 0.0))
        return w

    offsets = np.array([-1.0, 0.0, 1.0, 2.0])
    return k(frac[:, None] - offsets[None, :])  # (n_out, 4)


def _axis_coords(n_in: int, n_out: int):
    """Half-pixel-center source coordinates: src = (i + 0.5) * s - 0.5."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    idx = base[:, None] + np.array([-1, 0, 1, 2])[None, :]
    idx = np.clip(idx, 0, n_in - 1)
    return idx, _cubic_weights(frac)


def resize_bicubic(image: np.ndarray, out_size: tuple) -> np.ndarray:
    """Bicubic resample to out_size = (height, width), edges clamped.
    Output is clipped to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    oh, ow = out_size
    iy, wy = _axis_coords(img.shape[0], oh)
    ix, wx = _axis_coords(img.shape[1], ow)
    # joint 4 x 4 neighborhood gather; weights are the outer product per pixel
    patches = img[iy[:, :, None, None], ix[None, None, :, :]]  # (oh,4,ow,4,C)
    out = np.einsum("ia,jb,iajbc->ijc", wy, wx, patches)
    return np.clip(out, 0.0, 1.0)


def apply_crop_resize(image: np.ndarray, box: CropBox, out_size: tuple) -> np.ndarray:
    """Crop box's pixel rect and bicubic-resample it to out_size."""
    box.validate(image.shape[:2])
    crop = image[box.top:box.top + box.height, box.left:box.left + box.width]
    return resize_bicubic(crop, out_size)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge replication."""
    if sigma <= 0:
        return np.asarray(image, dtype=np.float64).copy()
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    out = np.asarray(image, dtype=np.float64)
    for axis in (0, 1):
        padded = np.pad(out, [(radius, radius) if ax == axis else (0, 0)
                              for ax in range(out.ndim)], mode="edge")
        out = np.apply_along_axis(
            lambda m: np.convolve(m, kernel, mode="valid"), axis, padded)
    return out


def color_jitter(image, f_brightness, f_contrast, f_saturation):
    """brightness -> contrast -> saturation, multiplicative factors,
    clamped to [0, 1] after each stage."""
    out = np.clip(np.asarray(image, dtype=np.float64) * f_brightness, 0.0, 1.0)
    mean = (out @ LUMA).mean()
    out = np.clip(mean + (out - mean) * f_contrast, 0.0, 1.0)
    gray = (out @ LUMA)[..., None]
    out = np.clip(gray + (out - gray) * f_saturation, 0.0, 1.0)
    return out


def normalize(image, mean, std):
    return (np.asarray(image, dtype=np.float64) - np.asarray(mean)) / np.asarray(std)


def denormalize(image, mean, std):
    return np.asarray(image, dtype=np.float64) * np.asarray(std) + np.asarray(mean)


def augment_view(image: np.ndarray, box: CropBox, policy: AugmentPolicy,
                 rng: np.random.Generator, out_size: tuple) -> np.ndarray:
    """One augmented view: crop-resize -> flip -> color jitter -> blur ->
    normalize. Pure in (image, box, policy, rng state); every random draw
    is consumed whether or not the transform fires, so streams stay aligned.
    """
    out = apply_crop_resize(image, box, out_size)
    if rng.uniform() < policy.flip_prob:
        out = out[:, ::-1].copy()
    f_b = 1.0 + policy.brightness * rng.uniform(-1.0, 1.0)
    f_c = 1.0 + policy.contrast * rng.uniform(-1.0, 1.0)
    f_s = 1.0 + policy.saturation * rng.uniform(-1.0, 1.0)
    out = color_jitter(out, f_b, f_c, f_s)
    do_blur = rng.uniform() < policy.blur_prob
    sigma = rng.uniform(*policy.blur_sigma_range)
    if do_blur:
        out = gaussian_blur(out, sigma)
    return normalize(out, policy.norm_mean, policy.norm_std)
