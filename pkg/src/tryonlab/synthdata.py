"""Synthetic garment/person dataset for desk-scale verification.

Garments are colored rounded-rectangle "shirts" on a fixed background with
a randomized collar shape, sleeve length, and 1-3 high-contrast glyph
"patterns" at recorded positions. Persons are stick figures whose torso
region both wears the garment (the ground-truth image) and defines the
inpainting mask; the mask is deliberately larger than the torso, so the
bbox-fit warp overfills it and a composite alone cannot match the ground
truth. Ground-truth glyph/collar/sleeve boxes are written per garment as
JSON and are consumed only by tests and evaluation, never by training.
"""

from __future__ import annotations

import colorsys
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import resize_bicubic
from .errors import ConfigurationError, DataError

GARMENT_BG = (0.96, 0.96, 0.97)
PERSON_BG = (0.86, 0.89, 0.93)
SKIN = (0.91, 0.75, 0.62)
LEG = (0.25, 0.27, 0.33)

FLOW_MAGIC = b"TOLFLOW1"


# ---------------------------------------------------------------------------
# image / flow / index IO
# ---------------------------------------------------------------------------

def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def load_mask(path) -> np.ndarray:
    """Masks are re-binarized at 0.5 on load (JPEG inputs are tolerated)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return (arr >= 0.5).astype(np.float64)


def save_flow(path, flow: np.ndarray) -> None:
    """Raw little-endian float32 H x W x 2 with an 8-byte magic + dims header."""
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ConfigurationError(f"flow must be H x W x 2, got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(flow.tobytes())


def load_flow(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != FLOW_MAGIC:
        raise DataError(f"{path} is not a flow file (bad magic)")
    h, w = struct.unpack("<II", raw[8:16])
    data = np.frombuffer(raw[16:], dtype="<f4")
    if data.size != h * w * 2:
        raise DataError(f"flow file {path} truncated")
    return data.reshape(h, w, 2).astype(np.float64)


@dataclass
class PairRecord:
    person: str
    garment: str
    mask: str
    truth: str
    split: str  # train | test
    flow: str = ""


@dataclass
class PairedDatasetIndex:
    root: Path
    records: list

    def split(self, tag: str) -> list:
        return [r for r in self.records if r.split == tag]

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def save_index(index: PairedDatasetIndex, path=None) -> Path:
    path = Path(path) if path else index.root / "index.json"
    payload = [vars(r) for r in index.records]
    path.write_text(json.dumps(payload, indent=2))
    return path


def load_index(root) -> PairedDatasetIndex:
    root = Path(root)
    path = root / "index.json"
    if not path.exists():
        raise DataError(f"no dataset index at {path}")
    records = [PairRecord(**item) for item in json.loads(path.read_text())]
    index = PairedDatasetIndex(root=root, records=records)
    for rec in records:
        for rel in (rec.person, rec.garment, rec.mask):
            if not (root / rel).exists():
                raise DataError(f"dataset file missing: {root / rel}")
    return index


# ---------------------------------------------------------------------------
# rasterization helpers (hard-edged, fully deterministic)
# ---------------------------------------------------------------------------

def _grid(h, w):
    return np.mgrid[0:h, 0:w].astype(np.float64) + 0.5


def _paint(canvas, region, color):
    canvas[region] = np.asarray(color)


def _rounded_rect(h, w, top, bottom, left, right, radius):
    ys, xs = _grid(h, w)
    inside = (ys >= top) & (ys <= bottom) & (xs >= left) & (xs <= right)
    if radius > 0:
        for cy, cx in ((top + radius, left + radius), (top + radius, right - radius),
                       (bottom - radius, left + radius), (bottom - radius, right - radius)):
            corner = ((ys < top + radius) | (ys > bottom - radius)) & \
                     ((xs < left + radius) | (xs > right - radius))
            near = np.hypot(ys - cy, xs - cx) <= radius
            quad = (np.abs(ys - cy) <= radius) & (np.abs(xs - cx) <= radius)
            inside &= ~(corner & quad & ~near)
    return inside


def _disc(h, w, cy, cx, r):
    ys, xs = _grid(h, w)
    return np.hypot(ys - cy, xs - cx) <= r


def _hsv(hue, sat, val):
    return colorsys.hsv_to_rgb(hue % 1.0, sat, val)


GLYPH_KINDS = ("disc", "ring", "cross", "square", "stripes", "triangle")


def _draw_glyph(canvas, kind, cy, cx, r, color):
    h, w = canvas.shape[:2]
    ys, xs = _grid(h, w)
    if kind == "disc":
        region = _disc(h, w, cy, cx, r)
    elif kind == "ring":
        region = _disc(h, w, cy, cx, r) & ~_disc(h, w, cy, cx, max(r - 2.0, r * 0.45))
    elif kind == "cross":
        bar = max(r * 0.45, 1.0)
        region = ((np.abs(ys - cy) <= bar) & (np.abs(xs - cx) <= r)) | \
                 ((np.abs(xs - cx) <= bar) & (np.abs(ys - cy) <= r))
    elif kind == "square":
        region = (np.abs(ys - cy) <= r * 0.85) & (np.abs(xs - cx) <= r * 0.85)
    elif kind == "stripes":
        band = ((ys - cy + 100 * r) % (r * 1.2)) < (r * 0.55)
        region = band & (np.abs(ys - cy) <= r) & (np.abs(xs - cx) <= r)
    elif kind == "triangle":
        region = (ys >= cy - r) & (ys <= cy + r) & \
                 (np.abs(xs - cx) <= (ys - (cy - r)) / 2.0 * 1.1)
    else:
        raise ConfigurationError(f"unknown glyph kind {kind!r}")
    _paint(canvas, region, color)
    return region


def _region_box(region) -> list:
    ys, xs = np.nonzero(region)
    if ys.size == 0:
        return [0, 0, 0, 0]
    return [int(ys.min()), int(xs.min()),
            int(ys.max() - ys.min() + 1), int(xs.max() - xs.min() + 1)]


# ---------------------------------------------------------------------------
# garment / person rendering
# ---------------------------------------------------------------------------

def render_garment(rng: np.random.Generator, image_size=(64, 48)):
    """Returns (image, truth dict). Boxes are [top, left, height, width] px."""
    h, w = image_size
    canvas = np.empty((h, w, 3))
    canvas[:] = GARMENT_BG

    hue = rng.uniform()
    base = _hsv(hue, rng.uniform(0.55, 0.85), rng.uniform(0.55, 0.8))
    body_w = rng.uniform(0.46, 0.6) * w
    top = 0.16 * h + rng.uniform(-1, 1)
    bottom = rng.uniform(0.86, 0.94) * h
    left = w / 2 - body_w / 2
    right = w / 2 + body_w / 2
    body = _rounded_rect(h, w, top, bottom, left, right, radius=0.07 * w)
    _paint(canvas, body, base)

    sleeve_len = (0.30 if rng.uniform() < 0.5 else 0.62) * (bottom - top)
    sleeve_w = 0.14 * w
    sleeve_color = _hsv(hue + rng.uniform(-0.06, 0.06), 0.7, 0.45)
    sleeves = []
    for side_left in (left - sleeve_w, right):
        ys, xs = _grid(h, w)
        region = (ys >= top + 1) & (ys <= top + 1 + sleeve_len) & \
                 (xs >= side_left) & (xs <= side_left + sleeve_w)
        _paint(canvas, region, sleeve_color)
        sleeves.append(_region_box(region))

    collar_kind = ("v", "round", "square")[int(rng.integers(3))]
    collar_color = _hsv(hue + 0.5, 0.8, 0.85)
    cw = rng.uniform(0.16, 0.24) * w
    cd = rng.uniform(0.07, 0.12) * h
    ys, xs = _grid(h, w)
    cx = w / 2
    if collar_kind == "v":
        collar = (ys >= top) & (ys <= top + cd) & \
                 (np.abs(xs - cx) <= (1.0 - (ys - top) / cd) * cw / 2)
    elif collar_kind == "round":
        collar = _disc(h, w, top, cx, cw / 2) & (ys >= top)
    else:
        collar = (ys >= top) & (ys <= top + cd) & (np.abs(xs - cx) <= cw / 2)
    collar &= body
    _paint(canvas, collar, collar_color)
    collar_box = _region_box(collar)

    n_glyphs = int(rng.integers(1, 4))
    glyphs = []
    glyph_top = top + cd + 2
    for gi in range(n_glyphs):
        kind = GLYPH_KINDS[int(rng.integers(len(GLYPH_KINDS)))]
        r = rng.uniform(0.10, 0.16) * w
        gy = rng.uniform(glyph_top + r, bottom - r)
        gx = rng.uniform(left + r + 1, right - r - 1)
        color = _hsv(hue + 0.5 + rng.uniform(-0.12, 0.12),
                     rng.uniform(0.75, 1.0), rng.uniform(0.85, 1.0))
        region = _draw_glyph(canvas, kind, gy, gx, r, color)
        glyphs.append({"kind": kind, "box": _region_box(region & body)})

    truth = {
        "body": _region_box(body),
        "collar": {"kind": collar_kind, "box": collar_box},
        "sleeves": sleeves,
        "glyphs": glyphs,
        "base_color": [float(c) for c in base],
    }
    return np.clip(canvas, 0.0, 1.0), truth


def render_person(rng: np.random.Generator, garment: np.ndarray,
                  garment_truth: dict, image_size=(64, 48)):
    """Returns (person ground truth wearing the garment, mask).

    The torso layout is fixed up to a 1 px jitter so the layout prior is
    learnable at desk scale; the mask extends beyond the torso by a margin
    of background.
    """
    h, w = image_size
    canvas = np.empty((h, w, 3))
    canvas[:] = PERSON_BG

    jx = int(rng.integers(-1, 2))
    jy = int(rng.integers(-1, 2))
    torso_top = int(0.24 * h) + jy
    torso_bottom = int(0.66 * h) + jy
    torso_left = int(0.26 * w) + jx
    torso_right = int(0.74 * w) + jx

    head_r = 0.10 * h
    head = _disc(h, w, torso_top - head_r - 2, w / 2 + jx, head_r)
    _paint(canvas, head, SKIN)
    ys, xs = _grid(h, w)
    legs = (ys > torso_bottom) & (ys <= 0.95 * h) & \
           (np.abs(xs - (w / 2 + jx)) <= 0.16 * w) & \
           (np.abs(xs - (w / 2 + jx)) >= 0.03 * w)
    _paint(canvas, legs, LEG)

    # dress the torso with the garment's body crop
    bt, bl, bh, bw = garment_truth["body"]
    body_crop = garment[bt:bt + bh, bl:bl + bw]
    tw = torso_right - torso_left
    th = torso_bottom - torso_top
    fitted = resize_bicubic(body_crop, (th, tw))
    canvas[torso_top:torso_bottom, torso_left:torso_right] = fitted

    mask = np.zeros((h, w))
    m_top = max(torso_top - int(0.07 * h), 0)
    m_bottom = min(torso_bottom + int(0.05 * h), h)
    m_left = max(torso_left - int(0.10 * w), 0)
    m_right = min(torso_right + int(0.10 * w), w)
    mask[m_top:m_bottom, m_left:m_right] = 1.0

    return np.clip(canvas, 0.0, 1.0), mask


def gen_synthetic_dataset(n_pairs: int, image_size, rng_seed: int, out_dir,
                          n_test: int = 0) -> PairedDatasetIndex:
    """Emit n_pairs triplets + ground-truth JSONs; the last n_test pairs are
    tagged as the test split. Regeneration with the same seed is
    byte-identical."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(rng_seed)
    records = []
    for i in range(n_pairs):
        garment, truth = render_garment(rng, image_size)
        person, mask = render_person(rng, garment, truth, image_size)
        names = {
            "person": f"person_{i:04d}.png",
            "garment": f"garment_{i:04d}.png",
            "mask": f"mask_{i:04d}.png",
            "truth": f"truth_{i:04d}.json",
        }
        save_image(out_dir / names["person"], person)
        save_image(out_dir / names["garment"], garment)
        save_image(out_dir / names["mask"], mask[..., None].repeat(3, axis=2))
        (out_dir / names["truth"]).write_text(json.dumps(truth, indent=2))
        split = "test" if i >= n_pairs - n_test else "train"
        records.append(PairRecord(split=split, **names))
    index = PairedDatasetIndex(root=out_dir, records=records)
    save_index(index)
    return index
