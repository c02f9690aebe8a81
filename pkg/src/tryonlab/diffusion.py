"""Toy latent-diffusion inpainting for garment try-on.

The latent space is fixed, not learned: encode() is a 4x area-average
downsample per channel and decode() its bilinear inverse, standing in for
the pretrained VAE of a full-scale system while keeping everything cheap
and deterministic. The denoiser is a small grid network taking
{z_t, z_lc, mask} channels plus a sinusoidal timestep embedding, with one
cross-attention block at the bottleneck reading the garment condition
tokens. Training minimizes ||eps - eps_theta(z_t, z_lc, m, c, t)||^2;
sampling is DDIM (eta = 0) or PLMS on the same eps predictions, and the
final image is composited so pixels with m = 0 come from the person image
bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .errors import ConfigurationError, NumericalError

DOWNSAMPLE = 4  # fixed encoder/decoder factor


# ---------------------------------------------------------------------------
# schedule and forward process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray        # (T,) in (0, 1)
    alpha_bars: np.ndarray   # (T,) cumulative products of (1 - beta)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        abars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.shape != abars.shape:
            raise ConfigurationError("betas and alpha_bars must be 1-d and equal length")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ConfigurationError("betas must lie strictly in (0, 1)")
        if np.any(abars <= 0.0) or np.any(abars >= 1.0) or np.any(np.diff(abars) >= 0):
            raise ConfigurationError("alpha_bars must be strictly decreasing in (0, 1)")
        rebuilt = np.cumprod(1.0 - betas)
        if np.max(np.abs(rebuilt - abars)) > 1e-12:
            raise ConfigurationError("alpha_bars do not match the running product")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abars)

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at 1-indexed timestep t; t = 0 returns 1 (clean data)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ConfigurationError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def content_hash(self) -> str:
        return hashlib.sha256(self.betas.tobytes()).hexdigest()[:16]


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                   shape: str = "linear") -> DiffusionSchedule:
    if shape != "linear":
        raise ConfigurationError(f"unsupported schedule shape {shape!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return DiffusionSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))


@dataclass
class LatentState:
    z: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if not np.all(np.isfinite(self.z)):
            raise NumericalError("latent contains non-finite values")


def forward_diffuse(z0, t: int, eps: np.ndarray,
                    sched: DiffusionSchedule) -> LatentState:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, the exact affine
    forward process at 1-indexed timestep t."""
    z = z0.z if isinstance(z0, LatentState) else np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z.shape:
        raise ConfigurationError(f"noise shape {eps.shape} != latent shape {z.shape}")
    if not 1 <= t <= sched.T:
        raise ConfigurationError(f"timestep {t} outside [1, {sched.T}]")
    abar = sched.alpha_bar(t)
    return LatentState(z=math.sqrt(abar) * z + math.sqrt(1.0 - abar) * eps, t=t)


# ---------------------------------------------------------------------------
# fixed encoder / decoder and pixel-space assembly
# ---------------------------------------------------------------------------

def encode(image: np.ndarray) -> np.ndarray:
    """4x area-average downsample per channel (H, W divisible by 4)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    f = DOWNSAMPLE
    if h % f or w % f:
        raise ConfigurationError(f"image size {(h, w)} not divisible by {f}")
    blocks = img.reshape(h // f, f, w // f, f, -1)
    return blocks.mean(axis=(1, 3))


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    i0 = np.clip(base, 0, n_in - 1)
    i1 = np.clip(base + 1, 0, n_in - 1)
    return i0, i1, frac


def decode(z: np.ndarray) -> np.ndarray:
    """Bilinear 4x upsample (half-pixel centers, edges clamped)."""
    z = np.asarray(z, dtype=np.float64)
    h, w = z.shape[:2]
    oh, ow = h * DOWNSAMPLE, w * DOWNSAMPLE
    y0, y1, fy = _bilinear_axis(h, oh)
    x0, x1, fx = _bilinear_axis(w, ow)
    top = z[y0][:, x0] * (1 - fx)[None, :, None] + z[y0][:, x1] * fx[None, :, None]
    bot = z[y1][:, x0] * (1 - fx)[None, :, None] + z[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def warp_apply(garment: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward bilinear warp: out(y, x) samples garment at
    (y + flow[y,x,1], x + flow[y,x,0]); out-of-range samples replicate the
    border. flow[..., 0] is the x displacement, flow[..., 1] the y."""
    img = np.asarray(garment, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    h, w = img.shape[:2]
    if flow.shape[:2] != (h, w) or flow.shape[2] != 2:
        raise ConfigurationError(f"flow shape {flow.shape} incompatible with {(h, w)}")
    if not np.all(np.isfinite(flow)):
        raise NumericalError("flow contains non-finite values")
    ys, xs = np.mgrid[0:h, 0:w]
    sx = xs + flow[..., 0]
    sy = ys + flow[..., 1]
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    # clamp the fractional part too so samples beyond the border replicate it
    fx = np.clip(sx, 0, w - 1) - x0c
    fy = np.clip(sy, 0, h - 1) - y0c
    fx = np.clip(fx, 0.0, 1.0)[..., None]
    fy = np.clip(fy, 0.0, 1.0)[..., None]
    top = img[y0c, x0c] * (1 - fx) + img[y0c, x1c] * fx
    bot = img[y1c, x0c] * (1 - fx) + img[y1c, x1c] * fx
    return top * (1 - fy) + bot * fy


@dataclass
class InpaintSample:
    """One try-on training/inference item. coarse equals person exactly
    wherever mask = 0."""

    person: np.ndarray
    garment: np.ndarray
    mask: np.ndarray   # (H, W) strictly {0, 1}
    coarse: np.ndarray
    flow: np.ndarray   # (H, W, 2)

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ConfigurationError("mask must be strictly binary")
        h, w = m.shape
        for name in ("person", "garment", "coarse"):
            arr = getattr(self, name)
            if arr.shape[:2] != (h, w):
                raise ConfigurationError(f"{name} shape {arr.shape} mismatches mask {(h, w)}")
        off = m[..., None] == 0
        if not np.array_equal(np.asarray(self.coarse)[off[..., 0]],
                              np.asarray(self.person)[off[..., 0]]):
            raise ConfigurationError("coarse must equal person where mask = 0")
        self.mask = m


def assemble_coarse(person, garment, mask, flow) -> InpaintSample:
    """coarse = (1 - m) * person + m * warp(garment, flow), exact where m = 0."""
    person = np.asarray(person, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if person.shape[:2] != mask.shape:
        raise ConfigurationError("person and mask sizes disagree")
    warped = warp_apply(garment, flow)
    m3 = mask[..., None]
    coarse = np.where(m3 == 1.0, warped, person)
    return InpaintSample(person=person, garment=np.asarray(garment, dtype=np.float64),
                         mask=mask, coarse=coarse, flow=np.asarray(flow, dtype=np.float64))


def fit_affine_flow(garment: np.ndarray, mask: np.ndarray,
                    background_tol: float = 0.04) -> np.ndarray:
    """Synthetic appearance flow: the affine map sending the garment's
    content bounding box onto the mask's bounding box (flow prediction
    itself is out of scope; this supplies plausible inputs for warp_apply).
    """
    garment = np.asarray(garment, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    bg = np.median(garment.reshape(-1, garment.shape[-1]), axis=0)
    content = np.abs(garment - bg).sum(axis=-1) > background_tol
    if not content.any() or not mask.any():
        return np.zeros((h, w, 2))
    gy, gx = np.nonzero(content)
    my, mx = np.nonzero(mask)
    g_top, g_bot, g_left, g_right = gy.min(), gy.max(), gx.min(), gx.max()
    m_top, m_bot, m_left, m_right = my.min(), my.max(), mx.min(), mx.max()
    sy = (g_bot - g_top + 1) / max(m_bot - m_top + 1, 1)
    sx = (g_right - g_left + 1) / max(m_right - m_left + 1, 1)
    ys, xs = np.mgrid[0:h, 0:w]
    src_x = g_left + (xs - m_left + 0.5) * sx - 0.5
    src_y = g_top + (ys - m_top + 0.5) * sy - 0.5
    return np.stack([src_x - xs, src_y - ys], axis=-1)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 3
    cond_dim: int = 128
    base_channels: int = 32
    stages: int = 1        # number of 2x downsamplings before the bottleneck
    time_dim: int = 64
    groups: int = 8
    seed: int = 0

    def __post_init__(self):
        if min(self.latent_channels, self.cond_dim, self.base_channels,
               self.time_dim) <= 0 or self.stages < 0:
            raise ConfigurationError("DenoiserConfig dimensions must be positive")
        if self.base_channels % self.groups:
            raise ConfigurationError("base_channels must be divisible by groups")


def sinusoidal_time_embedding(t, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Standard sin/cos embedding of an integer timestep."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) /
                      max(half - 1, 1))
    ang = torch.as_tensor(t, dtype=torch.float64).reshape(-1, 1) * freqs[None, :]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(emb.shape[0], 1, dtype=emb.dtype)], dim=1)
    return emb.to(dtype)


class _ResBlock(nn.Module):
    def __init__(self, c_in, c_out, time_dim, groups):
        super().__init__()
        g_in = math.gcd(groups, c_in)
        g_out = math.gcd(groups, c_out)
        self.norm1 = nn.GroupNorm(g_in, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(g_out, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _CrossAttention(nn.Module):
    """Single-head cross-attention: queries from grid cells, keys/values
    from the condition tokens, residual output. Permuting the tokens leaves
    the output unchanged (softmax over tokens has no positional role)."""

    def __init__(self, channels, cond_dim):
        super().__init__()
        self.scale = channels ** -0.5
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(cond_dim, channels)
        self.to_v = nn.Linear(cond_dim, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, cond):
        b, c, h, w = x.shape
        q = self.to_q(x.flatten(2).transpose(1, 2))      # (B, hw, C)
        k = self.to_k(cond)                              # (B, n_tok, C)
        v = self.to_v(cond)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.to_out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """Encoder-decoder eps-predictor. Input channels are
    ch(z_t) + ch(z_lc) + 1 (the latent-resolution mask); the timestep
    embedding is injected in every residual block; a cross-attention block
    sits at the bottleneck; output matches z_t's shape."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        td = config.time_dim
        in_ch = 2 * config.latent_channels + 1
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.in_conv = nn.Conv2d(in_ch, c, 3, padding=1)
        downs, chans = [], [c]
        for _ in range(config.stages):
            downs.append(_ResBlock(chans[-1], chans[-1], td, config.groups))
            downs.append(nn.Conv2d(chans[-1], chans[-1] * 2, 3, stride=2, padding=1))
            chans.append(chans[-1] * 2)
        self.downs = nn.ModuleList(downs)
        cm = chans[-1]
        self.mid1 = _ResBlock(cm, cm, td, config.groups)
        self.cross = _CrossAttention(cm, config.cond_dim)
        self.mid2 = _ResBlock(cm, cm, td, config.groups)
        ups = []
        for i in range(config.stages):
            c_hi, c_lo = chans[-1 - i], chans[-2 - i]
            ups.append(nn.Conv2d(c_hi, c_lo, 3, padding=1))           # post-upsample
            ups.append(_ResBlock(2 * c_lo, c_lo, td, config.groups))  # after skip concat
        self.ups = nn.ModuleList(ups)
        self.out_norm = nn.GroupNorm(math.gcd(config.groups, c), c)
        self.out_conv = nn.Conv2d(c, config.latent_channels, 3, padding=1)
        self._init_weights(config.seed)

    def _init_weights(self, seed):
        gen = torch.Generator().manual_seed(seed)
        for p in self.parameters():
            if p.ndim >= 2:
                with torch.no_grad():
                    std = 0.2 / math.sqrt(max(p[0].numel(), 1))
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64)
                            .mul(std).to(p.dtype))
            else:
                nn.init.zeros_(p)
        for m in self.modules():
            if isinstance(m, nn.GroupNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, z_t, z_lc, m_latent, cond, t):
        """z_t, z_lc: (B, ch, h, w); m_latent: (B, 1, h, w);
        cond: (B, n_tokens, cond_dim); t: (B,) 1-indexed timesteps."""
        if z_t.shape != z_lc.shape:
            raise ConfigurationError(
                f"z_t {tuple(z_t.shape)} and z_lc {tuple(z_lc.shape)} disagree")
        if m_latent.shape[-2:] != z_t.shape[-2:]:
            raise ConfigurationError("mask is not at latent resolution")
        t_emb = self.time_mlp(
            sinusoidal_time_embedding(t, self.config.time_dim, z_t.dtype))
        x = self.in_conv(torch.cat([z_t, z_lc, m_latent], dim=1))
        skips = []
        it = iter(self.downs)
        for res, down in zip(it, it):
            x = res(x, t_emb)
            skips.append(x)
            x = down(x)
        x = self.mid1(x, t_emb)
        x = self.cross(x, cond)
        x = self.mid2(x, t_emb)
        it = iter(self.ups)
        for conv, res in zip(it, it):
            x = conv(F.interpolate(x, scale_factor=2, mode="nearest"))
            skip = skips.pop()
            x = res(torch.cat([x, skip], dim=1), t_emb)
        return self.out_conv(F.silu(self.out_norm(x)))


def save_denoiser(model: Denoiser, path, tag: str = "") -> None:
    arrays = {name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    container.save_arrays(path, arrays, kind="denoiser",
                          meta={"config": asdict(model.config), "tag": tag})


def load_denoiser(path) -> Denoiser:
    arrays, kind, meta = container.load_arrays(path)
    if kind != "denoiser":
        raise ConfigurationError(f"checkpoint kind {kind!r} is not 'denoiser'")
    model = Denoiser(DenoiserConfig(**meta["config"]))
    expected = model.state_dict()
    if set(arrays) != set(expected):
        raise ConfigurationError("checkpoint arrays do not match denoiser config")
    for name, arr in arrays.items():
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise ConfigurationError(f"array {name!r} shape mismatch")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _to_latent_batch(arr: np.ndarray, dtype) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(arr))
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t.permute(2, 0, 1)[None]
    return t.to(dtype)


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    """Mask at latent resolution (area average; fractional at edges)."""
    return encode(np.asarray(mask, dtype=np.float64)[..., None])[..., 0]


def training_loss(model: Denoiser, sample: InpaintSample, cond_tokens: np.ndarray,
                  sched: DiffusionSchedule, rng: np.random.Generator):
    """Sample (t, eps), form z_t from the person latent, and return the
    torch MSE between eps and the prediction (graph attached)."""
    t = int(rng.integers(1, sched.T + 1))
    z0 = encode(sample.person)
    eps = rng.standard_normal(z0.shape)
    z_t = forward_diffuse(z0, t, eps, sched).z
    z_lc = encode(sample.coarse)
    m_lat = downsample_mask(sample.mask)
    dtype = next(model.parameters()).dtype
    pred = model(_to_latent_batch(z_t, dtype), _to_latent_batch(z_lc, dtype),
                 _to_latent_batch(m_lat, dtype),
                 torch.from_numpy(np.ascontiguousarray(cond_tokens))[None].to(dtype),
                 torch.tensor([t]))
    target = _to_latent_batch(eps, dtype)
    return ((target - pred) ** 2).mean(), t


def train_step(model: Denoiser, sample: InpaintSample, encoder, sched,
               rng: np.random.Generator):
    """One optimizer-free gradient evaluation of the denoising objective.

    encoder: callable garment-image -> condition token array (the frozen,
    fine-tuned teacher). Returns (loss value, grads by parameter name).
    """
    cond = encoder(sample.garment)
    loss, _ = training_loss(model, sample, cond, sched, rng)
    if not torch.isfinite(loss):
        raise NumericalError("denoising loss is non-finite")
    model.zero_grad()
    loss.backward()
    grads = {name: p.grad.detach().cpu().numpy().copy()
             for name, p in model.named_parameters()}
    return float(loss), grads


@dataclass(frozen=True)
class InpaintTrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 8
    epochs: int = 8


def train_inpaint(model: Denoiser, samples, cond_tokens, sched,
                  cfg: InpaintTrainConfig, rng, out_dir=None):
    """Train the denoiser on prepared InpaintSamples with fixed condition
    tokens per sample. Returns the per-step log."""
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate)
    log = []
    log_path = Path(out_dir) / "train_inpaint_log.jsonl" if out_dir else None
    if log_path:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")
    step = 0
    n = len(samples)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            losses = []
            opt.zero_grad()
            for i in idx:
                loss, _ = training_loss(model, samples[i], cond_tokens[i], sched, rng)
                (loss / len(idx)).backward()
                losses.append(float(loss))
            batch_loss = float(np.mean(losses))
            if not math.isfinite(batch_loss):
                raise NumericalError(f"inpaint loss diverged at step {step}")
            opt.step()
            record = {"step": step, "epoch": epoch, "loss": batch_loss}
            log.append(record)
            if log_path:
                with log_path.open("a") as fh:
                    fh.write(json.dumps(record) + "\n")
            step += 1
    return log


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

_PLMS_COEFFS = {
    1: (1.0,),
    2: (3.0 / 2.0, -1.0 / 2.0),
    3: (23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0),
    4: (55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0),
}


def _timestep_sequence(T: int, steps: int) -> list:
    if not 1 <= steps <= T:
        raise ConfigurationError(f"steps {steps} outside [1, {T}]")
    ts = np.unique(np.linspace(1, T, steps).round().astype(int))
    return list(ts[::-1])


def sample_latent(eps_fn, shape, sched: DiffusionSchedule, steps: int,
                  method: str = "ddim", rng=None, z_init=None) -> np.ndarray:
    """Run the deterministic reverse process and return the final z0.

    eps_fn(z_t, t) -> eps prediction (numpy in, numpy out). DDIM uses the
    eta = 0 update; PLMS combines the last eps predictions with linear
    multistep coefficients (orders 1/2/3 warm up the history, then 4).
    """
    if method not in ("ddim", "plms"):
        raise ConfigurationError(f"unsupported sampling method {method!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    z = np.asarray(z_init, dtype=np.float64) if z_init is not None \
        else rng.standard_normal(shape)
    t_seq = _timestep_sequence(sched.T, steps)
    history = []
    for k, t in enumerate(t_seq):
        eps = np.asarray(eps_fn(z, t), dtype=np.float64)
        if method == "plms":
            history.append(eps)
            if len(history) > 4:
                history.pop(0)
            order = len(history)
            coeffs = _PLMS_COEFFS[order]
            eps_use = sum(c * e for c, e in zip(coeffs, reversed(history)))
        else:
            eps_use = eps
        abar_t = sched.alpha_bar(t)
        abar_prev = sched.alpha_bar(t_seq[k + 1]) if k + 1 < len(t_seq) else 1.0
        z0_hat = (z - math.sqrt(1.0 - abar_t) * eps_use) / math.sqrt(abar_t)
        z = math.sqrt(abar_prev) * z0_hat + math.sqrt(1.0 - abar_prev) * eps_use
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"sampler produced non-finite latent at t={t}")
    return z


def sample(model: Denoiser, sample_inputs: InpaintSample, cond_tokens: np.ndarray,
           sched: DiffusionSchedule, steps: int, method: str = "plms",
           rng_seed: int = 0):
    """Full inpainting inference for one sample.

    Returns (image, info): the decoded latent composited so that pixels
    with mask = 0 are taken from the person image bit-exactly, plus a
    reproducibility record (seed, steps, method, schedule hash).
    """
    z_lc = encode(sample_inputs.coarse)
    m_lat = downsample_mask(sample_inputs.mask)
    dtype = next(model.parameters()).dtype
    cond = torch.from_numpy(np.ascontiguousarray(cond_tokens))[None].to(dtype)
    z_lc_t = _to_latent_batch(z_lc, dtype)
    m_lat_t = _to_latent_batch(m_lat, dtype)

    @torch.no_grad()
    def eps_fn(z, t):
        pred = model(_to_latent_batch(z, dtype), z_lc_t, m_lat_t, cond,
                     torch.tensor([t]))
        return pred[0].permute(1, 2, 0).double().numpy()

    rng = np.random.default_rng(rng_seed)
    z0 = sample_latent(eps_fn, encode(sample_inputs.person).shape, sched, steps,
                       method=method, rng=rng)
    decoded = np.clip(decode(z0), 0.0, 1.0)
    m3 = sample_inputs.mask[..., None]
    out = np.where(m3 == 1.0, decoded, sample_inputs.person)
    info = {"seed": rng_seed, "steps": steps, "method": method,
            "schedule_hash": sched.content_hash()}
    return out, info
