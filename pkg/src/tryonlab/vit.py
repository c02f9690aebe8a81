"""Small Vision Transformer used as garment condition encoder.

One network plays both roles of the distillation pair: the student is
trained by gradient descent, the teacher is its EMA copy (see
``tryonlab.distill``). The class token's per-head attention over the patch
grid is the raw material for keypoint extraction, and a linear map on the
final tokens produces the condition sequence consumed by the denoiser's
cross-attention.

Pixel inputs are numpy H x W x 3 arrays in [0, 1]; torch is internal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .errors import ConfigurationError, NumericalError


@dataclass(frozen=True)
class ViTConfig:
    """Backbone geometry. Paper-scale values (768-dim, depth 12) are plain
    config values here; toy defaults keep tests fast."""

    image_size: tuple = (64, 48)  # (height, width) px
    patch_size: int = 16
    embed_dim: int = 128
    num_heads: int = 4
    depth: int = 4
    mlp_ratio: float = 4.0
    proj_dim: int = 256          # projection-head output distribution size
    condition_dim: int = 128     # cross-attention token width
    local_size: tuple = (32, 32)  # local crops are resized to this before encoding
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        lh, lw = self.local_size
        if min(h, w, self.patch_size, self.embed_dim, self.num_heads, self.depth,
               self.proj_dim, self.condition_dim, lh, lw) <= 0:
            raise ConfigurationError("all ViTConfig dimensions must be positive")
        for name, (hh, ww) in (("image_size", (h, w)), ("local_size", (lh, lw))):
            if hh % self.patch_size or ww % self.patch_size:
                raise ConfigurationError(
                    f"{name} {(hh, ww)} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def grid_shape(self) -> tuple:
        return (self.image_size[0] // self.patch_size,
                self.image_size[1] // self.patch_size)

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid_shape
        return gh * gw


@dataclass
class AttentionMap:
    """Class-token -> patch attention, one row per head, restricted to patch
    keys and renormalized so each row is a probability vector over the grid."""

    head_rows: np.ndarray   # (num_heads, P)
    grid_shape: tuple       # (rows, cols)

    def __post_init__(self):
        rows = np.asarray(self.head_rows, dtype=np.float64)
        gh, gw = self.grid_shape
        if rows.ndim != 2 or rows.shape[1] != gh * gw:
            raise ConfigurationError(
                f"head_rows shape {rows.shape} does not match grid {self.grid_shape}")
        if rows.min() < -1e-9 or rows.max() > 1 + 1e-9:
            raise ConfigurationError("attention entries must lie in [0, 1]")
        sums = rows.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ConfigurationError(f"attention rows must sum to 1 (got {sums})")
        self.head_rows = rows

    @property
    def num_heads(self) -> int:
        return self.head_rows.shape[0]

    def head_mean(self) -> np.ndarray:
        """Head-averaged map as a (rows, cols) grid; still sums to 1."""
        return self.head_rows.mean(axis=0).reshape(self.grid_shape)

    def head_grid(self, head: int) -> np.ndarray:
        return self.head_rows[head].reshape(self.grid_shape)


@dataclass
class ConditionEmbedding:
    """Token sequence fed to the denoiser's cross-attention: class token
    first, then one token per patch, each of width condition_dim."""

    tokens: np.ndarray  # (1 + P, condition_dim)
    grid_shape: tuple = (0, 0)

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2:
            raise ConfigurationError("condition tokens must be a 2-d array")
        if not np.all(np.isfinite(tokens)):
            raise NumericalError("condition tokens contain non-finite values")
        gh, gw = self.grid_shape
        if gh * gw and tokens.shape[0] != 1 + gh * gw:
            raise ConfigurationError(
                f"expected {1 + gh * gw} tokens for grid {self.grid_shape}, "
                f"got {tokens.shape[0]}")
        self.tokens = tokens

    @property
    def class_token(self) -> np.ndarray:
        return self.tokens[0]


def _trunc_normal_(tensor: torch.Tensor, std: float, gen: torch.Generator) -> None:
    # Truncated normal on [-2 std, 2 std] via inverse-CDF so a Generator
    # can drive it (nn.init.trunc_normal_ has no generator argument).
    lo = math.erf(-2.0 / math.sqrt(2.0))
    hi = math.erf(2.0 / math.sqrt(2.0))
    with torch.no_grad():
        u = torch.rand(tensor.shape, generator=gen, dtype=torch.float64)
        u = lo + u * (hi - lo)
        tensor.copy_((torch.erfinv(u) * math.sqrt(2.0) * std).to(tensor.dtype))


class _Attention(nn.Module):
    """Multi-head self-attention that keeps the last softmax probabilities."""

    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.last_attn = None  # (B, heads, N, N), detached

    def forward(self, x):
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out)


class _Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class ViT(nn.Module):
    """Pre-norm ViT with a class token, a projection head producing a
    proj_dim distribution for distillation, and a condition head mapping
    tokens to condition_dim.

    Images smaller than config.image_size (local crops) are accepted as
    long as they are patch-aligned; positional embeddings are bilinearly
    interpolated to the smaller grid.
    """

    def __init__(self, config: ViTConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(3, d, kernel_size=config.patch_size,
                                     stride=config.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + config.num_patches, d))
        self.blocks = nn.ModuleList(
            [_Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.depth)])
        self.norm = nn.LayerNorm(d)
        self.proj_head = nn.Sequential(nn.Linear(d, d), nn.GELU(),
                                       nn.Linear(d, config.proj_dim))
        self.condition_head = nn.Linear(d, config.condition_dim)
        self._init_weights(config.seed)

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for p in self.parameters():
            if p.ndim >= 2:
                _trunc_normal_(p, 0.02, gen)
            else:
                nn.init.zeros_(p)
        # LayerNorm scales start at 1, not trunc-normal noise
        for m in self.modules():
            if isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        _trunc_normal_(self.cls_token, 0.02, gen)
        _trunc_normal_(self.pos_embed, 0.02, gen)

    @property
    def dtype(self):
        return self.patch_embed.weight.dtype

    def _interp_pos(self, grid: tuple) -> torch.Tensor:
        gh, gw = self.config.grid_shape
        h, w = grid
        if (h, w) == (gh, gw):
            return self.pos_embed
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:].reshape(1, gh, gw, -1).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(h, w), mode="bilinear",
                                  align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, h * w, -1)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def forward_tokens(self, images: torch.Tensor):
        """images: (B, 3, H, W) with H, W patch-aligned. Returns
        (tokens (B, 1+P, D) after the final norm, per-layer attention list,
        grid shape)."""
        p = self.config.patch_size
        B, C, H, W = images.shape
        if C != 3 or H % p or W % p:
            raise ConfigurationError(
                f"image batch shape {tuple(images.shape)} is not 3-channel "
                f"patch-aligned for patch_size {p}")
        grid = (H // p, W // p)
        x = self.patch_embed(images)                   # (B, D, h, w)
        x = x.flatten(2).transpose(1, 2)               # (B, P, D)
        cls = self.cls_token.expand(B, -1, -1)
        x = torch.cat([cls, x], dim=1) + self._interp_pos(grid)
        attn_layers = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not torch.all(torch.isfinite(x)):
                raise NumericalError(f"non-finite activations after layer {i}")
            attn_layers.append(block.attn.last_attn)
        return self.norm(x), attn_layers, grid

    def forward(self, images: torch.Tensor):
        """Returns (condition tokens, final-layer attention, proj logits)."""
        tokens, attn_layers, grid = self.forward_tokens(images)
        cond = self.condition_head(tokens)
        logits = self.proj_head(tokens[:, 0])
        return cond, attn_layers[-1], logits, grid


def _to_batch(image: np.ndarray, model: ViT) -> torch.Tensor:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigurationError(f"expected an H x W x 3 image, got shape {image.shape}")
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
    return t.to(model.dtype).unsqueeze(0)


def _class_attention(attn: torch.Tensor, grid: tuple) -> AttentionMap:
    # attn: (1, heads, N, N); take the class-token query row, drop the
    # class-token key, renormalize over patch keys.
    rows = attn[0, :, 0, 1:].double()
    rows = rows / rows.sum(dim=1, keepdim=True)
    return AttentionMap(rows.numpy(), grid)


@torch.no_grad()
def vit_forward(model: ViT, image: np.ndarray):
    """Full encoder pass on one image.

    Returns (ConditionEmbedding, final-layer AttentionMap, proj_dist) where
    proj_dist is the plain softmax of the projection head; distillation
    temperatures are applied by the caller on the logits path.
    """
    cond, attn, logits, grid = model(_to_batch(image, model))
    emb = ConditionEmbedding(cond[0].double().numpy(), grid)
    proj_dist = torch.softmax(logits[0].double(), dim=0).numpy()
    return emb, _class_attention(attn, grid), proj_dist


@torch.no_grad()
def extract_class_attention(model: ViT, image: np.ndarray, layer: int = -1) -> AttentionMap:
    """Class-token attention of one layer (default: final), per head,
    renormalized over patch keys."""
    depth = model.config.depth
    if layer < 0:
        layer += depth
    if not 0 <= layer < depth:
        raise ConfigurationError(f"layer {layer} out of range [0, {depth})")
    _, attn_layers, grid = model.forward_tokens(_to_batch(image, model))
    return _class_attention(attn_layers[layer], grid)


@torch.no_grad()
def project_condition(model: ViT, backbone_tokens: np.ndarray,
                      grid_shape: tuple = (0, 0)) -> ConditionEmbedding:
    """Apply the condition linear map tokenwise to backbone tokens."""
    tokens = np.asarray(backbone_tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != model.config.embed_dim:
        raise ConfigurationError(
            f"backbone tokens must be (N, {model.config.embed_dim}), got {tokens.shape}")
    t = torch.from_numpy(tokens)
    w = model.condition_head.weight.double()
    b = model.condition_head.bias.double()
    return ConditionEmbedding((t @ w.T + b).numpy(), grid_shape)


def save_checkpoint(model: ViT, path, tag: str = "") -> None:
    arrays = {name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    meta = {"config": asdict(model.config), "tag": tag}
    container.save_arrays(path, arrays, kind="vit", meta=meta)


def load_checkpoint(path) -> ViT:
    arrays, kind, meta = container.load_arrays(path)
    if kind != "vit":
        raise ConfigurationError(f"checkpoint kind {kind!r} is not 'vit'")
    cfg_dict = dict(meta["config"])
    cfg_dict["image_size"] = tuple(cfg_dict["image_size"])
    cfg_dict["local_size"] = tuple(cfg_dict["local_size"])
    config = ViTConfig(**cfg_dict)
    model = ViT(config)
    expected = model.state_dict()
    if set(arrays) != set(expected):
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        raise ConfigurationError(
            f"checkpoint arrays do not match config (missing={sorted(missing)}, "
            f"extra={sorted(extra)})")
    for name, arr in arrays.items():
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise ConfigurationError(
                f"array {name!r} has shape {arr.shape}, config requires "
                f"{tuple(expected[name].shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return model
