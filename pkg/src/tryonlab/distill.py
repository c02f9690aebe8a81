"""Teacher/student self-supervised fine-tuning of the condition encoder.

The student encodes M global + N local views per garment; the teacher (an
EMA copy) encodes only the globals and supplies pseudo-labels. The loss is
the multi-view cross-entropy sum over the M(M+N-1) ordered pairs with the
same-view pair excluded. Teacher centering and asymmetric temperatures are
applied to keep the objective from collapsing; the raw objective written
over unsharpened outputs is untrainable, so these are the standard remedy
and are surfaced in the config.

Crop policy comes in two flavors: "random" local crops (the SS+RF regime)
and "keypoint" local crops centered on attention-cluster centroids
(SS+SF), recomputed from the current teacher once per epoch.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import keypoints as kp
from .augment import AugmentPolicy, augment_view, sample_crop_box
from .errors import ConfigurationError, NumericalError
from .vit import ViT, ViTConfig, extract_class_attention, save_checkpoint


@dataclass(frozen=True)
class DistillConfig:
    M: int = 2                      # global crops
    N: int = 10                     # local crops
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    ema_start: float = 0.996        # cosine ramp to ema_end over training
    ema_end: float = 1.0
    learning_rate: float = 2e-5
    weight_decay: float = 0.04
    batch_size: int = 8             # paper-scale default is 32
    epochs: int = 30
    global_scale: tuple = (0.25, 1.0)
    local_scale: tuple = (0.05, 0.25)
    mass_fraction: float = 0.6      # theta for keypoint extraction
    keypoint_layer: int = -1

    def __post_init__(self):
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ConfigurationError("temperatures must be positive")
        for name, v in (("center_momentum", self.center_momentum),
                        ("ema_start", self.ema_start), ("ema_end", self.ema_end)):
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} {v} outside [0, 1]")
        if self.M < 1 or self.N < 0:
            raise ConfigurationError("need M >= 1 global and N >= 0 local crops")


@dataclass
class TeacherState:
    """EMA copy of the student plus the running center of its logits."""

    model: ViT
    center: np.ndarray  # (proj_dim,)

    @classmethod
    def from_student(cls, student: ViT) -> "TeacherState":
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        return cls(model=teacher, center=np.zeros(student.config.proj_dim))


def cross_entropy(a, b):
    """H(a, b) = -sum(a * log b) for two probability vectors; b is clamped
    at 1e-12 before the log. Accepts numpy arrays or torch tensors and
    stays differentiable through b."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return -(a * torch.log(b.clamp(min=1e-12))).sum()

def ss_loss(teacher_dists, student_dists):
    """Multi-view distillation loss: sum of H(teacher_i, student_j) over
    global teacher views i and all student views j != i. Views are ordered
    with the M global crops first in BOTH lists, so i == j names the same
    view. Returns (loss, term_count) for auditability."""
    m = len(teacher_dists)
    total_views = len(student_dists)
    if total_views < m:
        raise ConfigurationError(
            f"student must cover at least the {m} global views, got {total_views}")
    terms = 0
    total = None
    for i in range(m):
        for j in range(total_views):
            if j == i:
                continue
            h = cross_entropy(teacher_dists[i], student_dists[j])
            total = h if total is None else total + h
            terms += 1
    if total is None:
        total = torch.zeros(())
    return total, terms


def teacher_distribution(state: TeacherState, image_view: np.ndarray,
                         temp: float = 0.04):
    """Teacher pseudo-label for one global view: softmax of the centered,
    sharpened projection logits. No gradients flow into the teacher."""
    with torch.no_grad():
        logits = _proj_logits(state.model, _views_to_tensor([image_view], state.model))[0]
        centered = (logits - torch.as_tensor(state.center, dtype=logits.dtype)) / temp
        return torch.softmax(centered, dim=0).numpy()


def ema_update(teacher: ViT, student: ViT, lam: float) -> None:
    """teacher <- lam * teacher + (1 - lam) * student, per named array."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda {lam} outside [0, 1]")
    t_params = dict(teacher.state_dict())
    s_params = dict(student.state_dict())
    if set(t_params) != set(s_params):
        raise ConfigurationError("teacher/student parameter sets differ")
    with torch.no_grad():
        for name, tp in t_params.items():
            sp = s_params[name]
            if tp.shape != sp.shape:
                raise ConfigurationError(
                    f"shape mismatch on {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
            tp.mul_(lam).add_(sp, alpha=1.0 - lam)


def _views_to_tensor(views, model):
    arr = np.stack([np.ascontiguousarray(v.transpose(2, 0, 1)) for v in views])
    return torch.from_numpy(arr).to(model.dtype)


def _proj_logits(model: ViT, batch: torch.Tensor) -> torch.Tensor:
    tokens, _, _ = model.forward_tokens(batch)
    return model.proj_head(tokens[:, 0])


def ema_lambda(step: int, total_steps: int, cfg: DistillConfig) -> float:
    if total_steps <= 1:
        return cfg.ema_end
    t = step / (total_steps - 1)
    return cfg.ema_end - (cfg.ema_end - cfg.ema_start) * (math.cos(math.pi * t) + 1) / 2


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 1:
        return base_lr
    t = step / (total_steps - 1)
    return base_lr * (math.cos(math.pi * t) + 1) / 2


def _attention_concentration(model: ViT, images, mass_fraction: float) -> float:
    """Mean fraction of the grid needed to cover theta of head-mean
    attention; lower means sharper focus. Diagnostic only."""
    fracs = []
    for img in images:
        att = extract_class_attention(model, img)
        row = att.head_mean().reshape(-1)
        n = len(kp.threshold_head(row / row.sum(), mass_fraction))
        fracs.append(n / row.size)
    return float(np.mean(fracs))


def _epoch_keypoint_boxes(model, images, cfg, rng):
    """Per-image KeypointSet from the CURRENT teacher attention (refreshed
    once per epoch; stale maps trade off against recompute cost)."""
    sets = []
    for img in images:
        att = extract_class_attention(model, img, cfg.keypoint_layer)
        pts = kp.merge_heads(att, cfg.mass_fraction)
        sets.append(kp.cluster_keypoints(pts, cfg.N, rng))
    return sets


def ssl_train(garments, vit_config: ViTConfig, cfg: DistillConfig,
              crop_mode: str = "random", rng=None, out_dir=None,
              global_policy: AugmentPolicy | None = None,
              local_policy: AugmentPolicy | None = None,
              student: ViT | None = None):
    """Run the fine-tuning loop over a list of garment images.

    Per step: build M global + N local views per image, teacher encodes
    globals, student encodes everything, take the multi-view loss, step the
    student (AdamW, cosine lr), EMA the teacher, update the center from the
    batch-mean teacher logits. Returns (TeacherState, log) where log is a
    list of dicts (also appended to out_dir/train_ssl_log.jsonl when given).
    """
    if crop_mode not in ("random", "keypoint"):
        raise ConfigurationError(f"unknown crop_mode {crop_mode!r}")
    if not garments:
        raise ConfigurationError("dataset is empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    global_policy = global_policy or AugmentPolicy(blur_prob=1.0)
    local_policy = local_policy or AugmentPolicy(blur_prob=0.5)

    student = student if student is not None else ViT(vit_config)
    teacher_state = TeacherState.from_student(student)
    center = torch.zeros(vit_config.proj_dim, dtype=torch.float64)

    opt = torch.optim.AdamW(student.parameters(), lr=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)
    n = len(garments)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    global_size = vit_config.image_size
    local_size = vit_config.local_size

    log = []
    log_path = Path(out_dir) / "train_ssl_log.jsonl" if out_dir else None
    if log_path:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")

    step = 0
    for epoch in range(cfg.epochs):
        key_sets = None
        if crop_mode == "keypoint" and cfg.N > 0:
            key_sets = _epoch_keypoint_boxes(teacher_state.model, garments, cfg, rng)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            global_views, local_views = [], []
            for i in batch_idx:
                img = garments[i]
                for _ in range(cfg.M):
                    box, _ = sample_crop_box(rng, cfg.global_scale, img.shape[:2])
                    global_views.append(
                        augment_view(img, box, global_policy, rng, global_size))
                if cfg.N > 0:
                    if crop_mode == "keypoint":
                        boxes = kp.keypoint_crop_boxes(key_sets[i], img.shape[:2],
                                                       rng, cfg.local_scale)
                    else:
                        boxes = [sample_crop_box(rng, cfg.local_scale, img.shape[:2])[0]
                                 for _ in range(cfg.N)]
                    for box in boxes:
                        local_views.append(
                            augment_view(img, box, local_policy, rng, local_size))

            g_batch = _views_to_tensor(global_views, student)
            with torch.no_grad():
                t_logits = _proj_logits(teacher_state.model, g_batch).double()
            s_g_logits = _proj_logits(student, g_batch).double()
            s_l_logits = (_proj_logits(student, _views_to_tensor(local_views, student))
                          .double() if local_views else None)

            t_probs = torch.softmax((t_logits - center) / cfg.teacher_temp, dim=1)
            s_g_probs = torch.softmax(s_g_logits / cfg.student_temp, dim=1)
            s_l_probs = (torch.softmax(s_l_logits / cfg.student_temp, dim=1)
                         if s_l_logits is not None else None)

            loss = torch.zeros((), dtype=torch.float64)
            terms = 0
            for bi in range(len(batch_idx)):
                teacher_dists = [t_probs[bi * cfg.M + m] for m in range(cfg.M)]
                student_dists = [s_g_probs[bi * cfg.M + m] for m in range(cfg.M)]
                if s_l_probs is not None:
                    student_dists += [s_l_probs[bi * cfg.N + j] for j in range(cfg.N)]
                li, ti = ss_loss(teacher_dists, student_dists)
                loss = loss + li
                terms = ti
            loss = loss / len(batch_idx)

            if not torch.isfinite(loss):
                raise NumericalError(f"loss diverged (NaN/inf) at step {step}")

            lr = cosine_lr(step, total_steps, cfg.learning_rate)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad()
            loss.backward()
            opt.step()

            lam = ema_lambda(step, total_steps, cfg)
            ema_update(teacher_state.model, student, lam)
            batch_mean = t_logits.mean(dim=0)
            center = cfg.center_momentum * center \
                + (1.0 - cfg.center_momentum) * batch_mean

            record = {"step": step, "epoch": epoch, "loss": float(loss.detach()),
                      "terms": terms, "lambda": lam, "lr": lr}
            log.append(record)
            if log_path:
                with log_path.open("a") as fh:
                    fh.write(json.dumps(record) + "\n")
            step += 1

        diag = _attention_concentration(
            teacher_state.model, garments[: min(16, n)], cfg.mass_fraction)
        epoch_losses = [r["loss"] for r in log if r.get("epoch") == epoch]
        record = {"epoch": epoch, "epoch_loss": float(np.mean(epoch_losses)),
                  "attention_top_theta_fraction": diag}
        log.append(record)
        if log_path:
            with log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
        if out_dir:
            save_checkpoint(teacher_state.model,
                            Path(out_dir) / f"teacher_epoch{epoch:03d}.npz", tag="teacher")
            save_checkpoint(student,
                            Path(out_dir) / f"student_epoch{epoch:03d}.npz", tag="student")

    teacher_state.center = center.numpy()
    return teacher_state, log
