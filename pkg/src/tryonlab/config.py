"""Experiment configuration: a flat `key = value` text format with dotted
namespaces (diff-friendly), mapped onto the module configs.

Unknown keys and unparsable values raise ConfigurationError naming the
offending key; the CLI turns that into exit code 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .augment import AugmentPolicy
from .diffusion import DenoiserConfig, InpaintTrainConfig, build_schedule
from .distill import DistillConfig
from .errors import ConfigurationError
from .vit import ViTConfig


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_size(s: str):
    parts = s.replace("x", ",").split(",")
    if len(parts) != 2:
        raise ValueError(f"not a HxW size: {s!r}")
    return (int(parts[0]), int(parts[1]))


def _parse_floats(s: str):
    return tuple(float(p) for p in s.split(","))


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "out_dir": (str, "runs/exp"),
    "crop_mode": (str, "random"),
    "data.root": (str, "data/synth"),
    "data.n_pairs": (int, 50),
    "data.n_test": (int, 10),
    "data.image_size": (_parse_size, (64, 48)),
    "vit.patch_size": (int, 16),
    "vit.embed_dim": (int, 128),
    "vit.num_heads": (int, 4),
    "vit.depth": (int, 4),
    "vit.mlp_ratio": (float, 4.0),
    "vit.proj_dim": (int, 256),
    "vit.condition_dim": (int, 128),
    "vit.local_size": (_parse_size, (32, 32)),
    "vit.seed": (int, 0),
    "ssl.global_crops": (int, 2),
    "ssl.local_crops": (int, 10),
    "ssl.student_temp": (float, 0.1),
    "ssl.teacher_temp": (float, 0.04),
    "ssl.center_momentum": (float, 0.9),
    "ssl.ema_start": (float, 0.996),
    "ssl.ema_end": (float, 1.0),
    "ssl.lr": (float, 2e-5),
    "ssl.weight_decay": (float, 0.04),
    "ssl.batch_size": (int, 8),
    "ssl.epochs": (int, 30),
    "ssl.mass_fraction": (float, 0.6),
    "ssl.keypoint_layer": (int, -1),
    "ssl.checkpoint": (str, ""),
    "augment.flip_prob": (float, 0.5),
    "augment.brightness": (float, 0.4),
    "augment.contrast": (float, 0.4),
    "augment.saturation": (float, 0.2),
    "augment.blur_prob_global": (float, 1.0),
    "augment.blur_prob_local": (float, 0.5),
    "augment.blur_sigma_lo": (float, 0.1),
    "augment.blur_sigma_hi": (float, 2.0),
    "augment.norm_mean": (_parse_floats, (0.5, 0.5, 0.5)),
    "augment.norm_std": (_parse_floats, (0.5, 0.5, 0.5)),
    "sched.T": (int, 1000),
    "sched.beta_start": (float, 1e-4),
    "sched.beta_end": (float, 0.02),
    "denoiser.base_channels": (int, 32),
    "denoiser.stages": (int, 1),
    "denoiser.time_dim": (int, 64),
    "denoiser.seed": (int, 0),
    "inpaint.lr": (float, 3e-4),
    "inpaint.batch_size": (int, 8),
    "inpaint.epochs": (int, 8),
    "inpaint.checkpoint": (str, ""),
    "infer.steps": (int, 100),
    "infer.method": (str, "plms"),
    "infer.count": (int, 5),
    "eval.ssim_window": (int, 11),
    "eval.ssim_sigma": (float, 1.5),
    "eval.generated_dir": (str, ""),
}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: default for k, (_, default) in SCHEMA.items()}
        for k, v in self.values.items():
            if k not in SCHEMA:
                raise ConfigurationError(f"unknown config key: {k}")
            merged[k] = v
        self.values = merged

    def __getitem__(self, key):
        if key not in self.values:
            raise ConfigurationError(f"unknown config key: {key}")
        return self.values[key]

    def set(self, key, value):
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown config key: {key}")
        self.values[key] = value

    def to_flat_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in sorted(self.values.items())}

    # ---- module config builders -------------------------------------

    def vit_config(self) -> ViTConfig:
        return ViTConfig(
            image_size=self["data.image_size"],
            patch_size=self["vit.patch_size"],
            embed_dim=self["vit.embed_dim"],
            num_heads=self["vit.num_heads"],
            depth=self["vit.depth"],
            mlp_ratio=self["vit.mlp_ratio"],
            proj_dim=self["vit.proj_dim"],
            condition_dim=self["vit.condition_dim"],
            local_size=self["vit.local_size"],
            seed=self["vit.seed"],
        )

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            M=self["ssl.global_crops"],
            N=self["ssl.local_crops"],
            student_temp=self["ssl.student_temp"],
            teacher_temp=self["ssl.teacher_temp"],
            center_momentum=self["ssl.center_momentum"],
            ema_start=self["ssl.ema_start"],
            ema_end=self["ssl.ema_end"],
            learning_rate=self["ssl.lr"],
            weight_decay=self["ssl.weight_decay"],
            batch_size=self["ssl.batch_size"],
            epochs=self["ssl.epochs"],
            mass_fraction=self["ssl.mass_fraction"],
            keypoint_layer=self["ssl.keypoint_layer"],
        )

    def augment_policy(self, view: str) -> AugmentPolicy:
        blur_prob = self["augment.blur_prob_global"] if view == "global" \
            else self["augment.blur_prob_local"]
        return AugmentPolicy(
            flip_prob=self["augment.flip_prob"],
            brightness=self["augment.brightness"],
            contrast=self["augment.contrast"],
            saturation=self["augment.saturation"],
            blur_prob=blur_prob,
            blur_sigma_range=(self["augment.blur_sigma_lo"],
                              self["augment.blur_sigma_hi"]),
            norm_mean=self["augment.norm_mean"],
            norm_std=self["augment.norm_std"],
            rng_seed=self["seed"],
        )

    def schedule(self):
        return build_schedule(self["sched.T"], self["sched.beta_start"],
                              self["sched.beta_end"])

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            cond_dim=self["vit.condition_dim"],
            base_channels=self["denoiser.base_channels"],
            stages=self["denoiser.stages"],
            time_dim=self["denoiser.time_dim"],
            seed=self["denoiser.seed"],
        )

    def inpaint_train_config(self) -> InpaintTrainConfig:
        return InpaintTrainConfig(
            learning_rate=self["inpaint.lr"],
            batch_size=self["inpaint.batch_size"],
            epochs=self["inpaint.epochs"],
        )


def parse_config_text(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown config key: {key}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(val)
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(f"config key {key}: {exc}") from exc
    return ExperimentConfig(values)


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def parse_override(key: str, raw: str):
    """Coerce one `--key value`-style override using the schema's parser."""
    if key not in SCHEMA:
        raise ConfigurationError(f"unknown config key: {key}")
    parser, _ = SCHEMA[key]
    try:
        return parser(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"config key {key}: {exc}") from exc
