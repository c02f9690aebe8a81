"""tryonlab: desk-scale virtual try-on experiments.

A self-supervised ViT condition encoder (teacher/student distillation with
attention-keypoint-guided local crops) driving a toy latent-diffusion
inpainter, plus dataset synthesis, metrics, a CLI, and visualization.
"""

from .vit import ViT, ViTConfig, AttentionMap, ConditionEmbedding
from .augment import AugmentPolicy, CropBox
from .distill import DistillConfig, TeacherState
from .diffusion import DiffusionSchedule, Denoiser, DenoiserConfig, InpaintSample
from .metrics import GaussianStats

__version__ = "0.1.0"
