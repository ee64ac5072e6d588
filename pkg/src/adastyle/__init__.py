"""Training-free inference hooks for text-driven style transfer in latent diffusion.

Cross-modal AdaIN fusion, style-based classifier-free guidance and
teacher-guided self-attention replacement, with a small deterministic toy
backend for exact testing.
"""

__version__ = "0.1.0"

from .attention_math import adain, attention, channel_statistics, cross_modal_adain_fusion, weighted_sum_fusion
from .guidance import ConditioningBundle, GuidanceConfig, cfg_combine, scfg_predict
from .pipeline import GenerationConfig, generate
from .teacher_sync import AttentionMapStore, TeacherConfig, run_guided
from .toy_backend import ToyBackend, build_toy
