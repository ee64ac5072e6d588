"""Classifier-free guidance: text CFG and style-based CFG with a negative style image."""

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError

TEXT_CFG = "text_cfg"
STYLE_CFG = "style_cfg"
GUIDANCE_MODES = (TEXT_CFG, STYLE_CFG)

COND = "cond"
NEG = "neg"
BRANCHES = (COND, NEG)


@dataclass(frozen=True)
class ConditioningBundle:
    """Encoded positive/negative text and style conditions, each ``(batch, seq, dim)``."""

    text_pos: np.ndarray
    text_neg: np.ndarray
    style_pos: Optional[np.ndarray] = None
    style_neg: Optional[np.ndarray] = None

    def branch(self, name):
        if name == COND:
            return self.text_pos, self.style_pos
        if name == NEG:
            return self.text_neg, self.style_neg
        raise KeyError(name)

    def text_only(self):
        return ConditioningBundle(self.text_pos, self.text_neg)


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance weight ``w`` in the ``(1 + w) * cond - w * neg`` convention."""

    w: float = 4.0
    mode: str = TEXT_CFG

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ConfigError("scfg_mode", f"must be one of {GUIDANCE_MODES}, got {self.mode!r}")
        if self.w < 0:
            warnings.warn(f"negative guidance weight w={self.w}", stacklevel=2)

    @classmethod
    def from_scale(cls, scale, mode=TEXT_CFG):
        """Build from the common ``neg + s * (cond - neg)`` scale, i.e. ``w = s - 1``."""
        return cls(w=scale - 1.0, mode=mode)


def cfg_combine(eps_cond, eps_neg, w):
    """``(1 + w) * eps_cond - w * eps_neg``.

    Evaluated as ``eps_cond + w * (eps_cond - eps_neg)`` so that equal
    branches and ``w = 0`` return ``eps_cond`` bit-exactly.
    """
    if np.shape(eps_cond) != np.shape(eps_neg):
        raise DimensionError(f"{np.shape(eps_cond)} != {np.shape(eps_neg)}")
    return eps_cond + w * (eps_cond - eps_neg)


def _branch_hooks(hooks, name):
    return None if hooks is None else hooks.for_branch(name)


def scfg_predict(model, z, bundle, cfg, hooks=None):
    """Guided noise prediction from a positive and a negative denoiser branch.

    The positive branch sees ``(text_pos, style_pos)``, the negative branch
    ``(text_neg, style_neg)``; both share the latent and timestep. In
    ``text_cfg`` mode the negative style is normally absent, which drops the
    style branch from the negative prediction. ``hooks`` is an
    ``AttentionHooks`` (or None) and is bound per branch.
    """
    if cfg.mode == STYLE_CFG and bundle.style_neg is None:
        raise ConfigError("negative_style_image_path", "style_cfg mode needs a negative style condition")
    text, style = bundle.branch(COND)
    eps_cond = model.predict(z.z, z.t, text, style, _branch_hooks(hooks, COND))
    text, style = bundle.branch(NEG)
    eps_neg = model.predict(z.z, z.t, text, style, _branch_hooks(hooks, NEG))
    return cfg_combine(eps_cond, eps_neg, cfg.w)
