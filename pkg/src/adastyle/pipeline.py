"""Generation entry point composing fusion, style guidance and teacher replacement."""

import dataclasses
import functools
import importlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image

from .attention_math import CROSS_MODAL_ADAIN, FUSION_MODES, WEIGHTED_SUM
from .errors import ConfigError
from .guidance import STYLE_CFG, TEXT_CFG, ConditioningBundle, GuidanceConfig
from .scheduler import LatentState, TimestepSchedule, denoise_step
from .teacher_sync import TeacherConfig, run_guided
from .toy_backend import ToyBackend

log = logging.getLogger(__name__)

BACKENDS = ("toy", "external")

__all__ = [
    "GenerationConfig",
    "GenerationResult",
    "LatentState",
    "TimestepSchedule",
    "denoise_step",
    "generate",
    "load_backend",
    "prepare_conditioning",
]


@dataclass(frozen=True)
class GenerationConfig:
    """Flat generation settings; ``to_dict``/``from_dict`` use the same keys.

    Defaults follow the reference protocol: seed 42, 50 steps, guidance
    scale 5, cross-modal AdaIN fusion and teacher replacement for the first
    20 steps. ``lambda_`` is serialized as ``lambda``.
    """

    prompt: Optional[str] = None
    negative_prompt: str = ""
    style_image_path: Optional[str] = None
    negative_style_image_path: Optional[str] = None
    seed: int = 42
    steps: int = 50
    guidance_scale: float = 5.0
    lambda_: Optional[float] = None
    fusion_mode: str = CROSS_MODAL_ADAIN
    teacher_enabled: bool = True
    teacher_cutoff: int = 20
    scfg_mode: str = TEXT_CFG
    scfg_weight: Optional[float] = None
    backend: str = "toy"
    backend_seed: int = 0
    backend_factory: Optional[str] = None

    @classmethod
    def baseline(cls, **kw):
        """All three mechanisms off: weighted-sum fusion, no teacher, text CFG."""
        kw.setdefault("fusion_mode", WEIGHTED_SUM)
        kw.setdefault("teacher_enabled", False)
        kw.setdefault("scfg_mode", TEXT_CFG)
        return cls(**kw)

    @property
    def lam(self):
        return 1.0 if self.lambda_ is None else self.lambda_

    @property
    def teacher(self):
        return TeacherConfig(t_cutoff=self.teacher_cutoff, enabled=self.teacher_enabled)

    @property
    def scfg(self):
        w = self.guidance_scale - 1.0
        if self.scfg_mode == STYLE_CFG and self.scfg_weight is not None:
            w = self.scfg_weight
        return GuidanceConfig(w=w, mode=self.scfg_mode)

    @property
    def teacher_guidance(self):
        return GuidanceConfig.from_scale(self.guidance_scale)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def validate(self, warn=True):
        if not self.prompt:
            raise ConfigError("prompt", "a non-empty prompt is required")
        if self.steps < 1:
            raise ConfigError("steps", "must be >= 1")
        if not math.isfinite(self.guidance_scale):
            raise ConfigError("guidance_scale", "must be finite")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError("fusion_mode", f"must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.scfg_mode not in (TEXT_CFG, STYLE_CFG):
            raise ConfigError("scfg_mode", f"must be text_cfg or style_cfg, got {self.scfg_mode!r}")
        if self.scfg_mode == STYLE_CFG and not self.negative_style_image_path:
            raise ConfigError("negative_style_image_path", "required when scfg_mode is style_cfg")
        if self.teacher_enabled and not 0 <= self.teacher_cutoff <= self.steps:
            raise ConfigError("teacher_cutoff", f"must be in [0, steps={self.steps}], got {self.teacher_cutoff}")
        if self.backend not in BACKENDS:
            raise ConfigError("backend", f"must be one of {BACKENDS}, got {self.backend!r}")
        if self.backend == "external" and not self.backend_factory:
            raise ConfigError("backend_factory", "external backend needs a 'module:callable' factory")
        if warn and self.fusion_mode == CROSS_MODAL_ADAIN and self.lambda_ is not None:
            log.warning("lambda=%s is ignored in cross_modal_adain fusion mode", self.lambda_)
        if warn and self.scfg_mode == TEXT_CFG and self.scfg_weight is not None:
            log.warning("scfg_weight is ignored unless scfg_mode is style_cfg")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lambda_")
        return dict(sorted(d.items()))

    @classmethod
    def from_dict(cls, data, base=None):
        """Overlay ``data`` on ``base`` (or the defaults), coercing JSON types."""
        base = base or cls()
        kw = {}
        for key, value in data.items():
            name = "lambda_" if key == "lambda" else key
            if name not in _FIELD_TYPES:
                raise ConfigError(key, "unknown configuration key")
            kw[name] = _coerce(key, value, _FIELD_TYPES[name])
        return dataclasses.replace(base, **kw)


_FIELD_TYPES = {
    "prompt": (str, True),
    "negative_prompt": (str, False),
    "style_image_path": (str, True),
    "negative_style_image_path": (str, True),
    "seed": (int, False),
    "steps": (int, False),
    "guidance_scale": (float, False),
    "lambda_": (float, True),
    "fusion_mode": (str, False),
    "teacher_enabled": (bool, False),
    "teacher_cutoff": (int, False),
    "scfg_mode": (str, False),
    "scfg_weight": (float, True),
    "backend": (str, False),
    "backend_seed": (int, False),
    "backend_factory": (str, True),
}


def _coerce(key, value, kind):
    typ, nullable = kind
    if value is None:
        if nullable:
            return None
        raise ConfigError(key, "may not be null")
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise ConfigError(key, f"expected an integer, got {value!r}") from None
    if typ is float:
        if isinstance(value, bool):
            raise ConfigError(key, f"expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected a number, got {value!r}") from None
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def load_config_file(path):
    """Read a JSON config; a generation sidecar (with a ``config`` key) is accepted too."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON: {exc}") from None
    if isinstance(data, dict) and isinstance(data.get("config"), dict):
        data = data["config"]
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    return data


class BackendError(RuntimeError):
    pass


@functools.lru_cache(maxsize=8)
def _toy(seed):
    return ToyBackend(seed)


def load_backend(config):
    if config.backend == "toy":
        return _toy(config.backend_seed)
    module_name, _, attr = (config.backend_factory or "").partition(":")
    try:
        factory = getattr(importlib.import_module(module_name), attr)
        return factory(config)
    except Exception as exc:
        raise BackendError(f"could not load backend {config.backend_factory!r}: {exc}") from exc


def _read_style(backend, path, key):
    try:
        return backend.encode_style(path)
    except OSError as exc:
        raise ConfigError(key, f"cannot read image {path}: {exc}") from None


def prepare_conditioning(config, backend):
    """Encode prompt, negative prompt (empty string by default) and style images."""
    if not config.prompt:
        raise ConfigError("prompt", "a non-empty prompt is required")
    style_pos = style_neg = None
    if config.style_image_path:
        style_pos = _read_style(backend, config.style_image_path, "style_image_path")
    if config.scfg_mode == STYLE_CFG:
        if not config.negative_style_image_path:
            raise ConfigError("negative_style_image_path", "required when scfg_mode is style_cfg")
        style_neg = _read_style(backend, config.negative_style_image_path, "negative_style_image_path")
    return ConditioningBundle(
        text_pos=backend.encode_text(config.prompt),
        text_neg=backend.encode_text(config.negative_prompt or ""),
        style_pos=style_pos,
        style_neg=style_neg,
    )


@dataclass
class GenerationResult:
    image: np.ndarray  # (H, W, 3) uint8
    latent: np.ndarray
    config: GenerationConfig
    timesteps: list
    step_seconds: list
    trajectory: list = field(default_factory=list, repr=False)
    records: list = field(default_factory=list, repr=False)


def generate(config, backend=None, on_step=None, record_maps=False, keep_records=False):
    """Run one generation and decode the student's final latent.

    ``on_step`` receives each ``StepRecord``. With ``keep_records`` the
    records (including per-step attention stores when ``record_maps``) are
    also kept on the result.
    """
    config.validate()
    backend = backend or load_backend(config)
    conds = prepare_conditioning(config, backend)
    schedule = TimestepSchedule.ddim(config.steps)
    init = schedule.initial_state(backend.initial_noise(config.seed))
    student = backend.denoiser.configure(config.fusion_mode, config.lam, adapters=True)
    teacher = backend.denoiser.configure(WEIGHTED_SUM, 1.0, adapters=False)

    trajectory = [init.z]
    seconds = []
    records = []

    def step_hook(rec):
        trajectory.append(rec.student)
        seconds.append(rec.seconds)
        if keep_records:
            records.append(rec)
        if on_step is not None:
            on_step(rec)

    final = run_guided(
        teacher,
        student,
        init,
        conds,
        config.teacher,
        schedule,
        config.scfg,
        teacher_guidance=config.teacher_guidance,
        on_step=step_hook,
        record_student_maps=record_maps,
    )
    return GenerationResult(
        image=backend.decode(final.z),
        latent=final.z,
        config=config,
        timesteps=[int(t) for t in schedule.timesteps],
        step_seconds=seconds,
        trajectory=trajectory,
        records=records,
    )


def save_png(image, path):
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


class AttentionDumper:
    """Step callback writing attention stores as little-endian float32 blobs.

    Layout: ``<dir>/step_NNN/<role>__<branch>__<layer>.f32`` plus
    ``<dir>/manifest.json`` listing file, shape, step, timestep, role,
    branch and layer of every blob.
    """

    def __init__(self, directory):
        self.directory = directory
        self.entries = []
        os.makedirs(directory, exist_ok=True)

    def __call__(self, rec):
        for role, store in (("teacher", rec.teacher_store), ("student", rec.student_store)):
            if store is None:
                continue
            step_dir = f"step_{rec.step_index:03d}"
            os.makedirs(os.path.join(self.directory, step_dir), exist_ok=True)
            for (branch, layer), m in sorted(store.items()):
                rel = f"{step_dir}/{role}__{branch}__{layer}.f32"
                with open(os.path.join(self.directory, rel), "wb") as fh:
                    fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
                self.entries.append(
                    {
                        "branch": branch,
                        "dtype": "<f4",
                        "file": rel,
                        "layer": layer,
                        "role": role,
                        "shape": list(m.shape),
                        "step": rec.step_index,
                        "timestep": rec.timestep,
                    }
                )

    def close(self):
        with open(os.path.join(self.directory, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump({"entries": self.entries, "format": "raw-le-float32"}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_attention_dump(directory):
    """Load a dump written by ``AttentionDumper``: list of ``(entry, array)``."""
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    out = []
    for entry in manifest["entries"]:
        raw = np.fromfile(os.path.join(directory, entry["file"]), dtype=entry["dtype"])
        out.append((entry, raw.reshape(entry["shape"])))
    return out
