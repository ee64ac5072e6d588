"""Teacher-guided self-attention replacement.

A teacher denoiser (the base model with adapters disabled) runs in lockstep
with the student from the same initial noise. For the first ``t_cutoff``
steps the teacher's self-attention maps are captured and substituted into
the student's self-attention layers, keeping the student's own values.
After the cutoff the teacher is no longer evaluated.
"""

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .attention_math import apply_map, attention_map
from .errors import ConfigError, DimensionError, HookError, IntegrityError
from .guidance import BRANCHES, GuidanceConfig
from .scheduler import denoise_step


@dataclass(frozen=True)
class TeacherConfig:
    t_cutoff: int = 20
    enabled: bool = True

    def active_steps(self, total_steps):
        if not self.enabled:
            return 0
        if not 0 <= self.t_cutoff <= total_steps:
            raise ConfigError("teacher_cutoff", f"must be in [0, {total_steps}], got {self.t_cutoff}")
        return self.t_cutoff


class AttentionMapStore:
    """Self-attention maps of a single denoising step.

    Keys are ``(branch, layer_id)``; each value is shaped
    ``(batch, heads, query_tokens, key_tokens)``.
    """

    def __init__(self, timestep=None):
        self.timestep = timestep
        self._maps = {}

    def put(self, key, m):
        if key in self._maps:
            raise IntegrityError(f"second map for {key} within one step")
        self._maps[key] = m

    def get(self, key):
        try:
            return self._maps[key]
        except KeyError:
            raise IntegrityError(f"no stored map for {key}") from None

    def __contains__(self, key):
        return key in self._maps

    def __len__(self):
        return len(self._maps)

    def keys(self):
        return self._maps.keys()

    def items(self):
        return self._maps.items()

    def layers(self):
        return {layer for _, layer in self._maps}

    def clear(self, timestep=None):
        self._maps.clear()
        self.timestep = timestep

    @property
    def nbytes(self):
        return sum(m.nbytes for m in self._maps.values())

    def check_complete(self, layers, branches=BRANCHES):
        missing = [(b, l) for b in branches for l in layers if (b, l) not in self._maps]
        if missing:
            raise IntegrityError(f"store missing maps for {missing}")

    def entries(self):
        """Yield ``((timestep, branch, layer_id, head), map2d)`` for batch item 0."""
        for (branch, layer), m in self._maps.items():
            for head in range(m.shape[1]):
                yield (self.timestep, branch, layer, head), m[0, head]


class AttentionHooks:
    """Routing for self-attention layers during one guided prediction.

    ``inject`` supplies maps to use instead of computing them, ``capture``
    records the map each layer actually used, and ``taps`` (a dict) receives
    per-layer intermediates for inspection.
    """

    def __init__(self, capture=None, inject=None, taps=None, layers=None):
        self.capture = capture
        self.inject = inject
        self.taps = taps
        self.layers = None if layers is None else frozenset(layers)

    def for_branch(self, branch):
        return BranchHooks(self, branch)


class BranchHooks:
    def __init__(self, parent, branch):
        self.parent = parent
        self.branch = branch

    def self_attention(self, layer_id, q, k, v):
        p = self.parent
        if p.layers is not None and layer_id not in p.layers:
            raise HookError(f"unknown self-attention layer {layer_id!r}")
        key = (self.branch, layer_id)
        if p.inject is not None:
            m = p.inject.get(key)
            expected = q.shape[:-1] + (k.shape[-2],)
            if m.shape != expected:
                raise DimensionError(f"injected map {m.shape} for {key}, layer expects {expected}")
        else:
            m = attention_map(q, k)
        out = apply_map(m, v)
        if p.capture is not None:
            p.capture.put(key, m)
        if p.taps is not None:
            p.taps[key] = {"q": q, "k": k, "v": v, "map": m, "out": out}
        return out

    def cross_attention(self, layer_id, f_text, f_style, fused):
        p = self.parent
        if p.taps is not None:
            p.taps[(self.branch, layer_id)] = {"f_text": f_text, "f_style": f_style, "fused": fused}


def capture_step(teacher, z_teacher, prompt_cond, guidance, schedule):
    """Advance the teacher one step and return its self-attention maps."""
    store = AttentionMapStore(timestep=z_teacher.t)
    hooks = AttentionHooks(capture=store, layers=teacher.self_attention_layers)
    z_next = denoise_step(teacher, z_teacher, prompt_cond, guidance, schedule, hooks)
    store.check_complete(teacher.self_attention_layers)
    return z_next, store


def inject_step(student, z_student, full_cond, store, guidance, schedule, record=None):
    """Advance the student one step with every self-attention map taken from ``store``.

    Each guidance branch receives the teacher map from the matching branch.
    ``record``, if given, collects the maps the student actually used.
    """
    layers = set(student.self_attention_layers)
    unknown = store.layers() - layers
    if unknown:
        raise HookError(f"store has maps for layers the student lacks: {sorted(unknown)}")
    store.check_complete(student.self_attention_layers)
    hooks = AttentionHooks(capture=record, inject=store, layers=layers)
    return denoise_step(student, z_student, full_cond, guidance, schedule, hooks)


@dataclass
class StepRecord:
    step_index: int
    timestep: int
    student: np.ndarray  # student latent after the step
    teacher: Optional[np.ndarray]  # teacher latent after the step, None past the cutoff
    teacher_store: Optional[AttentionMapStore]
    student_store: Optional[AttentionMapStore]
    seconds: float


def run_guided(
    teacher,
    student,
    init_noise,
    conds,
    tcfg,
    schedule,
    guidance,
    teacher_guidance: Optional[GuidanceConfig] = None,
    on_step: Optional[Callable[[StepRecord], None]] = None,
    record_student_maps=False,
):
    """Full teacher/student loop; returns the student's final latent.

    The teacher sees only the text conditions and uses ``teacher_guidance``
    (defaults to ``guidance`` in text mode). Maps are held for one step at
    a time; pass ``on_step`` to observe them.
    """
    cutoff = tcfg.active_steps(len(schedule))
    if teacher_guidance is None:
        teacher_guidance = GuidanceConfig(w=guidance.w)
    teacher_cond = conds.text_only()
    z_teacher = z_student = init_noise
    for i in range(len(schedule)):
        start = time.perf_counter()
        record = AttentionMapStore(timestep=z_student.t) if record_student_maps else None
        store = None
        if i < cutoff:
            z_teacher, store = capture_step(teacher, z_teacher, teacher_cond, teacher_guidance, schedule)
            z_student = inject_step(student, z_student, conds, store, guidance, schedule, record)
        else:
            hooks = AttentionHooks(capture=record) if record is not None else None
            z_student = denoise_step(student, z_student, conds, guidance, schedule, hooks)
        if on_step is not None:
            on_step(
                StepRecord(
                    step_index=i,
                    timestep=int(schedule.timesteps[i]),
                    student=z_student.z,
                    teacher=z_teacher.z if store is not None else None,
                    teacher_store=store,
                    student_store=record,
                    seconds=time.perf_counter() - start,
                )
            )
    return z_student
