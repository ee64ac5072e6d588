"""Checks a backend must pass before the pipeline can drive it.

Returns a list of problems instead of raising, so an adapter author sees
everything at once. An empty list means the backend conforms.
"""

import numpy as np

from .guidance import ConditioningBundle
from .teacher_sync import AttentionHooks, AttentionMapStore

REQUIRED = ("denoiser", "encode_text", "encode_style", "decode", "initial_noise", "latent_shape", "vae_scale_factor", "stateless", "describe")


def check_backend(backend, prompt="a conformance probe", timestep=501):
    problems = []
    for name in REQUIRED:
        if not hasattr(backend, name):
            problems.append(f"missing attribute {name}")
    if problems:
        return problems

    den = backend.denoiser
    layers = tuple(den.self_attention_layers)
    if not layers:
        problems.append("no self-attention layers enumerated")
    if tuple(den.self_attention_layers) != layers:
        problems.append("self-attention layer enumeration is not stable")
    if not isinstance(backend.stateless, bool):
        problems.append("stateless must be declared as a bool")

    text = backend.encode_text(prompt)
    if not np.array_equal(text, backend.encode_text(prompt)):
        problems.append("text encoder is not deterministic")
    noise = backend.initial_noise(0)
    if tuple(noise.shape) != tuple(backend.latent_shape):
        problems.append(f"initial noise shape {noise.shape} != latent_shape {backend.latent_shape}")
    if not np.array_equal(noise, backend.initial_noise(0)):
        problems.append("initial noise is not a function of the seed")

    view = den.configure()
    conds = ConditioningBundle(text, backend.encode_text(""))
    store = AttentionMapStore(timestep)
    hooks = AttentionHooks(capture=store, layers=layers).for_branch("cond")
    a = view.predict(noise, timestep, conds.text_pos, None, hooks)
    b = view.predict(noise, timestep, conds.text_pos, None, None)
    if not np.array_equal(a, b):
        problems.append("prediction differs with passive hooks installed")
    if a.shape != noise.shape:
        problems.append(f"prediction shape {a.shape} != latent shape {noise.shape}")
    if set(store.layers()) != set(layers):
        problems.append(f"hooks saw layers {sorted(store.layers())}, expected {sorted(layers)}")
    for key, m in store.items():
        if not np.allclose(m.sum(axis=-1), 1.0, atol=1e-5):
            problems.append(f"map {key} is not row-stochastic")

    image = backend.decode(noise)
    expected = (backend.latent_shape[2] * backend.vae_scale_factor, backend.latent_shape[3] * backend.vae_scale_factor, 3)
    if image.dtype != np.uint8 or image.shape != expected:
        problems.append(f"decoded image {image.dtype} {image.shape}, expected uint8 {expected}")
    return problems
