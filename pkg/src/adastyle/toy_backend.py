"""A tiny deterministic latent-diffusion stand-in.

Two resolution levels (8x8 and 4x4 tokens), each with one self-attention
layer and one dual cross-attention block (text branch + style branch),
followed by a pointwise mixing layer. Encoders are hash based and the VAE
is a fixed linear map. Every self-attention layer goes through
``attention_math`` via the hook objects, so captured and injected maps are
the real ones.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import attention_math as am
from .errors import DimensionError, HookError
from .scheduler import training_alphas_cumprod

LATENT_CHANNELS = 4
LATENT_SIZE = 8
EMBED_DIM = 16
TEXT_LEN = 8
STYLE_LEN = 4
VAE_SCALE = 4

# (tokens per side, hidden channels, heads) for each level
LEVELS = ((8, 8, 2), (4, 16, 2))
TIME_DIM = 8


def _seed_from(*parts):
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def hash_normal(shape, *key):
    """Standard-normal array that depends only on ``key``."""
    return np.random.default_rng(_seed_from(*key)).standard_normal(shape)


def _timestep_embedding(t, dim=TIME_DIM):
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


def _level_layer_ids(level):
    return f"level{level}.self", f"level{level}.cross"


def _build_weights(seed):
    w = {}

    def dense(name, fan_in, fan_out, gain=1.0):
        w[name] = hash_normal((fan_in, fan_out), "toy", seed, name) * (gain / np.sqrt(fan_in))

    c0 = LEVELS[0][1]
    dense("in", LATENT_CHANNELS, c0)
    for level, (_, c, _) in enumerate(LEVELS):
        p = f"level{level}"
        dense(f"{p}.time", TIME_DIM, c)
        for name in ("q", "k", "v", "o"):
            dense(f"{p}.self.{name}", c, c)
        dense(f"{p}.cross.q", c, c)
        dense(f"{p}.cross.o", c, c)
        for branch in ("text", "style"):
            dense(f"{p}.cross.k_{branch}", EMBED_DIM, c, gain=2.0)
            dense(f"{p}.cross.v_{branch}", EMBED_DIM, c)
        dense(f"{p}.mix1", c, 2 * c)
        dense(f"{p}.mix2", 2 * c, c)
    c1 = LEVELS[1][1]
    dense("down", c0, c1)
    dense("up", c1, c0)
    dense("out", c0, LATENT_CHANNELS)
    w["out.bias"] = hash_normal((LATENT_CHANNELS,), "toy", seed, "out.bias") * 0.1
    dense("vae.decode", LATENT_CHANNELS, 3, gain=0.8)
    w["vae.decode.bias"] = hash_normal((3,), "toy", seed, "vae.decode.bias") * 0.1
    return w


def weights_checksum(weights):
    h = hashlib.sha256()
    for name in sorted(weights):
        h.update(name.encode())
        h.update(np.ascontiguousarray(weights[name], dtype="<f8").tobytes())
    return h.hexdigest()


def _to_tokens(z):
    b, c, hh, ww = z.shape
    return z.reshape(b, c, hh * ww).transpose(0, 2, 1)


def _from_tokens(x, side):
    b, n, c = x.shape
    return x.transpose(0, 2, 1).reshape(b, c, side, side)


def _pool2(x, side):
    b, n, c = x.shape
    g = x.reshape(b, side // 2, 2, side // 2, 2, c)
    return g.mean(axis=(2, 4)).reshape(b, (side // 2) ** 2, c)


def _upsample2(x, side):
    b, n, c = x.shape
    g = x.reshape(b, side, 1, side, 1, c)
    g = np.broadcast_to(g, (b, side, 2, side, 2, c))
    return g.reshape(b, 4 * side * side, c)


@dataclass
class ToyDenoiser:
    """Noise predictor; see module docstring for the architecture."""

    weights: dict
    seed: int = 0
    alphas_cumprod: np.ndarray = field(default_factory=training_alphas_cumprod, repr=False)
    stateless = True

    @property
    def self_attention_layers(self):
        return tuple(_level_layer_ids(i)[0] for i in range(len(LEVELS)))

    @property
    def cross_attention_layers(self):
        return tuple(_level_layer_ids(i)[1] for i in range(len(LEVELS)))

    def topology(self):
        return {
            "self_attention": list(self.self_attention_layers),
            "dual_cross_attention": list(self.cross_attention_layers),
            "heads": {f"level{i}": heads for i, (_, _, heads) in enumerate(LEVELS)},
        }

    def configure(self, fusion_mode=am.WEIGHTED_SUM, lam=1.0, adapters=True):
        return DenoiserView(self, fusion_mode=fusion_mode, lam=lam, adapters=adapters)

    def _self_attention(self, level, h, hooks):
        w = self.weights
        p = f"level{level}.self"
        heads = LEVELS[level][2]
        proj = am.ProjectionSet(w[f"{p}.q"], w[f"{p}.k"], w[f"{p}.v"], heads)
        q, k, v = proj.project(h)
        if hooks is None:
            out = am.attention(q, k, v)
        else:
            out = hooks.self_attention(p, q, k, v)
        return am.merge_heads(out) @ w[f"{p}.o"]

    def _cross_attention(self, level, h, text, style, fusion_mode, lam, hooks):
        w = self.weights
        p = f"level{level}.cross"
        heads = LEVELS[level][2]
        q = am.split_heads(h @ w[f"{p}.q"], heads)

        def branch(ctx, name):
            k = am.split_heads(ctx @ w[f"{p}.k_{name}"], heads)
            v = am.split_heads(ctx @ w[f"{p}.v_{name}"], heads)
            return am.merge_heads(am.attention(q, k, v)) @ w[f"{p}.o"]

        f_text = branch(text, "text")
        f_style = None if style is None else branch(style, "style")
        fused = am.fuse(f_text, f_style, fusion_mode, lam)
        if hooks is not None:
            hooks.cross_attention(p, f_text, f_style, fused)
        return fused

    def _level(self, level, h, temb, text, style, fusion_mode, lam, hooks):
        w = self.weights
        p = f"level{level}"
        h = h + temb @ w[f"{p}.time"]
        h = h + self._self_attention(level, h, hooks)
        h = h + self._cross_attention(level, h, text, style, fusion_mode, lam, hooks)
        return h + np.tanh(h @ w[f"{p}.mix1"]) @ w[f"{p}.mix2"]

    def predict(self, z, t, text, style=None, hooks=None, fusion_mode=am.WEIGHTED_SUM, lam=1.0):
        """Noise prediction for latent ``z`` at training timestep ``t``.

        ``style=None`` removes the style branch. ``hooks`` is a per-branch
        hook object from ``teacher_sync`` or None.
        """
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 4 or z.shape[1:] != (LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE):
            raise DimensionError(f"latent must be (batch, {LATENT_CHANNELS}, {LATENT_SIZE}, {LATENT_SIZE}), got {z.shape}")
        for name, ctx in (("text", text), ("style", style)):
            if ctx is not None and (ctx.ndim != 3 or ctx.shape[0] != z.shape[0] or ctx.shape[2] != EMBED_DIM):
                raise DimensionError(f"{name} embedding must be (batch, seq, {EMBED_DIM}), got {ctx.shape}")
        w = self.weights
        temb = _timestep_embedding(float(t))
        side0 = LEVELS[0][0]
        h0 = _to_tokens(z) @ w["in"]
        h0 = self._level(0, h0, temb, text, style, fusion_mode, lam, hooks)
        h1 = _pool2(h0, side0) @ w["down"]
        h1 = self._level(1, h1, temb, text, style, fusion_mode, lam, hooks)
        u = _upsample2(h1 @ w["up"], LEVELS[1][0]) + h0
        net = _from_tokens(np.tanh(u @ w["out"] + w["out.bias"]), side0)
        # eps ~ z at high noise keeps DDIM's x0 estimate bounded
        a = self.alphas_cumprod[int(t)]
        return np.sqrt(1.0 - a) * z + 0.5 * np.sqrt(a) * net


@dataclass(frozen=True)
class DenoiserView:
    """A denoiser with fusion settings bound; ``adapters=False`` ignores style input."""

    base: ToyDenoiser
    fusion_mode: str = am.WEIGHTED_SUM
    lam: float = 1.0
    adapters: bool = True

    @property
    def self_attention_layers(self):
        return self.base.self_attention_layers

    @property
    def stateless(self):
        return self.base.stateless

    def predict(self, z, t, text, style=None, hooks=None):
        if not self.adapters:
            style = None
        return self.base.predict(z, t, text, style, hooks, self.fusion_mode, self.lam)


class ToyEncoders:
    """Hash-based text/style encoders and a fixed linear VAE."""

    def __init__(self, weights, seed=0):
        self.seed = seed
        self._decode_w = weights["vae.decode"]
        self._decode_b = weights["vae.decode.bias"]

    def _token_vector(self, token):
        return hash_normal((EMBED_DIM,), "token", self.seed, token)

    def encode_text(self, prompt):
        tokens = ["<bos>"] + prompt.lower().split()[: TEXT_LEN - 2] + ["<eos>"]
        tokens += ["<pad>"] * (TEXT_LEN - len(tokens))
        rows = [
            self._token_vector(tok) + 0.5 * hash_normal((EMBED_DIM,), "position", self.seed, i)
            for i, tok in enumerate(tokens)
        ]
        return np.stack(rows)[None]

    def encode_style_bytes(self, data):
        digest = hashlib.sha256(data).hexdigest()
        return hash_normal((1, STYLE_LEN, EMBED_DIM), "style", self.seed, digest)

    def encode_style(self, path):
        with open(path, "rb") as fh:
            return self.encode_style_bytes(fh.read())

    def decode(self, z):
        """Latent ``(1, 4, 8, 8)`` to 8-bit RGB ``(32, 32, 3)``."""
        x = np.repeat(np.repeat(z[0], VAE_SCALE, axis=1), VAE_SCALE, axis=2)
        rgb = np.einsum("chw,cd->hwd", x, self._decode_w) + self._decode_b
        return np.clip(np.rint((rgb * 0.2 + 0.5) * 255.0), 0, 255).astype(np.uint8)


class ToyBackend:
    """Bundles the denoiser and encoders behind the backend interface."""

    name = "toy"
    stateless = True
    latent_shape = (1, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE)
    vae_scale_factor = VAE_SCALE

    def __init__(self, seed=0):
        self.seed = seed
        weights = _build_weights(seed)
        self.denoiser = ToyDenoiser(weights, seed=seed)
        self.encoders = ToyEncoders(weights, seed=seed)

    @property
    def weights(self):
        return self.denoiser.weights

    def checksum(self):
        return weights_checksum(self.weights)

    def topology(self):
        return self.denoiser.topology()

    def encode_text(self, prompt):
        return self.encoders.encode_text(prompt)

    def encode_style(self, path):
        return self.encoders.encode_style(path)

    def decode(self, z):
        return self.encoders.decode(z)

    def initial_noise(self, seed):
        return np.random.default_rng(seed).standard_normal(self.latent_shape)

    def describe(self):
        return {"name": self.name, "build_seed": self.seed}


def build_toy(seed=0):
    """Return ``(ToyDenoiser, ToyEncoders)`` whose weights depend only on ``seed``."""
    backend = ToyBackend(seed)
    return backend.denoiser, backend.encoders


def toy_predict(denoiser, z, conds, hooks=None, fusion_mode=am.WEIGHTED_SUM, lam=1.0):
    """Single positive-branch prediction for a ``LatentState`` and ``ConditioningBundle``."""
    known = set(denoiser.self_attention_layers)
    if hooks is not None and hooks.layers is not None and not hooks.layers <= known:
        raise HookError(f"hooks name unknown layers {sorted(hooks.layers - known)}")
    branch = None if hooks is None else hooks.for_branch("cond")
    return denoiser.predict(z.z, z.t, conds.text_pos, conds.style_pos, branch, fusion_mode, lam)
