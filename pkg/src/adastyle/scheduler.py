"""Deterministic DDIM (eta = 0) schedule and the single reverse-diffusion update."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .guidance import scfg_predict

NUM_TRAIN_TIMESTEPS = 1000
BETA_START = 0.00085
BETA_END = 0.012


def training_alphas_cumprod(num_train_timesteps=NUM_TRAIN_TIMESTEPS, beta_start=BETA_START, beta_end=BETA_END):
    # "scaled linear" betas as used by Stable Diffusion
    betas = np.linspace(beta_start**0.5, beta_end**0.5, num_train_timesteps, dtype=np.float64) ** 2
    return np.cumprod(1.0 - betas)


@dataclass(frozen=True)
class LatentState:
    z: np.ndarray  # (batch, channels, height, width)
    t: int
    step_index: int


@dataclass(frozen=True)
class TimestepSchedule:
    timesteps: np.ndarray  # strictly decreasing training timesteps
    alphas: np.ndarray  # cumulative alpha at each step's timestep
    alphas_prev: np.ndarray  # cumulative alpha after the step; last entry is 1

    @classmethod
    def ddim(cls, steps, num_train_timesteps=NUM_TRAIN_TIMESTEPS):
        if steps < 1:
            raise ConfigError("steps", "must be >= 1")
        if steps > num_train_timesteps:
            raise ConfigError("steps", f"must be <= {num_train_timesteps}")
        ratio = num_train_timesteps // steps
        # "leading" spacing with offset 1 (dropped when it would overflow), highest first
        offset = 1 if (steps - 1) * ratio + 1 < num_train_timesteps else 0
        timesteps = (np.arange(steps)[::-1] * ratio + offset).astype(np.int64)
        ac = training_alphas_cumprod(num_train_timesteps)
        alphas = ac[timesteps]
        # final step lands on the clean sample
        alphas_prev = np.append(alphas[1:], 1.0)
        return cls(timesteps=timesteps, alphas=alphas, alphas_prev=alphas_prev)

    def __len__(self):
        return len(self.timesteps)

    def initial_state(self, z):
        return LatentState(z=z, t=int(self.timesteps[0]), step_index=0)

    def add_noise(self, x0, noise, step_index=0):
        a = self.alphas[step_index]
        return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * noise

    def step(self, eps, state):
        """DDIM update from ``state`` using noise prediction ``eps``."""
        if eps.shape != state.z.shape:
            raise DimensionError(f"noise prediction {eps.shape} != latent {state.z.shape}")
        i = state.step_index
        if not 0 <= i < len(self):
            raise IndexError(f"step index {i} outside schedule of length {len(self)}")
        a, a_prev = self.alphas[i], self.alphas_prev[i]
        x0 = (state.z - np.sqrt(1.0 - a) * eps) / np.sqrt(a)
        z_prev = np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps
        if not np.all(np.isfinite(z_prev)):
            raise NumericError(f"latent became non-finite at step {i}")
        nxt = i + 1
        t = int(self.timesteps[nxt]) if nxt < len(self) else 0
        return LatentState(z=z_prev, t=t, step_index=nxt)


def denoise_step(model, state, conds, guidance, schedule, hooks=None):
    """One guided prediction followed by one scheduler update."""
    eps = scfg_predict(model, state, conds, guidance, hooks)
    return schedule.step(eps, state)
