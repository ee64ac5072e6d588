import numpy as np
import pytest

from adastyle.errors import ConfigError, DimensionError
from adastyle.guidance import ConditioningBundle, GuidanceConfig
from adastyle.scheduler import TimestepSchedule, denoise_step, training_alphas_cumprod


class TrueNoise:
    self_attention_layers = ()

    def __init__(self, eps):
        self.eps = eps

    def predict(self, z, t, text, style=None, hooks=None):
        return self.eps


@pytest.mark.parametrize("steps", [1, 10, 50, 1000])
def test_schedule_strictly_decreasing(steps):
    s = TimestepSchedule.ddim(steps)
    assert len(s) == steps
    assert np.all(np.diff(s.timesteps) < 0)
    assert s.alphas_prev[-1] == 1.0
    assert np.all(np.diff(s.alphas) > 0)


def test_schedule_bounds():
    with pytest.raises(ConfigError):
        TimestepSchedule.ddim(0)
    with pytest.raises(ConfigError):
        TimestepSchedule.ddim(1001)


def test_alphas_monotone():
    ac = training_alphas_cumprod()
    assert ac.shape == (1000,) and np.all(np.diff(ac) < 0) and 0 < ac[-1] < ac[0] < 1


@pytest.mark.parametrize("steps", [1, 10, 50])
def test_true_noise_reconstructs_clean_latent(rng, steps):
    x0 = rng.normal(size=(1, 4, 8, 8))
    eps = rng.normal(size=x0.shape)
    schedule = TimestepSchedule.ddim(steps)
    state = schedule.initial_state(schedule.add_noise(x0, eps))
    model = TrueNoise(eps)
    conds = ConditioningBundle(np.zeros((1, 8, 16)), np.zeros((1, 8, 16)))
    for _ in range(steps):
        state = denoise_step(model, state, conds, GuidanceConfig(w=4.0), schedule)
    assert state.step_index == steps and state.t == 0
    np.testing.assert_allclose(state.z, x0, atol=1e-4)


def test_step_is_ddim_formula(rng):
    s = TimestepSchedule.ddim(10)
    z = rng.normal(size=(1, 4, 8, 8))
    eps = rng.normal(size=z.shape)
    out = s.step(eps, s.initial_state(z))
    a, ap = s.alphas[0], s.alphas_prev[0]
    x0 = (z - np.sqrt(1 - a) * eps) / np.sqrt(a)
    np.testing.assert_allclose(out.z, np.sqrt(ap) * x0 + np.sqrt(1 - ap) * eps, atol=1e-12)
    assert out.t == s.timesteps[1] and out.step_index == 1


def test_step_shape_and_range(rng):
    s = TimestepSchedule.ddim(2)
    state = s.initial_state(rng.normal(size=(1, 4, 8, 8)))
    with pytest.raises(DimensionError):
        s.step(np.zeros((1, 4, 4, 4)), state)
    done = s.step(np.zeros((1, 4, 8, 8)), s.step(np.zeros((1, 4, 8, 8)), state))
    with pytest.raises(IndexError):
        s.step(np.zeros((1, 4, 8, 8)), done)
