import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cinelora.diffusion import (NoiseSchedule, cfg_combine, ddpm_reverse_step, forward_noise_closed,
                                forward_noise_step, predict_x0)


def test_alpha_bar_is_the_running_product():
    s = NoiseSchedule.linear(100)
    for t in (0, 1, 17, 99):
        assert s.alphas_cumprod[t] == math.prod(1.0 - b for b in s.betas[:t + 1])


def test_default_schedule_ends_near_pure_noise():
    s = NoiseSchedule.linear(100)
    assert s.betas[0] == pytest.approx(1e-3) and s.betas[-1] == pytest.approx(0.2)
    assert s.alphas_cumprod[-1] < 1e-4


def test_explicit_endpoints_are_honoured():
    s = NoiseSchedule.linear(1000, 1e-4, 0.02)
    assert s.betas[0] == 1e-4 and s.betas[-1] == pytest.approx(0.02)


def test_closed_form_examples():
    s = NoiseSchedule.from_betas([0.36])
    x = forward_noise_closed(np.array([1.0]), 0, np.array([0.0]), s)
    assert x[0] == pytest.approx(0.8)
    s2 = NoiseSchedule.from_betas([0.0, 0.0])
    assert forward_noise_closed(np.array([2.0]), 1, np.array([5.0]), s2)[0] == 2.0


def test_single_step_chain_equals_closed_form_for_t0():
    s = NoiseSchedule.linear(10)
    x0, eps = np.array([0.3, -1.2]), np.array([0.7, 0.1])
    assert np.allclose(forward_noise_step(x0, 0, eps, s), forward_noise_closed(x0, 0, eps, s))


def test_reverse_step_inverts_exact_noise_at_t0():
    s = NoiseSchedule.linear(100)
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal(8), rng.standard_normal(8)
    x1 = forward_noise_closed(x0, 0, eps, s)
    assert np.allclose(ddpm_reverse_step(x1, eps, 0, s, noise=rng.standard_normal(8)), x0)
    assert np.allclose(predict_x0(x1, eps, 0, s), x0)


def test_reverse_step_mean_formula():
    s = NoiseSchedule.from_betas([0.1, 0.2, 0.3])
    x, e, z = np.array([1.0]), np.array([0.5]), np.array([2.0])
    a = (1 - 0.1) * (1 - 0.2) * (1 - 0.3)
    mean = (1.0 - 0.3 / math.sqrt(1 - a) * 0.5) / math.sqrt(0.7)
    assert ddpm_reverse_step(x, e, 2, s, z)[0] == pytest.approx(mean + math.sqrt(0.3) * 2.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 100))
def test_respacing_keeps_alpha_bar_at_kept_steps(steps):
    s = NoiseSchedule.linear(100)
    r = s.respace(steps)
    assert r.T_diff == len(r.timesteps) == steps
    assert r.timesteps[-1] == 99
    assert steps == 1 or r.timesteps[0] == 0
    assert np.allclose(r.alphas_cumprod, s.alphas_cumprod[r.timesteps], rtol=1e-12)
    assert np.all(np.diff(r.timesteps) > 0)


def test_thirty_step_respacing_is_evenly_strided():
    r = NoiseSchedule.linear(100).respace(30)
    assert r.T_diff == 30
    assert set(np.diff(r.timesteps)) <= {3, 4}


def test_cfg_combine_examples():
    c, u = np.array([1.0, 2.0]), np.array([0.5, 0.5])
    assert np.array_equal(cfg_combine(c, u, 0.0), u)
    assert np.array_equal(cfg_combine(c, u, 1.0), c)
    assert np.allclose(cfg_combine(c, u, 3.8), u + 3.8 * (c - u))
    with pytest.raises(ValueError):
        cfg_combine(c, u, -0.1)


@pytest.mark.parametrize("fn", [forward_noise_closed, forward_noise_step])
def test_shape_and_range_errors(fn):
    s = NoiseSchedule.linear(10)
    with pytest.raises(ValueError):
        fn(np.zeros(3), 0, np.zeros(4), s)
    with pytest.raises(ValueError):
        fn(np.zeros(3), 10, np.zeros(3), s)


def test_invalid_betas_rejected():
    with pytest.raises(ValueError):
        NoiseSchedule.from_betas([0.5, 1.0])
    with pytest.raises(ValueError):
        NoiseSchedule.from_betas([])
