import warnings

import numpy as np
import pytest

from kgdiff.diffusion import (
    GenerationError, build_schedule, generate, posterior_mean, predict_x0, q_sample, reverse_step,
)


@pytest.fixture(scope="module")
def sched():
    return build_schedule(40)


def small():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_schedule(2, 0.1, 0.2)


def test_two_step_schedule_by_hand():
    with pytest.warns(UserWarning, match="does not reach noise"):
        s = build_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alphas[1:], [0.9, 0.8])
    np.testing.assert_allclose(s.alpha_bars[1:], [0.9, 0.72])
    assert s.K == 2 and s.alpha_bars[0] == 1.0


def test_default_schedule_reaches_noise(sched):
    assert sched.K == 40
    assert sched.alpha_bars[40] < 0.05
    assert np.all(np.diff(sched.betas[1:]) >= 0) and np.all(np.diff(sched.alpha_bars) < 0)


def test_posterior_sigmas(sched):
    assert sched.sigmas[1] == 0.0
    k = np.arange(2, 41)
    expect = sched.betas[k] * (1 - sched.alpha_bars[k - 1]) / (1 - sched.alpha_bars[k])
    np.testing.assert_allclose(sched.sigmas[k] ** 2, expect, rtol=1e-14)


@pytest.mark.parametrize("args", [(1, 1e-4, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0)])
def test_schedule_bounds_are_rejected(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_schedule_arrays_are_read_only(sched):
    with pytest.raises(ValueError):
        sched.betas[1] = 0.5


def test_q_sample_worked_example():
    # alpha_bar_2 = 0.72 on the two-step schedule
    out = q_sample(small(), np.array([1.0, 0.0]), 2, np.zeros(2))
    np.testing.assert_allclose(out, [0.848528137423857, 0.0], rtol=1e-12)


def test_q_sample_limits(sched):
    x0, eps = np.array([0.3, -1.2]), np.array([0.7, 0.1])
    np.testing.assert_array_equal(q_sample(sched, x0, 0, eps), x0)
    np.testing.assert_allclose(q_sample(sched, np.zeros(2), 17, eps), np.sqrt(1 - sched.alpha_bars[17]) * eps)


def test_predict_x0_degenerate_and_amplifying_cases(sched):
    x = np.array([1.0, -2.0])
    np.testing.assert_allclose(predict_x0(sched, x, np.zeros(2), 9), x / np.sqrt(sched.alpha_bars[9]))
    gain = np.abs(predict_x0(sched, x, np.zeros(2), 40)) / np.abs(x)
    assert np.all(gain > 8)  # 1/sqrt(alpha_bar_K) with alpha_bar_K near 0.0135


def test_per_row_steps_broadcast(sched):
    rng = np.random.default_rng(0)
    x0, eps, k = rng.standard_normal((5, 3)), rng.standard_normal((5, 3)), np.array([1, 5, 9, 20, 40])
    rows = np.stack([q_sample(sched, x0[i], k[i], eps[i]) for i in range(5)])
    np.testing.assert_array_equal(q_sample(sched, x0, k, eps), rows)


def test_final_step_is_deterministic_and_equals_the_mean(sched):
    x, e = np.array([0.5, -0.2]), np.array([0.1, 0.3])
    a = reverse_step(sched, x, e, 1, np.random.default_rng(0))
    b = reverse_step(sched, x, e, 1, np.random.default_rng(99))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, posterior_mean(sched, x, e, 1))


def test_noiseless_step_recovers_the_pre_noise_point(sched):
    # at k = 1, 1 - alpha_bar_1 = beta_1, so the mean inverts one noising step exactly
    x0, eps = np.array([0.4, -1.0, 2.0]), np.array([0.3, 0.9, -0.5])
    x1 = np.sqrt(sched.alphas[1]) * x0 + np.sqrt(sched.betas[1]) * eps
    np.testing.assert_allclose(reverse_step(sched, x1, eps, 1, None, sigma=0.0), x0, atol=1e-14)
    # elsewhere, check the forced-zero-noise step against the mean written out by hand
    k, x = 12, np.array([0.2, -0.7, 1.1])
    b = 1e-4 + 11 * (0.2 - 1e-4) / 39
    ab = np.prod(1 - np.linspace(1e-4, 0.2, 40)[:12])
    a = 1 - b
    hand = (x - b / np.sqrt(1 - ab) * eps) / np.sqrt(a)
    np.testing.assert_allclose(reverse_step(sched, x, eps, k, None, sigma=0.0), hand, rtol=1e-12)


def test_reverse_step_is_reproducible_under_seed(sched):
    x, e = np.ones(4), np.zeros(4)
    a = reverse_step(sched, x, e, 10, np.random.default_rng(3))
    b = reverse_step(sched, x, e, 10, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        reverse_step(sched, x, e, 0, np.random.default_rng(3))


def zero_denoiser(x, k, cond):
    return np.zeros_like(x)


def test_generate_is_seed_deterministic(sched):
    cond = np.ones((2, 3))
    a = generate(sched, zero_denoiser, cond, 7, chains=1, rng=np.random.default_rng(5))
    b = generate(sched, zero_denoiser, cond, 7, chains=1, rng=np.random.default_rng(5))
    assert a.shape == (2, 7) and a.tobytes() == b.tobytes()


def test_zero_denoiser_output_is_centred(sched):
    draws = np.stack([generate(sched, zero_denoiser, np.zeros((1, 2)), 4, chains=1,
                               rng=np.random.default_rng(s))[0] for s in range(1000)])
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0)) < 3 * se)


def test_chain_average_and_trace(sched):
    trace = []
    out = generate(sched, zero_denoiser, np.zeros((3, 2)), 5, chains=4, rng=np.random.default_rng(0), trace=trace)
    assert [k for k, _ in trace] == list(range(40, -1, -1))
    np.testing.assert_array_equal(trace[-1][1], out)
    with pytest.raises(ValueError):
        generate(sched, zero_denoiser, np.zeros((1, 2)), 5, chains=0)


def test_non_finite_latent_aborts_with_the_step(sched):
    def broken(x, k, cond):
        return np.full_like(x, np.inf) if k == 31 else np.zeros_like(x)

    with np.errstate(invalid="ignore"), pytest.raises(GenerationError, match="step 31"):
        generate(sched, broken, np.zeros((1, 2)), 3, rng=np.random.default_rng(0))
