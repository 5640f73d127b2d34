"""Noise schedule, forward noising, x0 reconstruction and ancestral sampling.

Schedule arrays are indexed by step ``k`` in ``0..K``; slot 0 holds the
conventions beta_0 = 0, alpha_bar_0 = 1, sigma_0 = 0.  Functions accept
numpy arrays or autodiff tensors for the noise estimate, and ``k`` may be a
scalar or one step per row.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("linear",)


class GenerationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def K(self):
        return len(self.betas) - 1

    def _col(self, arr, k, ndim):
        v = arr[np.asarray(k)]
        if np.ndim(v) and ndim > 1:
            v = v.reshape(-1, *([1] * (ndim - 1)))
        return v


def build_schedule(K, beta_start=1e-4, beta_end=0.2, kind="linear"):
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if K < 2:
        raise ValueError(f"K must be at least 2, got {K}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, K)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = np.zeros(K + 1)
    k = np.arange(2, K + 1)
    sigmas[k] = np.sqrt(betas[k] * (1.0 - alpha_bars[k - 1]) / (1.0 - alpha_bars[k]))
    if not np.all(np.diff(alpha_bars[1:]) < 0):
        raise ValueError("alpha_bar is not strictly decreasing")
    if alpha_bars[K] >= 0.05:
        warnings.warn(f"alpha_bar_K = {alpha_bars[K]:.3f}: the forward process does not reach noise",
                      stacklevel=2)
    for arr in (betas, alphas, alpha_bars, sigmas):
        arr.setflags(write=False)
    return NoiseSchedule(betas, alphas, alpha_bars, sigmas)


def q_sample(schedule, x0, k, eps):
    ab = schedule._col(schedule.alpha_bars, k, np.ndim(x0))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(schedule, x_k, eps_hat, k):
    ab = schedule._col(schedule.alpha_bars, k, np.ndim(x_k))
    return x_k * (1.0 / np.sqrt(ab)) - eps_hat * np.sqrt(1.0 / ab - 1.0)


def posterior_mean(schedule, x_k, eps_hat, k):
    nd = np.ndim(x_k)
    beta = schedule._col(schedule.betas, k, nd)
    alpha = schedule._col(schedule.alphas, k, nd)
    ab = schedule._col(schedule.alpha_bars, k, nd)
    return (x_k - eps_hat * (beta / np.sqrt(1.0 - ab))) / np.sqrt(alpha)


def reverse_step(schedule, x_k, eps_hat, k, rng, sigma=None):
    """One ancestral step; ``sigma`` overrides the schedule's value (tests)."""
    if not 1 <= k <= schedule.K:
        raise ValueError(f"step {k} outside [1, {schedule.K}]")
    mean = posterior_mean(schedule, x_k, eps_hat, k)
    s = schedule.sigmas[k] if sigma is None else sigma
    if s == 0:
        return mean
    return mean + s * rng.standard_normal(np.shape(x_k))


def generate(schedule, denoiser, cond, n_entities, chains=4, rng=None, trace=None):
    """Run ``chains`` reverse chains per condition row and average their x0.

    ``denoiser(x_k, k, cond)`` returns the noise estimate as an array.  When
    ``trace`` is a list it receives ``(k, x0_estimate)`` for k = K..1 and
    ``(0, x0)`` at the end, where estimates are chain means.
    """
    if chains < 1:
        raise ValueError("chains must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    b = cond.shape[0]
    cond_rep = np.repeat(cond, chains, axis=0)
    x = rng.standard_normal((b * chains, n_entities))
    for k in range(schedule.K, 0, -1):
        eps_hat = np.asarray(denoiser(x, k, cond_rep))
        if trace is not None:
            est = predict_x0(schedule, x, eps_hat, k)
            trace.append((k, est.reshape(b, chains, -1).mean(axis=1)))
        x = reverse_step(schedule, x, eps_hat, k, rng)
        if not np.all(np.isfinite(x)):
            raise GenerationError(f"non-finite latent after reverse step {k}")
    out = x.reshape(b, chains, n_entities).mean(axis=1)
    if trace is not None:
        trace.append((0, out))
    return out
