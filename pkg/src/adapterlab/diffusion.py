"""Noise schedules, samplers and guidance arithmetic.

Two schedules are provided.  The variance-preserving one uses
alpha = cos(phi), sigma = sin(phi) with phi = (t / T) * atan(sigma_max), so the
rescaled noise level sigma / alpha runs from 0 to sigma_max.  The edm-style one
has alpha = 1 and sigma = t on [0, T].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "variance-preserving"
    T: float = 1.0
    sigma_max: float = 80.0

    def __post_init__(self):
        if self.kind not in ("variance-preserving", "edm-style"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.T > 0 or not self.sigma_max > 0:
            raise ValueError("T and sigma_max must be positive")

    @classmethod
    def edm(cls, sigma_max: float = 80.0) -> "NoiseSchedule":
        return cls("edm-style", float(sigma_max), float(sigma_max))

    def _check(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.T * (1 + 1e-12)) or np.any(~np.isfinite(t)):
            raise ValueError(f"time outside [0, {self.T}]")
        return t

    def _phi(self, t):
        return self._check(t) / self.T * np.arctan(self.sigma_max)

    def alpha(self, t):
        if self.kind == "edm-style":
            return np.ones_like(self._check(t))[()]
        return np.cos(self._phi(t))[()]

    def sigma(self, t):
        if self.kind == "edm-style":
            return self._check(t)[()] * 1.0
        return np.sin(self._phi(t))[()]

    def t_from_sigma(self, sigma):
        sigma = np.asarray(sigma, dtype=np.float64)
        if self.kind == "edm-style":
            return sigma[()] * 1.0
        return (np.arcsin(sigma) / np.arctan(self.sigma_max) * self.T)[()]

    def time_grid(self, n_steps: int, t_start: float | None = None) -> np.ndarray:
        """Descending times from ``t_start`` (default T) to 0, uniform in sigma."""
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        t_start = self.T if t_start is None else float(t_start)
        s = np.linspace(float(self.sigma(t_start)), 0.0, n_steps + 1)
        grid = self.t_from_sigma(s)
        grid[0], grid[-1] = t_start, 0.0
        return grid


@dataclass(frozen=True, eq=False)
class DiffusionState:
    x: np.ndarray
    t: float
    rng_seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.x).all():
            raise ValueError("non-finite values in diffusion state")


@dataclass(frozen=True)
class GuidanceConfig:
    lambda_c: float = 1.0
    lambda_aug: float = 1.0
    zero_feedback_prob: float = 0.2

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_aug < 0:
            raise ValueError("guidance scales must be non-negative")
        if not 0.0 <= self.zero_feedback_prob <= 1.0:
            raise ValueError("zero_feedback_prob must lie in [0, 1]")


def _same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def perturb(x, t, eps, sched: NoiseSchedule):
    _same_shape(x, eps)
    return sched.alpha(t) * np.asarray(x) + sched.sigma(t) * np.asarray(eps)


def score_from_denoised(x_t, x_hat, t, sched: NoiseSchedule):
    sigma = sched.sigma(t)
    if sigma <= 0:
        raise ValueError("score is undefined at t = 0")
    return (sched.alpha(t) * np.asarray(x_hat) - np.asarray(x_t)) / sigma**2


def denoised_from_score(x_t, score, t, sched: NoiseSchedule):
    sigma = sched.sigma(t)
    if sigma <= 0:
        raise ValueError("score is undefined at t = 0")
    return (np.asarray(x_t) + sigma**2 * np.asarray(score)) / sched.alpha(t)


def ancestral_sigmas(sigma_t: float, sigma_s: float):
    """Split the target noise level into (deterministic, injected) parts."""
    up = np.sqrt(max(sigma_s**2 * (sigma_t**2 - sigma_s**2) / sigma_t**2, 0.0))
    down = np.sqrt(max(sigma_s**2 - up**2, 0.0))
    return down, up


def euler_ancestral_step(state: DiffusionState, x_hat, t_next, noise, sched: NoiseSchedule, deterministic: bool = False):
    """One step from ``state.t`` to ``t_next`` in the rescaled variable x / alpha.

    With ``deterministic`` the injected noise is dropped and the step becomes
    x_s = alpha_s x_hat + sigma_s (x_t - alpha_t x_hat) / sigma_t.
    """
    if not 0 <= t_next < state.t:
        raise ValueError("t_next must satisfy 0 <= t_next < t")
    _same_shape(state.x, x_hat)
    a_t, a_s = sched.alpha(state.t), sched.alpha(t_next)
    st = sched.sigma(state.t) / a_t
    ss = sched.sigma(t_next) / a_s
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if deterministic:
        down, up = ss, 0.0
    else:
        down, up = ancestral_sigmas(st, ss)
    y = x_hat + (down / st) * (state.x / a_t - x_hat)
    if up > 0:
        _same_shape(state.x, noise)
        y = y + up * np.asarray(noise)
    return DiffusionState(a_s * y, float(t_next), state.rng_seed)


def step_noise(seed: int, step: int, shape) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7, int(step)]))
    return rng.standard_normal(shape)


def sample(denoise: Callable, x_init, times, sched: NoiseSchedule, seed: int, deterministic: bool = False, callback=None):
    """Run the solver over ``times`` (descending, ending at 0).

    ``denoise(x_t, t, step)`` returns x_hat; ``callback(step, state, x_hat)`` is
    invoked after each denoiser call.
    """
    state = DiffusionState(np.asarray(x_init, dtype=np.float64), float(times[0]), seed)
    for i, t_next in enumerate(times[1:]):
        x_hat = denoise(state.x, state.t, i)
        if callback is not None:
            callback(i, state, x_hat)
        noise = None if deterministic else step_noise(seed, i, state.x.shape)
        state = euler_ancestral_step(state, x_hat, float(t_next), noise, sched, deterministic)
    return state


def cfg_combine(d_cond, d_uncond, lambda_c: float):
    _same_shape(d_cond, d_uncond)
    return lambda_c * np.asarray(d_cond) + (1.0 - lambda_c) * np.asarray(d_uncond)


def guided_feedback_combine(d_aug_fb, d_aug_zero, d_cond, d_uncond, g: GuidanceConfig):
    _same_shape(d_aug_fb, d_aug_zero, d_cond, d_uncond)
    bias = g.lambda_aug * (np.asarray(d_aug_fb) - np.asarray(d_aug_zero))
    return bias + cfg_combine(d_cond, d_uncond, g.lambda_c)


def mean_latent_init(x_bar, t_init, eps, sched: NoiseSchedule, seed: int = 0) -> DiffusionState:
    if not t_init > 0:
        raise ValueError("t_init must be positive")
    return DiffusionState(perturb(x_bar, t_init, eps, sched), float(t_init), seed)


def diffusion_loss(denoiser: Callable, world, n_samples: int, weighting: str = "snr", seed: int = 0, sched=None) -> float:
    """Monte-Carlo estimate of E[0.5 w_t mean((D(x_t, t) - x)^2)], t ~ U(0, T).

    ``world.sample_clean(rng)`` draws one clean view stack; ``denoiser(x_t, t)``
    returns the estimate.  Draws depend only on ``seed`` and the sample index,
    so different denoisers evaluated with the same seed share all noise.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if weighting not in ("snr", "unit"):
        raise ValueError("weighting must be 'snr' or 'unit'")
    sched = sched or NoiseSchedule()
    total = 0.0
    for i in range(n_samples):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11, i]))
        x = world.sample_clean(rng)
        t = float(rng.uniform(0.0, sched.T))
        while t == 0.0:
            t = float(rng.uniform(0.0, sched.T))
        eps = rng.standard_normal(np.shape(x))
        x_t = perturb(x, t, eps, sched)
        w = (sched.alpha(t) / sched.sigma(t)) ** 2 if weighting == "snr" else 1.0
        total += 0.5 * w * float(np.mean((denoiser(x_t, t) - x) ** 2))
    return total / n_samples
