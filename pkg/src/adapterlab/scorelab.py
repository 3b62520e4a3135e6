"""Exact 1D mixture scores, product densities and score-averaged sampling.

Everything here is closed form: a Gaussian mixture convolved with the
perturbation kernel is again a Gaussian mixture, and so is the product of two
mixtures.  That makes it possible to compare sampling with the true product
score against sampling with the average of the two conditional scores.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp, ndtr

from .diffusion import DiffusionState, NoiseSchedule, denoised_from_score, euler_ancestral_step, step_noise

HIST_RANGE = (-4.0, 4.0)
HIST_BINS = 128


@dataclass(frozen=True, eq=False)
class GaussianMixture1D:
    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.means, dtype=np.float64))
        sd = np.atleast_1d(np.asarray(self.stds, dtype=np.float64))
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        if not (mu.shape == sd.shape == w.shape) or mu.ndim != 1 or len(mu) == 0:
            raise ValueError("means, stds and weights must be equal-length 1D arrays")
        if (sd <= 0).any() or not np.isfinite(sd).all():
            raise ValueError("stds must be positive")
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector")
        for name, v in (("means", mu), ("stds", sd), ("weights", w)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def __len__(self):
        return len(self.means)

    def _log_parts(self, x):
        x = np.asarray(x, dtype=np.float64)[..., None]
        var = self.stds**2
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw - 0.5 * (x - self.means) ** 2 / var - 0.5 * np.log(2 * np.pi * var)

    def log_density(self, x):
        return logsumexp(self._log_parts(x), axis=-1)

    def density(self, x):
        return np.exp(self.log_density(x))

    def score(self, x):
        """d/dx log p(x), using responsibilities computed in log space."""
        lp = self._log_parts(x)
        r = np.exp(lp - logsumexp(lp, axis=-1, keepdims=True))
        x = np.asarray(x, dtype=np.float64)[..., None]
        return (r * (self.means - x) / self.stds**2).sum(axis=-1)

    def mean(self) -> float:
        return float(self.weights @ self.means)

    def variance(self) -> float:
        m = self.mean()
        return float(self.weights @ (self.stds**2 + (self.means - m) ** 2))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(len(self), size=n, p=self.weights)
        return self.means[k] + self.stds[k] * rng.standard_normal(n)


def perturbed_mixture_1d(m: GaussianMixture1D, t, sched: NoiseSchedule) -> GaussianMixture1D:
    """The law of alpha_t x + sigma_t eps for x ~ m."""
    a, s = float(sched.alpha(t)), float(sched.sigma(t))
    return GaussianMixture1D(a * m.means, np.sqrt(a**2 * m.stds**2 + s**2), m.weights)


def perturbed_score_1d(m: GaussianMixture1D, x, t, sched: NoiseSchedule):
    if t < 0:
        raise ValueError("t must be non-negative")
    return perturbed_mixture_1d(m, t, sched).score(x)


def product_mixture_1d(m1: GaussianMixture1D, m2: GaussianMixture1D) -> GaussianMixture1D:
    """Normalized p1 * p2 as a mixture over component pairs."""
    mu1, mu2 = m1.means[:, None], m2.means[None, :]
    v1, v2 = m1.stds[:, None] ** 2, m2.stds[None, :] ** 2
    var = v1 * v2 / (v1 + v2)
    mu = var * (mu1 / v1 + mu2 / v2)
    with np.errstate(divide="ignore"):
        logw = np.log(m1.weights)[:, None] + np.log(m2.weights)[None, :]
    logw = logw - 0.5 * (mu1 - mu2) ** 2 / (v1 + v2) - 0.5 * np.log(2 * np.pi * (v1 + v2))
    w = np.exp(logw - logsumexp(logw))
    return GaussianMixture1D(mu.ravel(), np.sqrt(var).ravel(), w.ravel())


def product_score_fn(m1: GaussianMixture1D, m2: GaussianMixture1D, sched: NoiseSchedule) -> Callable:
    """Score of the perturbed product distribution."""
    prod = product_mixture_1d(m1, m2)
    return lambda x, t: perturbed_score_1d(prod, x, t, sched)


def averaged_score_fn(m1: GaussianMixture1D, m2: GaussianMixture1D, sched: NoiseSchedule) -> Callable:
    """Half the sum of the two perturbed conditional scores."""
    return lambda x, t: 0.5 * perturbed_score_1d(m1, x, t, sched) + 0.5 * perturbed_score_1d(m2, x, t, sched)


def sample_with_score(
    score_fn: Callable,
    sched: NoiseSchedule,
    n_steps: int,
    n_samples: int,
    seed: int,
    deterministic: bool = True,
) -> np.ndarray:
    """Reverse diffusion driven by ``score_fn(x, t)`` from pure noise to t = 0.

    Each sample's starting noise comes from its own seed sequence, so the
    result does not depend on how samples are batched.
    """
    if n_steps <= 0 or n_samples <= 0:
        raise ValueError("n_steps and n_samples must be positive")
    times = sched.time_grid(n_steps)
    x0 = initial_noise(seed, n_samples) * float(sched.sigma(times[0]))
    state = DiffusionState(x0, float(times[0]), seed)
    for i, t_next in enumerate(times[1:]):
        x_hat = denoised_from_score(state.x, score_fn(state.x, state.t), state.t, sched)
        noise = None if deterministic else step_noise(seed, i, state.x.shape)
        state = euler_ancestral_step(state, x_hat, float(t_next), noise, sched, deterministic)
    return state.x


def initial_noise(seed: int, n: int) -> np.ndarray:
    return np.array([np.random.default_rng([int(seed), 3, i]).standard_normal() for i in range(n)])


def sample_product(
    m1: GaussianMixture1D,
    m2: GaussianMixture1D,
    mode: str,
    n_samples: int = 10_000,
    n_steps: int = 30,
    seed: int = 0,
    sched: NoiseSchedule | None = None,
    deterministic: bool = True,
) -> np.ndarray:
    sched = sched or NoiseSchedule()
    if mode == "exact_product":
        fn = product_score_fn(m1, m2, sched)
    elif mode == "averaged":
        fn = averaged_score_fn(m1, m2, sched)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return sample_with_score(fn, sched, n_steps, n_samples, seed, deterministic)


def histogram_kl(samples, target: GaussianMixture1D, bins: int = HIST_BINS, lo: float = HIST_RANGE[0], hi: float = HIST_RANGE[1]) -> float:
    """KL(sample histogram || target binned), both add-one smoothed per bin.

    The target's bin masses are turned into pseudo-counts at the sample size
    before smoothing so the two histograms are treated alike.
    """
    samples = np.asarray(samples, dtype=np.float64)
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(samples, bins=edges)
    cdf = _mixture_cdf(target, edges)
    expected = np.diff(cdf) * len(samples)
    p = (counts + 1.0) / (counts.sum() + bins)
    q = (expected + 1.0) / (expected.sum() + bins)
    return float(np.sum(p * np.log(p / q)))


def _mixture_cdf(m: GaussianMixture1D, x):
    x = np.asarray(x, dtype=np.float64)[..., None]
    return (m.weights * ndtr((x - m.means) / m.stds)).sum(axis=-1)


def central_mass(samples, half_width: float = 0.25) -> float:
    return float(np.mean(np.abs(np.asarray(samples)) <= half_width))


def density_table(exact, averaged, product: GaussianMixture1D, bins: int = HIST_BINS):
    """Rows of (x, p_exact, p_averaged_hist, p_product) at bin centers."""
    edges = np.linspace(*HIST_RANGE, bins + 1)
    width = edges[1] - edges[0]
    centers = 0.5 * (edges[:-1] + edges[1:])
    h_exact, _ = np.histogram(exact, bins=edges)
    h_avg, _ = np.histogram(averaged, bins=edges)
    return np.column_stack([
        centers,
        h_exact / (len(exact) * width),
        h_avg / (len(averaged) * width),
        product.density(centers),
    ])


def write_density_csv(path, table) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(["x", "p_exact", "p_averaged_hist", "p_product"])
        for row in table:
            out.writerow([f"{v:.10g}" for v in row])


def bimodal_preset():
    """Both conditionals equal to the two-mode mixture at +-1 with std 0.3.

    The product keeps the modes but narrows them by sqrt(2); averaging the
    two equal scores just reproduces one conditional, with wider modes and
    more mass between them.
    """
    m = GaussianMixture1D([-1.0, 1.0], [0.3, 0.3], [0.5, 0.5])
    return m, m


def mirrored_preset():
    """Conditionals favouring opposite modes; the product is still symmetric.

    At high noise the two scores point in opposite directions, so their
    average pulls samples toward the origin.
    """
    m1 = GaussianMixture1D([-1.0, 1.0], [0.3, 0.3], [0.8, 0.2])
    m2 = GaussianMixture1D([-1.0, 1.0], [0.3, 0.3], [0.2, 0.8])
    return m1, m2


def degenerate_preset():
    """Both conditionals a near point mass at 0 (std 0.01).

    Product and conditionals differ only below the histogram resolution, so
    both sampling modes give the same histogram.
    """
    m = GaussianMixture1D([0.0], [0.01], [1.0])
    return m, m


PRESETS = {"bimodal": bimodal_preset, "mirrored": mirrored_preset, "degenerate": degenerate_preset}


@dataclass
class ScoreLabReport:
    kl_exact: float
    kl_averaged: float
    central_exact: float
    central_averaged: float
    table: np.ndarray

    @property
    def kl_ratio(self) -> float:
        return self.kl_averaged / max(self.kl_exact, 1e-300)

    def summary(self) -> dict:
        return {
            "kl_exact": self.kl_exact,
            "kl_averaged": self.kl_averaged,
            "kl_ratio": self.kl_ratio,
            "central_mass_exact": self.central_exact,
            "central_mass_averaged": self.central_averaged,
        }


def run_scorelab(preset: str = "bimodal", n_samples: int = 10_000, n_steps: int = 30, seed: int = 0, deterministic: bool = True) -> ScoreLabReport:
    m1, m2 = PRESETS[preset]()
    prod = product_mixture_1d(m1, m2)
    exact = sample_product(m1, m2, "exact_product", n_samples, n_steps, seed, deterministic=deterministic)
    avg = sample_product(m1, m2, "averaged", n_samples, n_steps, seed, deterministic=deterministic)
    return ScoreLabReport(
        histogram_kl(exact, prod),
        histogram_kl(avg, prod),
        central_mass(exact),
        central_mass(avg),
        density_table(exact, avg, prod),
    )


def _check_sync_matrix(sync_matrix):
    s = np.asarray(sync_matrix, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"sync matrix must be square, got shape {s.shape}")
    return s


def _apply(s, x):
    # mixes the leading (view) axis
    return np.tensordot(s, x, axes=(1, 0))


def sync_trajectories(
    sync_matrix,
    denoise: Callable,
    x_init,
    times: Sequence[float],
    sched: NoiseSchedule,
):
    """Run input sync and output-plus-init sync side by side.

    Path (a) feeds ``S x_t`` to the denoiser but steps from the unsynced
    state.  Path (b) starts from ``S x_init`` and replaces every denoiser
    output by ``S D(z_t)``.  Both use the deterministic Euler step.
    """
    s = _check_sync_matrix(sync_matrix)
    x = np.asarray(x_init, dtype=np.float64)
    if x.shape[0] != s.shape[0]:
        raise ValueError("sync matrix size does not match the number of views")
    a = DiffusionState(x, float(times[0]))
    b = DiffusionState(_apply(s, x), float(times[0]))
    for i, t_next in enumerate(times[1:]):
        xa = denoise(_apply(s, a.x), a.t, i)
        xb = _apply(s, denoise(b.x, b.t, i))
        a = euler_ancestral_step(a, xa, float(t_next), None, sched, deterministic=True)
        b = euler_ancestral_step(b, xb, float(t_next), None, sched, deterministic=True)
    return a.x, b.x


def sync_equivalence_check(sync_matrix, denoise: Callable, x_init, times, sched: NoiseSchedule) -> float:
    """Max abs difference between the terminal states of the two sync paths."""
    xa, xb = sync_trajectories(sync_matrix, denoise, x_init, times, sched)
    return float(np.max(np.abs(xa - xb)))


def linear_view_denoiser(mean, sched: NoiseSchedule, data_var: float = 1.0):
    """Posterior mean for x ~ N(mean, data_var I) observed through the kernel.

    ``mean`` has one view axis whose entries are all equal, so the denoiser
    commutes with any row-stochastic view mixing.
    """
    mean = np.asarray(mean, dtype=np.float64)

    def denoise(x_t, t, step=0):
        a, s = float(sched.alpha(t)), float(sched.sigma(t))
        k = a * data_var / (a * a * data_var + s * s)
        return mean + k * (np.asarray(x_t) - a * mean)

    return denoise
