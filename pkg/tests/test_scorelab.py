import csv
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.integrate import trapezoid

from adapterlab.diffusion import NoiseSchedule
from adapterlab.scorelab import (
    PRESETS,
    GaussianMixture1D,
    averaged_score_fn,
    central_mass,
    histogram_kl,
    linear_view_denoiser,
    perturbed_mixture_1d,
    perturbed_score_1d,
    product_mixture_1d,
    product_score_fn,
    run_scorelab,
    sample_product,
    sample_with_score,
    sync_equivalence_check,
    sync_trajectories,
    write_density_csv,
)
from adapterlab.world import bayes_denoise

VP = NoiseSchedule()
EDM = NoiseSchedule.edm()


def random_mixture(rng, k=3):
    w = rng.uniform(0.2, 1.0, k)
    return GaussianMixture1D(rng.uniform(-2, 2, k), rng.uniform(0.2, 1.0, k), w / w.sum())


def perturbed_log_density_quadrature(m, x, t, sched, n=100_000):
    """log of int p(y) N(x; alpha y, sigma^2) dy by the trapezoid rule."""
    a, s = float(sched.alpha(t)), float(sched.sigma(t))
    lo = (m.means - 8 * m.stds).min()
    hi = (m.means + 8 * m.stds).max()
    y = np.linspace(lo, hi, n)
    p = m.density(y)
    x = np.atleast_1d(x)[:, None]
    kern = np.exp(-0.5 * (x - a * y) ** 2 / s**2) / np.sqrt(2 * np.pi * s**2)
    return np.log(trapezoid(p * kern, y, axis=1))


mixtures = st.integers(0, 2**31 - 1).map(lambda s: random_mixture(np.random.default_rng(s)))


def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture1D([0.0, 1.0], [1.0], [1.0])
    with pytest.raises(ValueError):
        GaussianMixture1D([0.0], [0.0], [1.0])
    with pytest.raises(ValueError):
        GaussianMixture1D([0.0, 1.0], [1.0, 1.0], [0.5, 0.6])


def test_standard_normal_score_at_unit_noise():
    m = GaussianMixture1D([0.0], [1.0], [1.0])
    assert EDM.alpha(1.0) == 1.0 and EDM.sigma(1.0) == 1.0
    x = np.linspace(-3, 3, 13)
    assert_allclose(perturbed_score_1d(m, x, 1.0, EDM), -x / 2, rtol=1e-14, atol=1e-15)


def test_symmetric_mixture_score_vanishes_at_origin():
    for a in (0.3, 1.0, 2.5):
        m = GaussianMixture1D([-a, a], [0.4, 0.4], [0.5, 0.5])
        for t in (0.0, 0.1, 0.5, 1.0):
            assert perturbed_score_1d(m, 0.0, t, VP) == 0.0


def test_score_matches_quadrature_derivative():
    rng = np.random.default_rng(0)
    h = 1e-4
    for _ in range(3):
        m = random_mixture(rng)
        t = float(rng.uniform(0.05, 0.9))
        x = rng.uniform(-2, 2, 5)
        fd = (perturbed_log_density_quadrature(m, x + h, t, VP) - perturbed_log_density_quadrature(m, x - h, t, VP)) / (2 * h)
        assert_allclose(perturbed_score_1d(m, x, t, VP), fd, rtol=1e-6, atol=1e-9)


def test_negative_time_is_rejected():
    with pytest.raises(ValueError):
        perturbed_score_1d(GaussianMixture1D([0.0], [1.0], [1.0]), 0.0, -0.1, VP)


@settings(max_examples=30, deadline=None)
@given(mixtures, st.floats(-3, 3))
def test_score_at_time_zero_is_the_clean_score(m, x):
    assert_allclose(perturbed_score_1d(m, x, 0.0, VP), m.score(x), rtol=1e-12, atol=1e-12)


def test_product_examples():
    n = GaussianMixture1D([0.0], [1.0], [1.0])
    p = product_mixture_1d(n, n)
    assert_allclose(p.means, [0.0])
    assert_allclose(p.stds**2, [0.5])
    s = 0.3
    q = product_mixture_1d(GaussianMixture1D([-1.0], [s], [1.0]), GaussianMixture1D([1.0], [s], [1.0]))
    assert len(q) == 1 and q.means[0] == 0.0
    assert_allclose(q.stds[0] ** 2, s**2 / 2)


def test_product_matches_normalized_pointwise_product():
    rng = np.random.default_rng(1)
    for _ in range(5):
        m1, m2 = random_mixture(rng), random_mixture(rng, 2)
        lo = min((m.means - 8 * m.stds).min() for m in (m1, m2))
        hi = max((m.means + 8 * m.stds).max() for m in (m1, m2))
        x = np.linspace(lo, hi, 2048)
        raw = m1.density(x) * m2.density(x)
        ref = raw / trapezoid(raw, x)
        got = product_mixture_1d(m1, m2).density(x)
        keep = ref > 1e-300
        assert np.max(np.abs(got[keep] - ref[keep]) / ref[keep]) < 1e-8


@settings(max_examples=30, deadline=None)
@given(mixtures, mixtures)
def test_product_is_commutative(m1, m2):
    x = np.linspace(-4, 4, 101)
    assert_allclose(product_mixture_1d(m1, m2).density(x), product_mixture_1d(m2, m1).density(x), rtol=1e-10, atol=1e-300)


def test_averaged_score_is_score_of_geometric_mean():
    # 0.5 s1 + 0.5 s2 = d/dx log sqrt(p1_t p2_t), checked against quadrature
    m1, m2 = PRESETS["mirrored"]()
    h = 1e-4
    for t in (0.1, 0.4, 0.8):
        x = np.linspace(-2, 2, 9)

        def log_geo(z):
            return 0.5 * (perturbed_log_density_quadrature(m1, z, t, VP) + perturbed_log_density_quadrature(m2, z, t, VP))

        fd = (log_geo(x + h) - log_geo(x - h)) / (2 * h)
        assert_allclose(averaged_score_fn(m1, m2, VP)(x, t), fd, rtol=1e-6, atol=1e-8)


def test_averaged_score_differs_from_product_score():
    m1, m2 = PRESETS["bimodal"]()
    x = np.linspace(-3, 3, 121)
    gap = 0.0
    for t in np.linspace(0.05, 0.95, 10):
        gap = max(gap, np.max(np.abs(averaged_score_fn(m1, m2, VP)(x, t) - product_score_fn(m1, m2, VP)(x, t))))
    assert gap > 0.1


def test_exact_product_sampling_moments():
    # 30 deterministic steps under-disperse by about 10% on this target, so
    # the moment check runs with a finer grid
    n = GaussianMixture1D([0.0], [1.0], [1.0])
    xs = sample_product(n, n, "exact_product", n_samples=10_000, n_steps=200, seed=0)
    assert abs(xs.mean()) < 0.02
    assert abs(xs.var() - 0.5) < 0.05 * 0.5


def test_averaging_puts_mass_between_the_modes():
    for name in ("bimodal", "mirrored"):
        m1, m2 = PRESETS[name]()
        exact = sample_product(m1, m2, "exact_product", 10_000, 30, seed=1)
        avg = sample_product(m1, m2, "averaged", 10_000, 30, seed=1)
        assert central_mass(avg) >= 3 * central_mass(exact)
        prod = product_mixture_1d(m1, m2)
        assert histogram_kl(avg, prod) > histogram_kl(exact, prod)


def test_averaging_equal_scores_is_single_score_sampling():
    m = GaussianMixture1D([-0.5, 1.0], [0.4, 0.3], [0.3, 0.7])
    avg = sample_product(m, m, "averaged", 500, 30, seed=2)
    single = sample_with_score(lambda x, t: perturbed_score_1d(m, x, t, VP), VP, 30, 500, seed=2)
    assert_array_equal(avg, single)


def test_degenerate_preset_kl_values_agree():
    rep = run_scorelab("degenerate", 10_000, 30, seed=0)
    assert abs(rep.kl_averaged - rep.kl_exact) < 0.01


def test_sampling_is_batch_independent():
    m1, m2 = PRESETS["bimodal"]()
    few = sample_product(m1, m2, "averaged", 10, 20, seed=3)
    many = sample_product(m1, m2, "averaged", 100, 20, seed=3)
    assert_array_equal(few, many[:10])
    with pytest.raises(ValueError):
        sample_product(m1, m2, "median", 10, 20)


def test_histogram_kl_is_small_for_exact_draws():
    m = PRESETS["bimodal"]()[0]
    xs = m.sample(10_000, np.random.default_rng(4))
    assert histogram_kl(xs, m) < 0.01
    assert histogram_kl(xs, GaussianMixture1D([0.0], [0.3], [1.0])) > 1.0


def test_run_scorelab_report_and_csv(tmp_path):
    t0 = time.perf_counter()
    rep = run_scorelab("bimodal", 10_000, 30, seed=0)
    assert time.perf_counter() - t0 < 30
    s = rep.summary()
    assert s["kl_averaged"] > s["kl_exact"]
    assert set(s) >= {"kl_exact", "kl_averaged", "kl_ratio"}
    path = tmp_path / "density.csv"
    write_density_csv(path, rep.table)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "p_exact", "p_averaged_hist", "p_product"]
    assert len(rows) == 129
    # histograms integrate to at most one over the binned range
    tab = np.array(rows[1:], dtype=float)
    width = tab[1, 0] - tab[0, 0]
    assert tab[:, 1].sum() * width <= 1 + 1e-9
    assert_allclose(tab[:, 3].sum() * width, 1.0, atol=1e-3)


def test_perturbed_mixture_moments():
    m = PRESETS["mirrored"]()[0]
    t = 0.5
    pm = perturbed_mixture_1d(m, t, VP)
    a, s = VP.alpha(t), VP.sigma(t)
    assert_allclose(pm.mean(), a * m.mean())
    assert_allclose(pm.variance(), a**2 * m.variance() + s**2)


# ---------------------------------------------------------------- sync


def _linear_setup(v=4):
    rng = np.random.default_rng(5)
    mean = np.broadcast_to(rng.normal(size=(1, 3, 3, 2)), (v, 3, 3, 2)).copy()
    return mean, rng.normal(size=(v, 3, 3, 2))


def test_identity_sync_has_zero_deviation():
    mean, x0 = _linear_setup()
    den = linear_view_denoiser(mean, VP)
    assert sync_equivalence_check(np.eye(4), den, x0, VP.time_grid(30), VP) == 0.0


def test_uniform_averaging_with_linear_denoiser():
    mean, x0 = _linear_setup()
    s = np.full((4, 4), 0.25)
    den = linear_view_denoiser(mean, VP)
    assert sync_equivalence_check(s, den, x0, VP.time_grid(30), VP) < 1e-10


def test_nonlinear_denoiser_deviation_is_only_reported(quad_world):
    s = np.full((4, 4), 0.25)
    x0 = np.random.default_rng(6).normal(size=quad_world.view_shape())

    def den(x, t, step):
        return bayes_denoise(x, t, quad_world, VP, "per_view")

    dev = sync_equivalence_check(s, den, x0, VP.time_grid(30), VP)
    assert np.isfinite(dev) and dev >= 0


def test_sync_matrix_must_be_square_and_match_views():
    mean, x0 = _linear_setup()
    den = linear_view_denoiser(mean, VP)
    with pytest.raises(ValueError):
        sync_trajectories(np.ones((4, 3)), den, x0, VP.time_grid(5), VP)
    with pytest.raises(ValueError):
        sync_trajectories(np.eye(3), den, x0, VP.time_grid(5), VP)
