import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from adapterlab.diffusion import (
    DiffusionState,
    GuidanceConfig,
    NoiseSchedule,
    cfg_combine,
    denoised_from_score,
    diffusion_loss,
    euler_ancestral_step,
    guided_feedback_combine,
    mean_latent_init,
    perturb,
    sample,
    score_from_denoised,
)
from adapterlab.pipelines import T_INIT_PRESETS
from adapterlab.scorelab import GaussianMixture1D, histogram_kl, perturbed_score_1d, sample_with_score
from adapterlab.world import bayes_denoise

VP = NoiseSchedule()
EDM = NoiseSchedule.edm()


def vp_time_for_alpha(alpha):
    return np.arccos(alpha) / np.arctan(VP.sigma_max) * VP.T


finite = st.floats(-5, 5, allow_nan=False)


def test_schedule_endpoints():
    assert VP.alpha(0.0) == 1.0 and VP.sigma(0.0) == 0.0
    assert_allclose(VP.sigma(VP.T) / VP.alpha(VP.T), VP.sigma_max, rtol=1e-12)
    assert EDM.alpha(17.0) == 1.0 and EDM.sigma(17.0) == 17.0


def test_time_grid_is_uniform_in_sigma():
    for sched in (VP, EDM):
        times = sched.time_grid(30)
        assert len(times) == 31 and times[0] == sched.T and times[-1] == 0.0
        assert_allclose(np.diff(sched.sigma(times)), np.diff(sched.sigma(times))[0], rtol=1e-9)


def test_schedule_rejects_out_of_range_time():
    with pytest.raises(ValueError):
        VP.alpha(-0.1)
    with pytest.raises(ValueError):
        VP.sigma(1.5)


def test_perturb_direct_substitution():
    t = vp_time_for_alpha(0.8)
    assert_allclose(VP.alpha(t), 0.8, rtol=1e-12)
    assert_allclose(VP.sigma(t), 0.6, rtol=1e-12)
    assert_allclose(perturb(np.array(1.0), t, np.array(0.5), VP), 1.1, rtol=1e-12)


def test_perturb_endpoints():
    rng = np.random.default_rng(0)
    x, e = rng.normal(size=(3, 4, 4, 5)), rng.normal(size=(3, 4, 4, 5))
    assert_array_equal(perturb(x, 0.0, e, VP), x)
    assert_allclose(perturb(np.zeros_like(x), VP.T, e, VP), VP.sigma(VP.T) * e, rtol=1e-15)


def test_perturb_shape_mismatch():
    with pytest.raises(ValueError):
        perturb(np.zeros(3), 0.5, np.zeros(4), VP)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1), finite, finite)
def test_perturb_is_linear(seed, t, a, b):
    rng = np.random.default_rng(seed)
    x1, x2, e1, e2 = rng.normal(size=(4, 6))
    lhs = perturb(a * x1 + b * x2, t, a * e1 + b * e2, VP)
    rhs = a * perturb(x1, t, e1, VP) + b * perturb(x2, t, e2, VP)
    assert_allclose(lhs, rhs, atol=1e-12)


def test_score_examples():
    assert_allclose(score_from_denoised(np.array(0.0), np.array(2.0), 1.0, EDM), 2.0)
    t = 0.4
    x_t = np.random.default_rng(1).normal(size=5)
    assert_allclose(score_from_denoised(x_t, x_t / VP.alpha(t), t, VP), 0.0, atol=1e-15)
    with pytest.raises(ValueError):
        score_from_denoised(x_t, x_t, 0.0, VP)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0))
def test_score_and_denoised_are_inverse(seed, t):
    rng = np.random.default_rng(seed)
    x_t, x_hat = rng.normal(size=(2, 8))
    s = score_from_denoised(x_t, x_hat, t, VP)
    assert_allclose(denoised_from_score(x_t, s, t, VP), x_hat, rtol=1e-9, atol=1e-9)


def test_bayes_score_matches_gaussian_closed_form(quad_world):
    # one prototype plus jitter of std a: x_t ~ N(alpha y, alpha^2 a^2 + sigma^2)
    world = quad_world.subset([0])
    y, a = world.renders[0], world.view_noise
    rng = np.random.default_rng(2)
    for _ in range(20):
        t = float(rng.uniform(0.05, 1.0))
        al, sg = VP.alpha(t), VP.sigma(t)
        x_t = al * y + rng.normal(scale=2.0, size=y.shape)
        analytic = -(x_t - al * y) / (al**2 * a**2 + sg**2)
        got = score_from_denoised(x_t, bayes_denoise(x_t, t, world, VP), t, VP)
        assert_allclose(got, analytic, rtol=1e-8)


def test_terminal_step_returns_prediction():
    rng = np.random.default_rng(3)
    x, x_hat = rng.normal(size=(2, 2, 3, 3, 5))
    for det in (True, False):
        out = euler_ancestral_step(DiffusionState(x, 0.3), x_hat, 0.0, np.zeros_like(x), VP, deterministic=det)
        assert_allclose(out.x, x_hat, atol=1e-15)
        assert out.t == 0.0


def test_zero_score_step_only_rescales():
    rng = np.random.default_rng(4)
    x = rng.normal(size=10)
    t, s = 0.7, 0.4
    out = euler_ancestral_step(DiffusionState(x, t), x / VP.alpha(t), s, None, VP, deterministic=True)
    assert_allclose(out.x, x * VP.alpha(s) / VP.alpha(t), rtol=1e-12)


def test_deterministic_step_ignores_noise_and_seed():
    rng = np.random.default_rng(5)
    x, x_hat, n1, n2 = rng.normal(size=(4, 16))
    a = euler_ancestral_step(DiffusionState(x, 0.9, 1), x_hat, 0.5, n1, VP, deterministic=True)
    b = euler_ancestral_step(DiffusionState(x, 0.9, 2), x_hat, 0.5, n2, VP, deterministic=True)
    assert_array_equal(a.x, b.x)


def test_ancestral_step_injects_noise_of_the_right_size():
    # with x_hat fixed at 0 the step is (sigma_down / sigma_t) x + sigma_up n in edm units
    t, s = 10.0, 4.0
    n = np.ones(3)
    out = euler_ancestral_step(DiffusionState(np.zeros(3), t), np.zeros(3), s, n, EDM)
    up = np.sqrt(s**2 * (t**2 - s**2) / t**2)
    assert_allclose(out.x, up * n)


def test_step_rejects_bad_times():
    with pytest.raises(ValueError):
        euler_ancestral_step(DiffusionState(np.zeros(2), 0.3), np.zeros(2), 0.5, None, VP, deterministic=True)


def test_sampler_recovers_gaussian_world():
    target = GaussianMixture1D([0.7], [0.6], [1.0])
    xs = sample_with_score(lambda x, t: perturbed_score_1d(target, x, t, VP), VP, 30, 10_000, seed=0, deterministic=False)
    assert histogram_kl(xs, target) < 0.02


def test_sample_is_seed_deterministic():
    def den(x, t, step):
        return 0.5 * x

    x0 = np.random.default_rng(6).normal(size=(2, 4)) * EDM.sigma_max
    times = EDM.time_grid(10)
    a = sample(den, x0, times, EDM, seed=3)
    b = sample(den, x0, times, EDM, seed=3)
    c = sample(den, x0, times, EDM, seed=4)
    assert_array_equal(a.x, b.x)
    assert not np.array_equal(a.x, c.x)


def test_cfg_examples():
    rng = np.random.default_rng(7)
    dc, du = rng.normal(size=(2, 5))
    assert_array_equal(cfg_combine(dc, du, 1.0), dc)
    for lam in (0.0, 0.5, 3.0, 7.5):
        assert_allclose(cfg_combine(dc, dc, lam), dc, rtol=1e-15, atol=1e-15)
    assert cfg_combine(np.array(2.0), np.array(0.0), 3.0) == 6.0


def test_guided_feedback_examples():
    rng = np.random.default_rng(8)
    fb, zero, dc, du = rng.normal(size=(4, 3, 4, 4, 5))
    g0 = GuidanceConfig(lambda_c=2.5, lambda_aug=0.0)
    assert_array_equal(guided_feedback_combine(fb, zero, dc, du, g0), cfg_combine(dc, du, 2.5))
    for lam in (0.5, 1.0, 8.0):
        g = GuidanceConfig(lambda_c=2.5, lambda_aug=lam)
        assert_array_equal(guided_feedback_combine(zero, zero, dc, du, g), cfg_combine(dc, du, 2.5))
    g1 = GuidanceConfig(lambda_c=1.0, lambda_aug=1.0)
    assert_allclose(guided_feedback_combine(fb, dc, dc, du, g1), fb, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 3), finite, st.floats(0, 8), st.floats(0, 8))
def test_guided_feedback_is_affine_in_each_argument(seed, which, c, lam_c, lam_aug):
    rng = np.random.default_rng(seed)
    args = list(rng.normal(size=(4, 6)))
    u, v = rng.normal(size=(2, 6))
    g = GuidanceConfig(lam_c, lam_aug)

    def f(x):
        a = list(args)
        a[which] = x
        return guided_feedback_combine(*a, g)

    # affine: f(c u + (1 - c) v) = c f(u) + (1 - c) f(v)
    assert_allclose(f(c * u + (1 - c) * v), c * f(u) + (1 - c) * f(v), atol=1e-9 * (1 + abs(c)) * (1 + lam_c + lam_aug))


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(lambda_aug=-1.0)
    with pytest.raises(ValueError):
        GuidanceConfig(zero_feedback_prob=1.5)
    assert GuidanceConfig().zero_feedback_prob == 0.2


def test_mean_latent_init_examples():
    rng = np.random.default_rng(9)
    x_bar, eps = rng.normal(size=(2, 2, 3, 3, 5))
    t = 0.6
    assert_allclose(mean_latent_init(x_bar, t, np.zeros_like(eps), VP).x, VP.alpha(t) * x_bar)
    assert_allclose(mean_latent_init(np.zeros_like(x_bar), t, eps, VP).x, VP.sigma(t) * eps)
    assert mean_latent_init(x_bar, t, eps, VP).t == t


def test_template_start_time():
    assert T_INIT_PRESETS["template"] == 0.88
    assert T_INIT_PRESETS["refine"] == 0.3
    times = EDM.time_grid(30, T_INIT_PRESETS["template"] * EDM.T)
    assert_allclose(times[0], 0.88 * EDM.T)


class _NoiselessWorld:
    def __init__(self, x):
        self.x = x

    def sample_clean(self, rng):
        return self.x.copy()


def test_diffusion_loss_zero_and_positive_cases():
    x = np.full((2, 3, 3, 5), 0.7)
    world = _NoiselessWorld(x)
    assert diffusion_loss(lambda x_t, t: x, world, 50) == 0.0
    assert diffusion_loss(lambda x_t, t: np.zeros_like(x_t), world, 50) > 0.0
    with pytest.raises(ValueError):
        diffusion_loss(lambda x_t, t: x, world, 0)


def test_bayes_denoiser_beats_perturbed_versions(quad_world):
    def bayes(x_t, t):
        return bayes_denoise(x_t, t, quad_world, VP, scope="joint")

    base = diffusion_loss(bayes, quad_world, 300, "unit", seed=1)
    rng = np.random.default_rng(10)
    for _ in range(5):
        delta = 0.05 * rng.normal(size=quad_world.view_shape())
        worse = diffusion_loss(lambda x_t, t: bayes(x_t, t) + delta, quad_world, 300, "unit", seed=1)
        assert base < worse
