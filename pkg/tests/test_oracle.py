import numpy as np
import pytest

from glyphdiff.diffusion import NoiseSchedule, default_schedule, make_schedule
from glyphdiff.guidance import ndcfg_combine
from glyphdiff.oracle import (GaussianMixture, ddim_sample_exact, exact_eps,
                              verify_sampler)


def sched_with_alpha_bar(ab: float) -> NoiseSchedule:
    return NoiseSchedule(kind="ddpm_linear", T=1, beta=np.array([1.0 - ab]),
                         alpha_bar=np.array([ab]))


def test_exact_eps_at_component_mean_is_zero():
    gm = GaussianMixture(weights=[1.0], means=[[2.0, -1.0]], variances=[0.3])
    s = sched_with_alpha_bar(0.5)
    z = np.sqrt(0.5) * np.array([2.0, -1.0])
    assert np.abs(exact_eps(z, 1, gm, s)).max() < 1e-12


def test_exact_eps_scalar_formula():
    gm = GaussianMixture(weights=[1.0], means=[[2.0]], variances=[0.0])
    s = sched_with_alpha_bar(0.25)
    got = exact_eps(np.array([2.0]), 1, gm, s)
    want = np.sqrt(0.75) * (2.0 - 0.5 * 2.0) / 0.75
    assert got == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(1.1547005, abs=1e-6)


def test_exact_eps_symmetric_mixture_zero_at_origin():
    gm = GaussianMixture(weights=[0.5, 0.5], means=[[1.5], [-1.5]], variances=[0.1, 0.1])
    s = sched_with_alpha_bar(0.4)
    assert np.abs(exact_eps(np.array([0.0]), 1, gm, s)).max() < 1e-12


def test_exact_eps_matches_quadrature_1d():
    """Independent check: E[eps|z] = (z - a E[x0|z]) / b with the posterior over
    x0 evaluated by direct numerical integration."""
    gm = GaussianMixture(weights=[0.3, 0.7], means=[[-1.0], [2.0]], variances=[0.2, 0.5])
    s = sched_with_alpha_bar(0.37)
    a = np.sqrt(0.37)
    b = np.sqrt(1.0 - 0.37)
    x = np.linspace(-12, 14, 20001)
    prior = sum(w / np.sqrt(2 * np.pi * v) * np.exp(-0.5 * (x - m[0]) ** 2 / v)
                for w, m, v in zip(gm.weights, gm.means, gm.variances))
    for z in np.linspace(-3.0, 3.5, 27):
        like = np.exp(-0.5 * (z - a * x) ** 2 / (b * b))
        post = prior * like
        ex0 = np.trapezoid(post * x, x) / np.trapezoid(post, x)
        want = (z - a * ex0) / b
        got = exact_eps(np.array([z]), 1, gm, s)[0]
        assert abs(got - want) < 1e-6


def test_ndcfg_collapse_at_function_level():
    """With omega_cfg=1 the combinator returns the conditional exact eps even
    when a different mixture plays the unconditional role."""
    gm_a = GaussianMixture(weights=[1.0], means=[[1.0, 0.0]], variances=[0.2])
    gm_b = GaussianMixture(weights=[0.5, 0.5], means=[[-2.0, 0.0], [2.0, 1.0]],
                           variances=[0.3, 0.1])
    s = sched_with_alpha_bar(0.6)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((64, 2))
    eps_a = exact_eps(z, 1, gm_a, s)
    eps_b = exact_eps(z, 1, gm_b, s)
    for w_ndg in (0.0, 2.5, 7.0):
        out = ndcfg_combine(eps_b, eps_b, eps_a, omega_cfg=1.0, omega_ndg_t=w_ndg)
        assert np.abs(out - eps_a).max() < 1e-12


def test_verify_sampler_single_gaussian():
    gm = GaussianMixture(weights=[1.0], means=[[0.0, 0.0]], variances=[1.0])
    rep = verify_sampler(gm, default_schedule(200), 4000, 30, seed=3)
    assert rep.mean_err < 0.05
    assert rep.cov_err < 0.1


def test_verify_sampler_two_modes_populated():
    gm = GaussianMixture(weights=[0.35, 0.65], means=[[-1.5, 0.0], [1.5, 0.5]],
                         variances=[0.05, 0.08])
    rep = verify_sampler(gm, default_schedule(200), 4000, 30, seed=7)
    for true_w, est_w in zip(rep.mode_weights_true, rep.mode_weights_est):
        assert abs(est_w - true_w) <= 0.1 * true_w + 0.02


def test_verify_sampler_deterministic():
    gm = GaussianMixture(weights=[1.0], means=[[0.5]], variances=[0.2])
    s = default_schedule(100)
    r1 = verify_sampler(gm, s, 500, 10, seed=11)
    r2 = verify_sampler(gm, s, 500, 10, seed=11)
    assert r1.to_csv() == r2.to_csv()


def test_verify_sampler_rejects_tiny_runs():
    gm = GaussianMixture(weights=[1.0], means=[[0.0]], variances=[1.0])
    with pytest.raises(ValueError):
        verify_sampler(gm, default_schedule(100), 99, 10, seed=0)


def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture(weights=[0.5, 0.4], means=[[0.0], [1.0]], variances=[1.0, 1.0])
    with pytest.raises(ValueError):
        GaussianMixture(weights=[1.0], means=[[0.0]], variances=[-1.0])
