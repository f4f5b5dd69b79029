import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import multivariate_normal

from ddpm_inversion_lab import noise
from ddpm_inversion_lab.denoiser import (
    CallCounter, Condition, GaussianDenoiser, GMMDenoiser, condition_responsibility, draw_sources,
    eps_predict, from_config, matched_gaussian, posterior_x0, random_additive, random_linear, toy_gmm,
)
from ddpm_inversion_lab.errors import (
    BoundsError, ConfigurationError, ShapeError, UnknownConditionError,
)
from ddpm_inversion_lab.schedule import build_schedule


def _t_for_alpha_bar(schedule, target):
    return int(np.argmin(np.abs(schedule._alpha_bar_full - target)))


def test_gaussian_eps_closed_form():
    # constant β = 0.36 gives ᾱ_1 = 0.64; with m = 0, s = 1: ε = √(1-ᾱ) x = 0.6 x
    sched = build_schedule("constant", 0.36, 0.36, 3)
    den = GaussianDenoiser(sched, {0: [0.0, 0.0]}, {0: 1.0})
    x = np.array([1.0, -2.0])
    assert np.allclose(den.eps(x, 1, 0), 0.6 * x, atol=1e-15)


def test_gaussian_eps_matches_monte_carlo_conditional_mean(schedule):
    # E[ε̃ | x_t] estimated by kernel-free binning on a 1-d problem
    den = GaussianDenoiser(schedule, {0: [0.3]}, {0: 0.7})
    t = _t_for_alpha_bar(schedule, 0.64)
    ab = schedule.alpha_bar(t)
    rng = np.random.default_rng(0)
    x0 = 0.3 + 0.7 * rng.standard_normal(100_000)
    e = rng.standard_normal(100_000)
    xt = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * e
    # E[ε̃ | x_t] is linear in x_t, so regress
    slope, intercept = np.polyfit(xt, e, 1)
    pred = den.eps(np.array([[0.0], [1.0]]), t, 0)[:, 0]
    assert intercept == pytest.approx(pred[0], abs=1e-2)
    assert slope + intercept == pytest.approx(pred[1], abs=1e-2)


def test_gaussian_x0_pred_reduces_to_scaled_state(schedule):
    den = matched_gaussian(schedule, dim=3)
    x = np.array([0.5, -1.0, 2.0])
    for t in (1, 300, 999):
        ab = schedule.alpha_bar(t)
        assert np.allclose(den.x0_pred(x, t, 1), math.sqrt(ab) * x, atol=1e-12)
        assert np.allclose(den.x0_pred(x, t, 1), den.posterior_mean(x, t, 1), atol=1e-12)


def _numeric_score(logpdf, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (logpdf(x + e) - logpdf(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("t", [50, 400, 900])
def test_gmm_eps_is_scaled_score_of_noised_mixture(schedule, t):
    den = toy_gmm(schedule, dim=3)
    ab = schedule.alpha_bar(t)
    w, m, s = den.components[1]

    def logpdf(x):
        dens = sum(wk * multivariate_normal.pdf(x, math.sqrt(ab) * mk, (ab * sk**2 + 1 - ab) * np.eye(3))
                   for wk, mk, sk in zip(w, m, s))
        return math.log(dens)

    x = np.array([0.4, -0.2, 0.1])
    expected = -math.sqrt(1 - ab) * _numeric_score(logpdf, x)
    assert np.allclose(den.eps(x, t, 1), expected, atol=1e-7)


def test_gmm_far_state_stays_in_hull(schedule):
    den = toy_gmm(schedule, dim=2)
    x = np.array([1e4, -3e4])
    for t in (1, 500, 999):
        x0 = den.x0_pred(x, t, 1)
        comp = den.component_posterior_means(x, t, 1)
        assert np.all(np.isfinite(x0))
        lo, hi = comp.min(axis=0) - 1e-6 * np.abs(comp).max(), comp.max(axis=0) + 1e-6 * np.abs(comp).max()
        assert np.all((x0 >= lo) & (x0 <= hi))


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 999))
def test_linear_variants_split_into_state_and_condition(seed, dim, t):
    sched = build_schedule()
    for den in (random_linear(sched, dim, seed), random_additive(sched, dim, seed)):
        x = noise.gaussian(seed, noise.Stream.DATA, 7, dim)
        diff = den.eps(x, t, 2) - den.eps(x, t, 1)
        assert np.allclose(diff, den.offsets[2] - den.offsets[1], atol=1e-12)


def test_batched_evaluation_matches_rows(schedule):
    den = toy_gmm(schedule, dim=4)
    xs = noise.gaussian(1, noise.Stream.DATA, 0, (5, 4))
    batched = den.eps(xs, 200, 2)
    for row, x in zip(batched, xs):
        assert np.allclose(row, den.eps(x, 200, 2), atol=1e-14)
    assert np.array_equal(eps_predict(den, xs, 200, 2), batched)
    assert np.array_equal(posterior_x0(den, xs, 200, 2), den.x0_pred(xs, 200, 2))


def test_condition_errors(schedule):
    den = random_linear(schedule, 4, 0)
    with pytest.raises(UnknownConditionError):
        den.eps(np.zeros(4), 10, 9)
    with pytest.raises(ShapeError):
        den.eps(np.zeros(5), 10, 1)
    with pytest.raises(ShapeError):
        den.eps(np.zeros(4), 10, Condition(1, embedding=(0.0, 1.0)))
    with pytest.raises(BoundsError):
        den.eps(np.zeros(4), 1000, 1)
    assert den.null.is_null


def test_config_roundtrip_preserves_hash_and_output(schedule):
    x = noise.gaussian(3, noise.Stream.DATA, 0, 6)
    for den in (matched_gaussian(schedule, 6, target_mean=1.0), toy_gmm(schedule, 6),
                random_linear(schedule, 6, 11), random_additive(schedule, 6, 12)):
        again = from_config(schedule, den.to_config())
        assert type(again) is type(den)
        assert again.content_hash() == den.content_hash()
        assert np.array_equal(again.eps(x, 321, 1), den.eps(x, 321, 1))


def test_from_config_rejects_bad_configs(schedule):
    with pytest.raises(ConfigurationError):
        from_config(schedule, {"variant": "mlp"})
    with pytest.raises(ConfigurationError):
        from_config(schedule, {"variant": "gaussian", "means": {"0": [0.0]}})
    with pytest.raises(ShapeError):
        from_config(schedule, {"variant": "gaussian", "dim": 3, "means": {"0": [0.0]}, "scales": {"0": 1}})
    with pytest.raises(ConfigurationError):
        GMMDenoiser(schedule, {0: {"weights": [0.7, 0.7], "means": [[0.0], [1.0]], "scales": [1, 1]}})


def test_call_counter_counts_states(schedule):
    den = CallCounter(random_linear(schedule, 3, 0))
    den.eps(np.zeros(3), 5, 1)
    den.eps(np.zeros((4, 3)), 5, 1)
    assert den.calls == 5
    assert den.dim == 3


def test_responsibility_and_sources(schedule):
    den = toy_gmm(schedule)
    a = draw_sources(den, 1, 0, 500)
    b = draw_sources(den, 2, 0, 500)
    assert np.mean(condition_responsibility(den, a, 2) < 0.5) > 0.95
    assert np.mean(condition_responsibility(den, b, 2) > 0.5) > 0.95
    with pytest.raises(ConfigurationError):
        condition_responsibility(random_linear(schedule, 8, 0), a, 2)
