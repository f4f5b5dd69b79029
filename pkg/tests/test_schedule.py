import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddpm_inversion_lab.errors import BoundsError, ConfigurationError, OrderingError
from ddpm_inversion_lab.schedule import (
    NoiseSchedule, TimestepPlan, build_schedule, coefficients, plan_timesteps,
)

# product of (1 - β_t) over all 1000 scaled-linear betas, 50-digit mpmath
FINAL_ALPHA_BAR = 0.0046600985130772404


def _mp_final_alpha_bar(beta_start, beta_end, T):
    mpmath.mp.dps = 50
    a, b = mpmath.sqrt(mpmath.mpf(beta_start)), mpmath.sqrt(mpmath.mpf(beta_end))
    prod = mpmath.mpf(1)
    for i in range(T):
        prod *= 1 - (a + (b - a) * i / (T - 1)) ** 2
    return float(prod)


def test_final_alpha_bar_matches_extended_precision(schedule):
    assert _mp_final_alpha_bar("0.00085", "0.012", 1000) == pytest.approx(FINAL_ALPHA_BAR, rel=1e-15)
    assert schedule.alpha_bars[-1] == pytest.approx(FINAL_ALPHA_BAR, rel=1e-12)


def test_alpha_bar_zero_is_one(schedule):
    assert schedule.alpha_bar(0) == 1.0
    assert schedule.alpha_bar(1) == pytest.approx(1 - 0.00085)


def test_tables_are_read_only(schedule):
    with pytest.raises(ValueError):
        schedule.betas[0] = 0.5


@given(st.sampled_from(["linear", "scaled_linear", "constant"]),
       st.floats(1e-5, 0.05), st.floats(0.0, 0.2), st.integers(1, 400))
def test_alpha_bar_strictly_decreasing_in_unit_interval(kind, beta_start, extra, T):
    sched = build_schedule(kind, beta_start, min(beta_start + extra, 0.5), T)
    ab = sched._alpha_bar_full
    assert np.all(np.diff(ab) < 0)
    assert np.all((ab[1:] > 0) & (ab[1:] < 1))
    assert np.allclose(sched.alphas * 1.0, 1 - sched.betas)


def test_single_step_schedule():
    sched = build_schedule("linear", 0.1, 0.1, 1)
    assert sched.alpha_bars.tolist() == pytest.approx([0.9])


@pytest.mark.parametrize("kwargs", [
    {"kind": "cosine"}, {"T": 0}, {"beta_start": 0.0}, {"beta_start": 0.02, "beta_end": 0.01},
    {"beta_end": 1.0},
])
def test_build_schedule_rejects_bad_input(kwargs):
    with pytest.raises(ConfigurationError):
        build_schedule(**kwargs)


def test_constant_schedule_sigma_example():
    sched = build_schedule("constant", 0.1, 0.1, 10)
    coef = coefficients(sched, 2, 1)
    # ᾱ_1 = 0.9, ᾱ_2 = 0.81: σ² = (0.1 / 0.19) * 0.1
    assert coef.sigma ** 2 == pytest.approx(0.1 / 0.19 * 0.1, rel=1e-12)
    assert coef.sigma == pytest.approx(0.229416, abs=5e-7)


def test_adjacent_sigma_is_ddpm_posterior_std(schedule):
    rng = np.random.default_rng(3)
    for t in rng.integers(1, schedule.max_timestep + 1, size=100):
        t = int(t)
        post = math.sqrt((1 - schedule.alpha_bar(t - 1)) / (1 - schedule.alpha_bar(t)) * schedule.beta(t))
        assert coefficients(schedule, t, t - 1).sigma == pytest.approx(post, rel=1e-12)


@given(st.integers(1, 999), st.data())
def test_coefficients_give_posterior_mean(t, data):
    sched = build_schedule()
    s = data.draw(st.integers(0, t - 1))
    coef = coefficients(sched, t, s)
    ab_t, ab_s = sched.alpha_bar(t), sched.alpha_bar(s)
    r = ab_t / ab_s
    # q(x_s | x_t, x0) mean with x0 = (x - √(1-ᾱ_t) ε)/√ᾱ_t, written for x = 1, ε = 0.3
    x, eps = 1.0, 0.3
    x0 = (x - math.sqrt(1 - ab_t) * eps) / math.sqrt(ab_t)
    expected = (math.sqrt(ab_s) * (1 - r) / (1 - ab_t)) * x0 + (math.sqrt(r) * (1 - ab_s) / (1 - ab_t)) * x
    assert coef.a * (x - coef.b * eps) == pytest.approx(expected, rel=1e-9, abs=1e-9)
    assert coef.alpha_ratio == pytest.approx(r)
    assert coef.sigma >= 0


def test_final_step_has_zero_sigma(schedule):
    assert coefficients(schedule, 149, 0).sigma == 0.0


def test_coefficient_errors(schedule):
    with pytest.raises(OrderingError):
        coefficients(schedule, 10, 10)
    with pytest.raises(BoundsError):
        coefficients(schedule, 1000, 5)


def test_default_plan(schedule):
    plan = plan_timesteps(schedule, K=4, t_start=599, delta=200)
    assert plan.steps == (599, 449, 299, 149)
    assert plan.targets == (449, 299, 149, 0)
    assert plan.K == 4


@given(st.integers(1, 12), st.integers(1, 999))
def test_uniform_plans_are_valid(K, t_start):
    sched = build_schedule()
    if K > t_start:
        with pytest.raises(ConfigurationError):
            plan_timesteps(sched, K=K, t_start=t_start)
        return
    plan = plan_timesteps(sched, K=K, t_start=t_start)
    assert plan.steps[0] == t_start
    assert all(a > b for a, b in zip(plan.steps, plan.targets))


def test_plan_shift_out_of_range_names_steps(schedule):
    with pytest.raises(BoundsError, match="599"):
        plan_timesteps(schedule, K=4, t_start=599, delta=500)


def test_plan_validation():
    with pytest.raises(ConfigurationError):
        TimestepPlan((5, 7))
    with pytest.raises(BoundsError):
        TimestepPlan((5, 0))
    with pytest.raises(ConfigurationError):
        TimestepPlan((5, 3), delta=-1)


def test_config_roundtrip(tmp_path, schedule):
    again = NoiseSchedule.from_config(schedule.to_config())
    assert np.array_equal(again.alpha_bars, schedule.alpha_bars)
    plan = plan_timesteps(schedule, steps=[700, 20], delta=3)
    assert TimestepPlan.from_config(plan.to_config()) == plan
    schedule.dump_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,beta,alpha,alpha_bar"
    assert len(lines) == 1001
