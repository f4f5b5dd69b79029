import math

import numpy as np
import pytest

from ddpm_inversion_lab import noise
from ddpm_inversion_lab.dds import (
    EquivalenceConfig, LrMode, dds_edit, dds_gradient, learning_rate, random_equivalence_configs,
    run_equivalence, write_report,
)
from ddpm_inversion_lab.denoiser import eps_predict, random_linear
from ddpm_inversion_lab.schedule import plan_timesteps


def test_learning_rate_matches_adjacent_formula(schedule):
    # adjacent steps: (1 - α_t) / (√ᾱ_t √(1 - ᾱ_t))
    for t in (1, 100, 999):
        ab = schedule.alpha_bar(t)
        expected = schedule.beta(t) / (math.sqrt(ab) * math.sqrt(1 - ab))
        assert learning_rate(schedule, t, t - 1) == pytest.approx(expected, rel=1e-12)


def test_gradient_is_two_call_difference(schedule):
    den = random_linear(schedule, 5, 2)
    a, b = noise.gaussian(0, 4, 0, 5), noise.gaussian(0, 4, 1, 5)
    expected = eps_predict(den, a, 300, 2) - eps_predict(den, b, 300, 1)
    assert np.array_equal(dds_gradient(schedule, den, a, b, 300, 1, 2), expected)


def test_dds_shares_noise_between_branches(schedule):
    den = random_linear(schedule, 3, 0)
    plan = plan_timesteps(schedule, K=5, t_start=999)
    run = dds_edit(schedule, den, plan, np.zeros(3), 1, 2, 7)
    assert run.timesteps == list(plan.steps)
    for t, eps in zip(run.timesteps, run.noises):
        assert np.array_equal(eps, noise.forward_noise_draw(7, t, 3))
    with pytest.raises(ValueError):
        dds_edit(schedule, den, plan, np.zeros(3), 1, 2, 7, LrMode.CONSTANT)


@pytest.mark.parametrize("K", [3, 10])
def test_ef_equals_dds(schedule, K):
    row = run_equivalence(schedule, EquivalenceConfig(dim=6, K=K, denoiser_seed=K))
    assert row["max_abs_diff"] <= 1e-9


def test_equivalence_holds_for_adjacent_steps(schedule):
    from ddpm_inversion_lab.dds import noised_iterates
    from ddpm_inversion_lab.editing import EditConfig, EditMode, edit
    from ddpm_inversion_lab.inversion import invert

    den = random_linear(schedule, 4, 1)
    plan = plan_timesteps(schedule, K=30, t_start=999, stride=1)
    x0 = noise.gaussian(1, noise.Stream.DATA, 0, 4)
    run = dds_edit(schedule, den, plan, x0, 1, 2, 1)
    traj = edit(schedule, den, invert(schedule, den, plan, x0, 1, 1), 2, EditConfig(EditMode.EF))
    for a, (_, b) in zip(noised_iterates(schedule, run, plan, 1), traj.states[1:]):
        assert np.max(np.abs(a - b)) <= 1e-9


def test_constant_rate_breaks_equivalence(schedule):
    row = run_equivalence(schedule, EquivalenceConfig(dim=6, K=5, denoiser_seed=3, lr_mode=LrMode.CONSTANT))
    assert row["max_abs_diff"] > 1e-3


def test_random_configs_and_report(schedule, tmp_path):
    cfgs = random_equivalence_configs(4, seed=1)
    assert cfgs == random_equivalence_configs(4, seed=1)
    assert all(2 <= c.dim <= 16 and 3 <= c.K <= 10 for c in cfgs)
    rows = [run_equivalence(schedule, c) for c in cfgs]
    write_report(rows, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "dim,K,denoiser_seed,lr_mode,max_abs_diff"
