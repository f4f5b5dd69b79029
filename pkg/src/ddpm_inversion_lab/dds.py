"""Delta Denoising Score optimization and its equivalence with edit-friendly editing.

With sequential descending timesteps, shared forward noise and the learning
rate γ = b/c of each transition, every DDS iterate noised to the next
timestep coincides with the edit-friendly state at that timestep.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import noise
from .denoiser import Denoiser, random_additive, random_linear
from .editing import EditConfig, EditMode, edit
from .inversion import invert, noised_state
from .sampler import forward_noise
from .schedule import NoiseSchedule, TimestepPlan, coefficients, plan_timesteps


class LrMode(str, Enum):
    """``matched`` ties γ to each transition's coefficients; ``constant`` uses one fixed rate."""

    MATCHED = "matched"
    CONSTANT = "constant"


def learning_rate(schedule: NoiseSchedule, t: int, s: int) -> float:
    """γ = (1 - α_{t→s}) / (√ᾱ_t √(1 - ᾱ_t)) for the transition t → s."""
    coef = coefficients(schedule, t, s)
    return coef.b / coef.c


@dataclass
class DdsRun:
    """Iterates of the optimized clean sample; ``iterates[0]`` is the source."""

    iterates: list[np.ndarray]
    timesteps: list[int]
    learning_rates: list[float]
    noises: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]


def dds_gradient(schedule, denoiser: Denoiser, x_hat_t, x_t, t: int, c, c_hat) -> np.ndarray:
    """ε(x̂_t, t, ĉ) - ε(x_t, t, c) for states already noised to ``t``."""
    return denoiser.eps(x_hat_t, t, c_hat) - denoiser.eps(x_t, t, c)


def dds_edit(schedule, denoiser: Denoiser, plan: TimestepPlan, x0, c, c_hat, seed: int,
             lr_mode: LrMode | str = LrMode.MATCHED, constant_lr: float | None = None) -> DdsRun:
    """Sequential DDS over the plan's timesteps (the plan's shift is not used).

    Both branches are noised at timestep t with the same ε̃_t bound to (seed, t).
    """
    lr_mode = LrMode(lr_mode)
    if lr_mode is LrMode.CONSTANT and constant_lr is None:
        raise ValueError("constant lr mode needs constant_lr")
    x0 = np.asarray(x0, dtype=np.float64)
    x_hat = x0.copy()
    run = DdsRun([x_hat], [], [])
    for t, s in plan.transitions:
        eps_tilde = noise.forward_noise_draw(seed, t, denoiser.dim)
        x_t = forward_noise(schedule, x0, t, eps_tilde)
        x_hat_t = forward_noise(schedule, x_hat, t, eps_tilde)
        gamma = learning_rate(schedule, t, s) if lr_mode is LrMode.MATCHED else float(constant_lr)
        x_hat = x_hat - gamma * dds_gradient(schedule, denoiser, x_hat_t, x_t, t, c, c_hat)
        run.iterates.append(x_hat)
        run.timesteps.append(t)
        run.learning_rates.append(gamma)
        run.noises.append(eps_tilde)
    return run


def noised_iterates(schedule, run: DdsRun, plan: TimestepPlan, seed: int) -> list[np.ndarray]:
    """Each post-step iterate noised to the step's target, comparable to EF states."""
    return [noised_state(schedule, x, s, seed) for x, s in zip(run.iterates[1:], plan.targets)]


@dataclass(frozen=True)
class EquivalenceConfig:
    dim: int
    K: int
    denoiser_seed: int
    lr_mode: LrMode = LrMode.MATCHED
    t_start: int = 999
    ef_delta: int = 0
    variant: str = "linear_random"
    lr_perturbation: float = 1.25


def run_equivalence(schedule: NoiseSchedule, cfg: EquivalenceConfig) -> dict:
    """Max |DDS - EF| over all steps for one configuration."""
    factory = random_linear if cfg.variant == "linear_random" else random_additive
    denoiser = factory(schedule, cfg.dim, cfg.denoiser_seed)
    plan = plan_timesteps(schedule, K=cfg.K, t_start=cfg.t_start, delta=0)
    x0 = noise.gaussian(cfg.denoiser_seed, noise.Stream.DATA, 0, cfg.dim)
    seed = cfg.denoiser_seed
    constant_lr = None
    if LrMode(cfg.lr_mode) is LrMode.CONSTANT:
        rates = [learning_rate(schedule, t, s) for t, s in plan.transitions]
        constant_lr = cfg.lr_perturbation * float(np.mean(rates))
    run = dds_edit(schedule, denoiser, plan, x0, 1, 2, seed, cfg.lr_mode, constant_lr)

    ef_plan = plan.with_delta(cfg.ef_delta).check(schedule)
    record = invert(schedule, denoiser, ef_plan, x0, 1, seed)
    traj = edit(schedule, denoiser, record, 2, EditConfig(mode=EditMode.EF))
    ef_states = [x for _, x in traj.states[1:]]
    dds_states = noised_iterates(schedule, run, plan, seed)
    diff = max(float(np.max(np.abs(a - b))) for a, b in zip(dds_states, ef_states))
    return {
        "dim": cfg.dim,
        "K": cfg.K,
        "denoiser_seed": cfg.denoiser_seed,
        "lr_mode": LrMode(cfg.lr_mode).value,
        "max_abs_diff": diff,
    }


def ef_dds_equivalence_report(schedule: NoiseSchedule, configs) -> list[dict]:
    return [run_equivalence(schedule, cfg) for cfg in configs]


def random_equivalence_configs(n: int, seed: int = 0, lr_mode=LrMode.MATCHED,
                               dims=(2, 16), Ks=(3, 10)) -> list[EquivalenceConfig]:
    rng = noise.generator(seed, noise.Stream.PARAMS, 0xFFFFFFFE)
    return [
        EquivalenceConfig(
            dim=int(rng.integers(dims[0], dims[1] + 1)),
            K=int(rng.integers(Ks[0], Ks[1] + 1)),
            denoiser_seed=int(rng.integers(0, 2**31)),
            lr_mode=LrMode(lr_mode),
        )
        for _ in range(n)
    ]


REPORT_COLUMNS = ["dim", "K", "denoiser_seed", "lr_mode", "max_abs_diff"]


def write_report(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
