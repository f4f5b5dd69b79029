"""Forward noising, posterior-mean steps and ancestral sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import noise
from .denoiser import Denoiser
from .errors import ConfigurationError, ShapeError
from .schedule import NoiseSchedule, StepCoefficients, TimestepPlan, coefficients


class TrajectoryKind(str, Enum):
    GENERATE = "generate"
    RECONSTRUCT = "reconstruct"
    EDIT = "edit"
    SDEDIT = "sdedit"


@dataclass
class Trajectory:
    """States visited from the first plan step down to timestep 0."""

    states: list[tuple[int, np.ndarray]]
    condition: int
    plan: TimestepPlan
    seed: int
    kind: TrajectoryKind
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1][1]

    @property
    def timesteps(self) -> list[int]:
        return [t for t, _ in self.states]

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "seed": self.seed,
            "plan": self.plan.to_config(),
            "condition": self.condition,
            "meta": self.meta,
            "states": [[t, *np.asarray(x, dtype=float).tolist()] for t, x in self.states],
        }


def forward_noise(schedule: NoiseSchedule, x0, t: int, eps_tilde) -> np.ndarray:
    """√ᾱ_t x0 + √(1-ᾱ_t) ε̃."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps_tilde = np.asarray(eps_tilde, dtype=np.float64)
    if x0.shape[-1:] != eps_tilde.shape[-1:]:
        raise ShapeError(f"x0 shape {x0.shape} and noise shape {eps_tilde.shape} differ")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps_tilde


def step_from_eps(coef: StepCoefficients, x, eps) -> np.ndarray:
    return coef.a * (np.asarray(x) - coef.b * np.asarray(eps))


def mu(schedule, denoiser: Denoiser, x, t_src: int, t_dst: int, c, delta: int = 0) -> np.ndarray:
    """Posterior-mean step with the denoiser and coefficients evaluated at the shifted times."""
    coef = coefficients(schedule, t_src + delta, t_dst + delta)
    return step_from_eps(coef, x, denoiser.eps(x, t_src + delta, c))


def mu_cfg(schedule, denoiser, x, t_src, t_dst, c, null, cfg_scale: float, delta: int = 0):
    """CFG applied after two scheduler steps: μ(x, φ) + λ (μ(x, c) - μ(x, φ))."""
    if cfg_scale < 0:
        raise ConfigurationError(f"cfg scale must be >= 0, got {cfg_scale}")
    mu_null = mu(schedule, denoiser, x, t_src, t_dst, null, delta)
    mu_cond = mu(schedule, denoiser, x, t_src, t_dst, c, delta)
    return mu_null + cfg_scale * (mu_cond - mu_null)


def mu_cfg_eps_first(schedule, denoiser, x, t_src, t_dst, c, null, cfg_scale: float, delta: int = 0):
    """CFG applied to the noise predictions, followed by a single scheduler step."""
    t = t_src + delta
    coef = coefficients(schedule, t, t_dst + delta)
    eps_null = denoiser.eps(x, t, null)
    eps = eps_null + cfg_scale * (denoiser.eps(x, t, c) - eps_null)
    return step_from_eps(coef, x, eps)


def _ancestral(schedule, denoiser, x, transitions, c, delta, seed):
    states = [(transitions[0][0], x)]
    for t, s in transitions:
        x = mu(schedule, denoiser, x, t, s, c, delta)
        if s > 0:
            sigma = coefficients(schedule, t + delta, s + delta).sigma
            x = x + sigma * noise.gaussian(seed, noise.Stream.STEP, t, denoiser.dim)
        states.append((s, x))
    return states


def generate(schedule, denoiser: Denoiser, plan: TimestepPlan, c, seed: int) -> Trajectory:
    """Ancestral sampling from x_{t_K} ~ N(0, I); the last step injects no noise."""
    plan.check(schedule)
    x = noise.gaussian(seed, noise.Stream.LATENT, 0, denoiser.dim)
    states = _ancestral(schedule, denoiser, x, plan.transitions, c, plan.delta, seed)
    cid = c.id if hasattr(c, "id") else int(c)
    return Trajectory(states, cid, plan, seed, TrajectoryKind.GENERATE)


def sdedit_entry(plan: TimestepPlan, strength: float) -> int:
    if not 0.0 < strength <= 1.0:
        raise ConfigurationError(f"strength must be in (0, 1], got {strength}")
    return max(1, math.ceil(strength * plan.steps[0]))


def sdedit(schedule, denoiser: Denoiser, plan: TimestepPlan, x0, strength: float, c_hat,
           seed: int) -> Trajectory:
    """Noise ``x0`` to the entry step, then denoise the remaining plan steps under ``c_hat``.

    The entry step is ⌈strength · t_start⌉; the plan steps strictly below it follow.
    """
    plan.check(schedule)
    t_entry = sdedit_entry(plan, strength)
    steps = (t_entry,) + tuple(t for t in plan.steps if t < t_entry)
    sub = TimestepPlan(steps, plan.delta)
    x = forward_noise(schedule, x0, t_entry,
                      noise.gaussian(seed, noise.Stream.ENTRY, t_entry, denoiser.dim))
    states = _ancestral(schedule, denoiser, x, sub.transitions, c_hat, plan.delta, seed)
    cid = c_hat.id if hasattr(c_hat, "id") else int(c_hat)
    return Trajectory(states, cid, sub, seed, TrajectoryKind.SDEDIT, {"strength": strength})
