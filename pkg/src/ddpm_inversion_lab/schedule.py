"""Noise schedule tables, strided step coefficients and few-step timestep plans.

Tables are indexed by integer timestep. ``betas[t - 1]`` holds β_t for
t = 1..T, and the convention ᾱ_0 = 1 makes timestep 0 the clean state, so a
transition into ``s = 0`` returns the predicted clean sample with no noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import BoundsError, ConfigurationError, OrderingError


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    SCALED_LINEAR = "scaled_linear"
    CONSTANT = "constant"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """β/α/ᾱ tables for a T-step diffusion.

    ``betas``, ``alphas`` and ``alpha_bars`` have length T and describe
    timesteps 1..T. Use :meth:`alpha_bar` for lookups that include t = 0.
    """

    kind: ScheduleKind
    beta_start: float
    beta_end: float
    T: int
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    _alpha_bar_full: np.ndarray = field(repr=False)

    @property
    def max_timestep(self) -> int:
        """Largest timestep a plan or transition may touch."""
        return self.T - 1

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise BoundsError(f"timestep {t} outside [0, {self.T}]")
        return float(self._alpha_bar_full[t])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise BoundsError(f"timestep {t} outside [1, {self.T}]")
        return float(self.betas[t - 1])

    def to_config(self) -> dict:
        return {
            "kind": self.kind.value,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "T": self.T,
        }

    @classmethod
    def from_config(cls, config: dict) -> "NoiseSchedule":
        try:
            return build_schedule(
                config["kind"], config["beta_start"], config["beta_end"], config["T"]
            )
        except KeyError as exc:
            raise ConfigurationError(f"schedule config missing field {exc.args[0]!r}") from None

    def dump_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "beta", "alpha", "alpha_bar"])
            for t in range(1, self.T + 1):
                writer.writerow(
                    [t, repr(float(self.betas[t - 1])), repr(float(self.alphas[t - 1])),
                     repr(float(self.alpha_bars[t - 1]))]
                )


def build_schedule(
    kind: str | ScheduleKind = ScheduleKind.SCALED_LINEAR,
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
    T: int = 1000,
) -> NoiseSchedule:
    """Build the β table for ``kind`` and derive α and ᾱ.

    ``scaled_linear`` interpolates √β linearly (the Stable Diffusion
    convention); ``constant`` uses ``beta_start`` everywhere.
    """
    try:
        kind = ScheduleKind(kind)
    except ValueError:
        raise ConfigurationError(f"unknown schedule kind {kind!r}") from None
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigurationError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    T = int(T)
    if kind is ScheduleKind.LINEAR:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind is ScheduleKind.SCALED_LINEAR:
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    else:
        betas = np.full(T, beta_start, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    full = np.concatenate([[1.0], alpha_bars])
    for arr in (betas, alphas, alpha_bars, full):
        arr.setflags(write=False)
    return NoiseSchedule(kind, float(beta_start), float(beta_end), T, betas, alphas, alpha_bars, full)


@dataclass(frozen=True)
class StepCoefficients:
    """Coefficients of the η=1 transition from timestep ``t`` to ``s``.

    The posterior mean is ``a * (x - b * eps)`` and the fresh-noise scale is
    ``sigma``. ``c`` and ``d`` are the forward-noising weights at ``t``.
    """

    t: int
    s: int
    a: float
    b: float
    c: float
    d: float
    sigma: float

    @property
    def alpha_ratio(self) -> float:
        """α_{t→s} = ᾱ_t / ᾱ_s."""
        return 1.0 / (self.a * self.a)


def coefficients(schedule: NoiseSchedule, t: int, s: int) -> StepCoefficients:
    if s >= t:
        raise OrderingError(f"target {s} must be strictly below source {t}")
    if s < 0 or t > schedule.max_timestep:
        raise BoundsError(f"transition {t}->{s} outside [0, {schedule.max_timestep}]")
    ab_t = schedule.alpha_bar(t)
    ab_s = schedule.alpha_bar(s)
    ratio = ab_t / ab_s
    one_minus_t = 1.0 - ab_t
    var = (1.0 - ab_s) / one_minus_t * (1.0 - ratio)
    return StepCoefficients(
        t=t,
        s=s,
        a=1.0 / math.sqrt(ratio),
        b=(1.0 - ratio) / math.sqrt(one_minus_t),
        c=math.sqrt(ab_t),
        d=math.sqrt(one_minus_t),
        sigma=math.sqrt(max(var, 0.0)),
    )


@dataclass(frozen=True)
class TimestepPlan:
    """Descending source timesteps, their targets and the shift Δ."""

    steps: tuple[int, ...]
    delta: int = 0

    def __post_init__(self) -> None:
        steps = tuple(int(t) for t in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ConfigurationError("a plan needs at least one step")
        if any(t < 1 for t in steps):
            raise BoundsError(f"plan steps must be >= 1, got {list(steps)}")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ConfigurationError(f"plan steps must be strictly descending, got {list(steps)}")
        if isinstance(self.delta, bool) or int(self.delta) != self.delta or self.delta < 0:
            raise ConfigurationError(f"delta must be a non-negative integer, got {self.delta!r}")
        object.__setattr__(self, "delta", int(self.delta))

    @property
    def targets(self) -> tuple[int, ...]:
        return self.steps[1:] + (0,)

    @property
    def transitions(self) -> list[tuple[int, int]]:
        return list(zip(self.steps, self.targets))

    @property
    def K(self) -> int:
        return len(self.steps)

    def with_delta(self, delta: int) -> "TimestepPlan":
        return TimestepPlan(self.steps, delta)

    def check(self, schedule: NoiseSchedule) -> "TimestepPlan":
        """Raise :class:`BoundsError` if any shifted step leaves the table."""
        bad = [t for t in self.steps if t + self.delta > schedule.max_timestep]
        if bad:
            raise BoundsError(
                f"steps {bad} exceed {schedule.max_timestep} after shift delta={self.delta}"
            )
        return self

    def to_config(self) -> dict:
        return {"steps": list(self.steps), "delta": self.delta}

    @classmethod
    def from_config(cls, config: dict) -> "TimestepPlan":
        return cls(tuple(config["steps"]), config.get("delta", 0))


def plan_timesteps(
    schedule: NoiseSchedule,
    K: int = 4,
    t_start: int = 599,
    delta: int = 0,
    stride: int | None = None,
    steps: list[int] | None = None,
) -> TimestepPlan:
    """Few-step plan starting at ``t_start``.

    Without ``stride`` the interval [0, t_start] is partitioned uniformly,
    e.g. K=4 from 599 gives [599, 449, 299, 149]. An explicit ``steps`` list
    overrides K, t_start and stride.
    """
    if steps is None:
        if K < 1:
            raise ConfigurationError(f"K must be >= 1, got {K}")
        if K > t_start:
            raise ConfigurationError(f"cannot fit K={K} distinct steps in [1, {t_start}]")
        if stride is None:
            steps = [t_start - (i * (t_start + 1)) // K for i in range(K)]
        else:
            if stride < 1:
                raise ConfigurationError(f"stride must be >= 1, got {stride}")
            steps = [t_start - i * stride for i in range(K)]
    return TimestepPlan(tuple(steps), delta).check(schedule)
