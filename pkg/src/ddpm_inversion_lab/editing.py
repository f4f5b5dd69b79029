"""Generative editing pass over an inversion record.

Every step rule starts from the stored correction ``v = x_s - μ(x_t, c)``
(clipped on the final step when the record was clipped), so editing with the
source condition replays the inverted trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .denoiser import Condition, Denoiser
from .errors import ConfigurationError
from .inversion import InversionRecord, InversionStep, noised_state, on_the_fly_correction
from .sampler import Trajectory, TrajectoryKind, mu, mu_cfg
from .schedule import NoiseSchedule, TimestepPlan


class EditMode(str, Enum):
    EF = "ef"
    DECOMPOSED = "decomposed"
    PSEUDO = "pseudo"
    CFG_BOTH = "cfg_both"


@dataclass(frozen=True)
class EditConfig:
    """Editing knobs. ``delta`` and ``clip_max`` only apply to on-the-fly edits;
    record-based edits inherit them from the record."""

    mode: EditMode = EditMode.PSEUDO
    w: float = 1.5
    w_p: float = 1.0
    w_t: float = 1.0
    cfg_scale: float = 1.0
    delta: int = 200
    clip_max: float | None = 15.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", EditMode(self.mode))
        if self.w < 0 or self.cfg_scale < 0:
            raise ConfigurationError("w and cfg_scale must be non-negative")
        if self.clip_max is not None and not self.clip_max > 0:
            raise ConfigurationError(f"clip_max must be positive, got {self.clip_max}")

    def to_config(self) -> dict:
        return {
            "mode": self.mode.value, "w": self.w, "w_p": self.w_p, "w_t": self.w_t,
            "cfg_scale": self.cfg_scale, "delta": self.delta, "clip_max": self.clip_max,
        }


def ef_step(schedule, denoiser, step: InversionStep, x_hat, c_hat, delta: int = 0):
    """μ(x̂_t, ĉ) + v_t."""
    return mu(schedule, denoiser, x_hat, step.t, step.s, c_hat, delta) + step.v


def ef_step_rewritten(schedule, denoiser, step: InversionStep, x_hat, c, c_hat, delta: int = 0):
    """x_s + (μ(x̂_t, ĉ) - μ(x_t, c)); ignores clipping, used to cross-check :func:`ef_step`."""
    return step.x_s + (
        mu(schedule, denoiser, x_hat, step.t, step.s, c_hat, delta)
        - mu(schedule, denoiser, step.x_t, step.t, step.s, c, delta)
    )


def decomposed_step(schedule, denoiser, step, x_hat, c, c_hat, w_p=1.0, w_t=1.0, delta=0):
    """Scale the cross-prompt and cross-trajectory terms independently."""
    mu_src = mu(schedule, denoiser, step.x_t, step.t, step.s, c, delta)
    mu_hat_c = mu(schedule, denoiser, x_hat, step.t, step.s, c, delta)
    mu_hat_target = mu(schedule, denoiser, x_hat, step.t, step.s, c_hat, delta)
    cross_prompt = mu_hat_target - mu_hat_c
    cross_trajectory = mu_hat_c - mu_src
    return step.v + mu_src + w_p * cross_prompt + w_t * cross_trajectory


def pseudo_guided_step(schedule, denoiser, step, x_hat, c, c_hat, w=1.5, delta=0):
    """v + μ(x̂_t, c) + w (μ(x̂_t, ĉ) - μ(x̂_t, c))."""
    mu_hat_c = mu(schedule, denoiser, x_hat, step.t, step.s, c, delta)
    mu_hat_target = mu(schedule, denoiser, x_hat, step.t, step.s, c_hat, delta)
    return step.v + mu_hat_c + w * (mu_hat_target - mu_hat_c)


def _record_scale(step) -> float:
    return 1.0 if step.cfg_scale is None else float(step.cfg_scale)


def cfg_both_step(schedule, denoiser, step, x_hat, c_hat, null, cfg_scale, delta=0):
    """v_cfg + μ_cfg(x̂_t, ĉ); the record must have been inverted at the same CFG strength."""
    if _record_scale(step) != float(cfg_scale):
        raise ConfigurationError(
            f"record inverted with cfg scale {_record_scale(step)}, edit requested {cfg_scale}"
        )
    return step.v + mu_cfg(schedule, denoiser, x_hat, step.t, step.s, c_hat, null, cfg_scale, delta)


def cfg_residual(schedule, denoiser, step, x_hat, c, null, delta=0):
    """(μ(x̂,c) - μ(x,c)) - (μ(x̂,φ) - μ(x,φ)).

    One CFG-both step minus one pseudo-guided step at w = λ equals
    (λ - 1) times this vector when both start from the same x̂_t.
    """
    def diff(cond):
        return (mu(schedule, denoiser, x_hat, step.t, step.s, cond, delta)
                - mu(schedule, denoiser, step.x_t, step.t, step.s, cond, delta))
    return diff(c) - diff(null)


def apply_step(schedule, denoiser, step, x_hat, c, c_hat, config: EditConfig, delta: int, null):
    mode = config.mode
    if mode is EditMode.EF:
        return ef_step(schedule, denoiser, step, x_hat, c_hat, delta)
    if mode is EditMode.DECOMPOSED:
        return decomposed_step(schedule, denoiser, step, x_hat, c, c_hat, config.w_p, config.w_t, delta)
    if mode is EditMode.PSEUDO:
        return pseudo_guided_step(schedule, denoiser, step, x_hat, c, c_hat, config.w, delta)
    return cfg_both_step(schedule, denoiser, step, x_hat, c_hat, null, config.cfg_scale, delta)


def _cid(c) -> int:
    return c.id if isinstance(c, Condition) else int(c)


def _kind(c, c_hat) -> TrajectoryKind:
    return TrajectoryKind.RECONSTRUCT if _cid(c) == _cid(c_hat) else TrajectoryKind.EDIT


def edit(schedule: NoiseSchedule, denoiser: Denoiser, record: InversionRecord, c_hat,
         config: EditConfig = EditConfig()) -> Trajectory:
    """Run the configured step rule from the record's x_{t_K} down to x̂_0."""
    record.verify(schedule, denoiser)
    if config.mode is EditMode.CFG_BOTH:
        if float(record.cfg_scale if record.cfg_scale is not None else 1.0) != config.cfg_scale:
            raise ConfigurationError(
                f"cfg_both edit at scale {config.cfg_scale} needs a record inverted at that scale"
            )
    elif record.cfg_scale is not None and record.cfg_scale != 1.0:
        raise ConfigurationError(f"{config.mode.value} edit needs a plain (non-CFG) record")
    null = record.null_condition if record.null_condition is not None else denoiser.null_id
    c = record.condition
    x_hat = record.x_start
    states = [(record.steps[0].t, x_hat)]
    for step in record.steps:
        x_hat = apply_step(schedule, denoiser, step, x_hat, c, c_hat, config, record.plan.delta, null)
        states.append((step.s, x_hat))
    return Trajectory(states, _cid(c_hat), record.plan, record.seed, _kind(c, c_hat),
                      {"mode": config.mode.value, "source_condition": c})


def edit_on_the_fly(schedule: NoiseSchedule, denoiser: Denoiser, plan: TimestepPlan, x0, c,
                    c_hat, seed: int, config: EditConfig = EditConfig()) -> Trajectory:
    """Edit without a precomputed record: each correction is derived from ``x0`` when needed.

    ``plan.delta`` and ``config.clip_max`` control the shift and final-step clip.
    """
    plan.check(schedule)
    x0 = np.asarray(x0, dtype=np.float64)
    cfg_scale = config.cfg_scale if config.mode is EditMode.CFG_BOTH else None
    null = denoiser.null_id
    x_hat = noised_state(schedule, x0, plan.steps[0], seed)
    states = [(plan.steps[0], x_hat)]
    for t, s in plan.transitions:
        x_t, v = on_the_fly_correction(schedule, denoiser, x0, c, (t, s), plan.delta, seed,
                                       config.clip_max, cfg_scale, null)
        step = InversionStep(t, s, x_t, noised_state(schedule, x0, s, seed), v, cfg_scale=cfg_scale)
        x_hat = apply_step(schedule, denoiser, step, x_hat, c, c_hat, config, plan.delta, null)
        states.append((s, x_hat))
    return Trajectory(states, _cid(c_hat), plan, seed, _kind(c, c_hat),
                      {"mode": config.mode.value, "source_condition": _cid(c), "on_the_fly": True})


def guidance_equivalence(schedule, denoiser: Denoiser, plan: TimestepPlan, x0, c, c_hat, w: float,
                         seed: int) -> tuple[float, float]:
    """Compare pseudo-guidance at ``w`` with CFG in both passes at λ = ``w``.

    Returns the max absolute difference between the two edited trajectories
    and the largest norm of :func:`cfg_residual` seen along the pseudo path.
    """
    from .inversion import invert

    null = denoiser.null_id
    plain = invert(schedule, denoiser, plan, x0, c, seed)
    guided = invert(schedule, denoiser, plan, x0, c, seed, cfg_scale=w, null=null)
    pseudo = edit(schedule, denoiser, plain, c_hat, EditConfig(EditMode.PSEUDO, w=w))
    both = edit(schedule, denoiser, guided, c_hat, EditConfig(EditMode.CFG_BOTH, cfg_scale=w))
    diff = max(float(np.max(np.abs(a - b))) for (_, a), (_, b) in zip(pseudo.states, both.states))
    residual = max(
        float(np.linalg.norm(cfg_residual(schedule, denoiser, step, x_hat, c, null, plan.delta)))
        for step, (_, x_hat) in zip(plain.steps, pseudo.states)
    )
    return diff, residual
