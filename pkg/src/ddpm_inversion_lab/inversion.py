"""Edit-friendly DDPM inversion with optional time shift and final-step clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import noise
from .denoiser import Condition, Denoiser, content_hash
from .errors import ConfigurationError, IntegrityError, ShapeError
from .sampler import forward_noise, mu, mu_cfg
from .schedule import NoiseSchedule, TimestepPlan


@dataclass
class InversionStep:
    t: int
    s: int
    x_t: np.ndarray
    x_s: np.ndarray
    v: np.ndarray
    clipped: bool = False
    cfg_scale: float | None = None


@dataclass
class InversionRecord:
    """Everything needed to replay an edit of ``x0``.

    ``cfg_scale`` is None for plain inversion; otherwise corrections were
    computed with CFG at that strength against ``null_condition``.
    """

    schedule_hash: str
    denoiser_hash: str
    plan: TimestepPlan
    seed: int
    x0: np.ndarray
    condition: int
    steps: list[InversionStep]
    clip_max: float | None = None
    cfg_scale: float | None = None
    null_condition: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def x_start(self) -> np.ndarray:
        return self.steps[0].x_t

    def verify(self, schedule: NoiseSchedule, denoiser: Denoiser) -> None:
        if schedule_hash(schedule) != self.schedule_hash:
            raise IntegrityError("record was produced with a different schedule")
        if denoiser.content_hash() != self.denoiser_hash:
            raise IntegrityError("record was produced with a different denoiser")

    def to_json(self) -> dict:
        return {
            "schedule_hash": self.schedule_hash,
            "denoiser_hash": self.denoiser_hash,
            "plan": self.plan.to_config(),
            "seed": self.seed,
            "x0": self.x0.tolist(),
            "condition": self.condition,
            "clip_max": self.clip_max,
            "cfg_scale": self.cfg_scale,
            "null_condition": self.null_condition,
            "meta": self.meta,
            "steps": [
                {"t": st.t, "s": st.s, "x_t": st.x_t.tolist(), "v": st.v.tolist(), "clipped": st.clipped}
                for st in self.steps
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "InversionRecord":
        try:
            x0 = np.array(data["x0"], dtype=np.float64)
            raw = data["steps"]
            xs = [np.array(st["x_t"], dtype=np.float64) for st in raw] + [x0]
            steps = [
                InversionStep(int(st["t"]), int(st["s"]), xs[i], xs[i + 1],
                              np.array(st["v"], dtype=np.float64), bool(st["clipped"]),
                              data.get("cfg_scale"))
                for i, st in enumerate(raw)
            ]
            return cls(
                schedule_hash=data["schedule_hash"],
                denoiser_hash=data["denoiser_hash"],
                plan=TimestepPlan.from_config(data["plan"]),
                seed=int(data["seed"]),
                x0=x0,
                condition=int(data["condition"]),
                steps=steps,
                clip_max=data.get("clip_max"),
                cfg_scale=data.get("cfg_scale"),
                null_condition=data.get("null_condition"),
                meta=data.get("meta", {}),
            )
        except (KeyError, TypeError) as exc:
            raise IntegrityError(f"malformed inversion record: {exc}") from None


def schedule_hash(schedule: NoiseSchedule) -> str:
    return content_hash(schedule.to_config())


def clip_correction(v, max_norm: float) -> np.ndarray:
    """Rescale ``v`` so its Euclidean norm does not exceed ``max_norm``."""
    if not max_norm > 0:
        raise ConfigurationError(f"max_norm must be positive, got {max_norm}")
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= max_norm:
        return v
    factor = max_norm / norm
    out = v * factor
    # rounding can leave the result a few ulps above the ceiling
    while float(np.linalg.norm(out)) > max_norm:
        factor = math.nextafter(factor, 0.0)
        out = v * factor
    return out


def _cid(c) -> int:
    return c.id if isinstance(c, Condition) else int(c)


def _correction(schedule, denoiser, x_t, x_s, t, s, c, delta, clip_max, cfg_scale, null):
    if cfg_scale is None:
        pred = mu(schedule, denoiser, x_t, t, s, c, delta)
    else:
        pred = mu_cfg(schedule, denoiser, x_t, t, s, c, null, cfg_scale, delta)
    v = x_s - pred
    clipped = False
    if s == 0 and clip_max is not None:
        clipped_v = clip_correction(v, clip_max)
        clipped = clipped_v is not v
        v = clipped_v
    return v, clipped


def noised_state(schedule, x0, t: int, seed: int) -> np.ndarray:
    """x_t from ``x0`` with the ε̃_t bound to (seed, t); t = 0 returns ``x0``."""
    if t == 0:
        return np.asarray(x0, dtype=np.float64)
    return forward_noise(schedule, x0, t, noise.forward_noise_draw(seed, t, len(x0)))


def invert(
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    plan: TimestepPlan,
    x0,
    c,
    seed: int,
    clip_max: float | None = None,
    cfg_scale: float | None = None,
    null=None,
) -> InversionRecord:
    """Noise ``x0`` independently to every plan step and solve for the corrections.

    With ``cfg_scale`` set, the corrections use the CFG-combined step against
    ``null`` (default: the denoiser's null condition).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (denoiser.dim,):
        raise ShapeError(f"x0 shape {x0.shape} != ({denoiser.dim},)")
    plan.check(schedule)
    if cfg_scale is not None and null is None:
        null = denoiser.null_id
    states = {t: noised_state(schedule, x0, t, seed) for t in plan.steps}
    states[0] = x0
    steps = []
    for t, s in plan.transitions:
        v, clipped = _correction(schedule, denoiser, states[t], states[s], t, s, c,
                                 plan.delta, clip_max, cfg_scale, null)
        steps.append(InversionStep(t, s, states[t], states[s], v, clipped, cfg_scale))
    return InversionRecord(
        schedule_hash=schedule_hash(schedule),
        denoiser_hash=denoiser.content_hash(),
        plan=plan,
        seed=int(seed),
        x0=x0,
        condition=_cid(c),
        steps=steps,
        clip_max=clip_max,
        cfg_scale=cfg_scale,
        null_condition=None if null is None else _cid(null),
    )


def on_the_fly_correction(
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    x0,
    c,
    step: tuple[int, int],
    delta: int,
    seed: int,
    clip_max: float | None = None,
    cfg_scale: float | None = None,
    null=None,
) -> tuple[np.ndarray, np.ndarray]:
    """(x_t, v_t) for a single transition, computed straight from ``x0``.

    Uses the same seeded draws as :func:`invert`, so the result matches the
    corresponding record entry exactly.
    """
    t, s = step
    x0 = np.asarray(x0, dtype=np.float64)
    if cfg_scale is not None and null is None:
        null = denoiser.null_id
    x_t = noised_state(schedule, x0, t, seed)
    x_s = noised_state(schedule, x0, s, seed)
    v, _ = _correction(schedule, denoiser, x_t, x_s, t, s, c, delta, clip_max, cfg_scale, null)
    return x_t, v
