"""Monte-Carlo diagnostics: correction-std curves, timestep-offset search and cosine checks."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import noise
from .denoiser import Denoiser
from .errors import ConfigurationError, UndefinedCosineError
from .sampler import forward_noise, mu
from .schedule import NoiseSchedule, TimestepPlan, coefficients


@dataclass(frozen=True)
class CurveRow:
    step: int
    t: int
    s: int
    measured_std: float
    expected_sigma: float
    ci_half: float
    n: int

    @property
    def gap_in_se(self) -> float:
        return (self.measured_std - self.expected_sigma) / self.ci_half


def batched_corrections(schedule, denoiser, plan: TimestepPlan, x0s, seeds, c,
                        noise_fn: Callable | None = None) -> np.ndarray:
    """Corrections v for many sources at once, shape (K, N, dim).

    Row i uses the draws bound to ``seeds[i]``, the same ones :func:`invert` uses.
    """
    x0s = np.asarray(x0s, dtype=np.float64)
    noise_fn = noise_fn or noise.forward_noise_draw
    dim = x0s.shape[1]
    states = {0: x0s}
    for t in plan.steps:
        eps = np.stack([noise_fn(int(sd), t, dim) for sd in seeds])
        states[t] = forward_noise(schedule, x0s, t, eps)
    return np.stack([
        states[s] - mu(schedule, denoiser, states[t], t, s, c, plan.delta)
        for t, s in plan.transitions
    ])


def pooled_std(samples: np.ndarray) -> tuple[float, int]:
    """Per-component std across the sample axis, pooled over components.

    Returns the std and the pooled degrees of freedom.
    """
    n, dim = samples.shape
    var = np.var(samples, axis=0, ddof=1)
    return float(math.sqrt(np.mean(var))), dim * (n - 1)


def correction_std_curve(
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    plan: TimestepPlan,
    data_sampler: Callable[[int], np.ndarray],
    N: int,
    c=1,
    seed: int = 0,
    delta: int | None = None,
    noise_fn: Callable | None = None,
) -> list[CurveRow]:
    """Measured std of the corrections at each plan step against σ_{t→s}.

    ``data_sampler(N)`` supplies the clean sources; inversion seeds are
    ``seed, seed + 1, ...``. ``delta`` overrides the plan's shift. The
    expected column is always the unshifted σ_{t→s}.
    """
    if N < 100:
        raise ConfigurationError(f"need N >= 100 for a stable std estimate, got {N}")
    if delta is not None:
        plan = plan.with_delta(delta)
    plan.check(schedule)
    x0s = np.asarray(data_sampler(N), dtype=np.float64)
    seeds = range(seed, seed + N)
    vs = batched_corrections(schedule, denoiser, plan, x0s, seeds, c, noise_fn)
    rows = []
    for k, ((t, s), v) in enumerate(zip(plan.transitions, vs)):
        std, dof = pooled_std(v)
        rows.append(CurveRow(
            step=k, t=t, s=s, measured_std=std,
            expected_sigma=coefficients(schedule, t, s).sigma,
            # 68% half-width of a normal-theory std estimate
            ci_half=std / math.sqrt(2.0 * dof),
            n=N,
        ))
    return rows


def gaussian_correction_variance(schedule, t: int, s: int, delta: int = 0) -> float:
    """Closed-form per-component Var(v) for N(0, I) data and its exact denoiser.

    The step reduces to μ = √r x_t with r = ᾱ_{t+Δ}/ᾱ_{s+Δ}, so
    Var = 1 + r - 2√r √(ᾱ_s ᾱ_t); for Δ = 0 this is 1 + r - 2 r ᾱ_s.
    """
    r = schedule.alpha_bar(t + delta) / schedule.alpha_bar(s + delta)
    return 1.0 + r - 2.0 * math.sqrt(r) * math.sqrt(schedule.alpha_bar(s) * schedule.alpha_bar(t))


@dataclass(frozen=True)
class OffsetRow:
    t: int
    t_star: int
    offset: int


@dataclass
class OffsetHistogram:
    rows: list[OffsetRow]
    median: float
    iqr: float

    @property
    def offsets(self) -> list[int]:
        return [r.offset for r in self.rows]

    def counts(self, bin_width: int = 50) -> dict[int, int]:
        out: dict[int, int] = {}
        for off in self.offsets:
            key = bin_width * math.floor(off / bin_width)
            out[key] = out.get(key, 0) + 1
        return dict(sorted(out.items()))


def _sigma_table(schedule: NoiseSchedule, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """σ(t' → t' - stride) for every valid t'."""
    cand = np.arange(stride, schedule.max_timestep + 1)
    ab = schedule._alpha_bar_full
    ab_t, ab_s = ab[cand], ab[cand - stride]
    ratio = ab_t / ab_s
    sig = np.sqrt(np.maximum((1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ratio), 0.0))
    return cand, sig


def offset_histogram(schedule: NoiseSchedule, curve, stride_mode: str = "plan") -> OffsetHistogram:
    """For each step find t* whose schedule σ is closest to the measured std.

    ``stride_mode="plan"`` compares against σ(t' → t' - (t - s)), reusing the
    step's own stride; ``"adjacent"`` uses σ(t' → t' - 1) on the dense grid.
    Every valid t' is scanned.
    """
    if not curve:
        raise ConfigurationError("offset histogram needs a non-empty curve table")
    if stride_mode not in ("plan", "adjacent"):
        raise ConfigurationError(f"unknown stride mode {stride_mode!r}")
    rows = []
    for row in curve:
        stride = row.t - row.s if stride_mode == "plan" else 1
        cand, sig = _sigma_table(schedule, stride)
        t_star = int(cand[int(np.argmin(np.abs(sig - row.measured_std)))])
        rows.append(OffsetRow(row.t, t_star, t_star - row.t))
    offsets = np.array([r.offset for r in rows], dtype=float)
    q1, med, q3 = np.percentile(offsets, [25, 50, 75])
    return OffsetHistogram(rows, float(med), float(q3 - q1))


def suggest_shift(schedule: NoiseSchedule, plan: TimestepPlan, hist: OffsetHistogram) -> int:
    """Median offset rounded and capped so the plan stays inside the table."""
    cap = schedule.max_timestep - max(plan.steps)
    return int(min(max(round(hist.median), 0), cap))


def _cos(a, b) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise UndefinedCosineError("cosine of a zero-norm vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def cosine_diagnostics(schedule, denoiser: Denoiser, step, x_hat, c, c_hat, null,
                       delta: int = 0) -> tuple[float, float]:
    """(cos_a, cos_b) at one step.

    cos_a compares the cross-trajectory differences under c and under φ;
    cos_b is the mean cosine of those two against the cross-prompt term.
    """
    def m(x, cond):
        return mu(schedule, denoiser, x, step.t, step.s, cond, delta)

    traj_c = m(x_hat, c) - m(step.x_t, c)
    traj_null = m(x_hat, null) - m(step.x_t, null)
    cross_prompt = m(x_hat, c_hat) - m(x_hat, c)
    cos_a = _cos(traj_c, traj_null)
    cos_b = 0.5 * (_cos(traj_c, cross_prompt) + _cos(traj_null, cross_prompt))
    return cos_a, cos_b


def write_curve_csv(rows: list[CurveRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "t", "measured_std", "expected_sigma", "ci_half"])
        for r in rows:
            writer.writerow([r.step, r.t, repr(r.measured_std), repr(r.expected_sigma), repr(r.ci_half)])


def write_histogram_csv(hist: OffsetHistogram, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "t_star", "offset"])
        for r in hist.rows:
            writer.writerow([r.t, r.t_star, r.offset])


def write_cosine_csv(rows: list[tuple[int, float, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "cos_a", "cos_b"])
        for t, a, b in rows:
            writer.writerow([t, repr(a), repr(b)])


def curve_as_dicts(rows: list[CurveRow]) -> list[dict]:
    return [asdict(r) for r in rows]


def cosine_survey(schedule, denoiser: Denoiser, plan: TimestepPlan, x0s, c, c_hat, w: float = 1.5,
                  seed: int = 0) -> list[tuple[int, float, float]]:
    """Cosine diagnostics along pseudo-guided edits of many sources.

    Steps where the edited and source states still coincide have undefined
    cosines and are skipped.
    """
    from .editing import pseudo_guided_step
    from .inversion import invert

    null = denoiser.null_id
    out = []
    for i, x0 in enumerate(np.asarray(x0s, dtype=np.float64)):
        record = invert(schedule, denoiser, plan, x0, c, seed + i)
        x_hat = record.x_start
        for step in record.steps:
            try:
                a, b = cosine_diagnostics(schedule, denoiser, step, x_hat, c, c_hat, null, plan.delta)
                out.append((step.t, a, b))
            except UndefinedCosineError:
                pass
            x_hat = pseudo_guided_step(schedule, denoiser, step, x_hat, c, c_hat, w, plan.delta)
    return out
