"""Experiment configuration: file loading, env/flag overrides and hashing.

Precedence is flag > environment (``DIL_*``) > config file > default.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import denoiser as den
from .denoiser import Denoiser, content_hash
from .editing import EditConfig
from .errors import ConfigurationError
from .schedule import NoiseSchedule, TimestepPlan, build_schedule, plan_timesteps


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScheduleSection(_Strict):
    kind: Literal["linear", "scaled_linear", "constant"] = "scaled_linear"
    beta_start: float = 0.00085
    beta_end: float = 0.012
    T: int = 1000


class DenoiserSection(_Strict):
    """Either a named toy (``toy`` + its knobs) or a full serialized denoiser (``params``)."""

    toy: Optional[Literal["gmm", "gaussian", "linear_random", "additive"]] = "gmm"
    dim: int = Field(8, ge=1)
    separation: float = 2.0
    scale: float = 0.5
    purity: float = 0.95
    mean: float = 0.0
    target_mean: Optional[float] = None
    seed: int = 0
    params: Optional[dict[str, Any]] = None


class PlanSection(_Strict):
    K: int = Field(4, ge=1)
    t_start: int = Field(599, ge=1)
    delta: int = Field(200, ge=0)
    steps: Optional[list[int]] = None


class EditSection(_Strict):
    mode: Literal["ef", "decomposed", "pseudo", "cfg_both"] = "pseudo"
    w: float = Field(1.5, ge=0)
    w_p: float = 1.0
    w_t: float = 1.0
    cfg_scale: float = Field(1.0, ge=0)
    clip_max: Optional[float] = Field(15.5, gt=0)


class ExperimentConfig(_Strict):
    schedule: ScheduleSection = ScheduleSection()
    denoiser: DenoiserSection = DenoiserSection()
    plan: PlanSection = PlanSection()
    edit: EditSection = EditSection()
    source_condition: int = 1
    target_condition: int = 2
    seed: int = Field(0, ge=0, lt=2**64)
    n: int = Field(10_000, ge=1)
    out: str = "dil_out"

    # -- construction -----------------------------------------------------

    def build_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return build_schedule(s.kind, s.beta_start, s.beta_end, s.T)

    def build_denoiser(self, schedule: NoiseSchedule) -> Denoiser:
        d = self.denoiser
        if d.params is not None:
            return den.from_config(schedule, d.params)
        if d.toy == "gmm":
            return den.toy_gmm(schedule, d.dim, d.separation, d.scale, d.purity)
        if d.toy == "gaussian":
            return den.matched_gaussian(schedule, d.dim, d.mean, d.scale, d.target_mean)
        if d.toy == "linear_random":
            return den.random_linear(schedule, d.dim, d.seed)
        if d.toy == "additive":
            return den.random_additive(schedule, d.dim, d.seed)
        raise ConfigurationError("denoiser section needs either 'toy' or 'params'")

    def build_plan(self, schedule: NoiseSchedule) -> TimestepPlan:
        p = self.plan
        return plan_timesteps(schedule, p.K, p.t_start, p.delta, steps=p.steps)

    def edit_config(self) -> EditConfig:
        e = self.edit
        return EditConfig(e.mode, e.w, e.w_p, e.w_t, e.cfg_scale, self.plan.delta, e.clip_max)

    def config_hash(self) -> str:
        return content_hash(self.model_dump(mode="json", exclude={"out"}))


# flag/env name -> dotted config path
OVERRIDES = {
    "seed": "seed",
    "out": "out",
    "steps": "plan.K",
    "t_start": "plan.t_start",
    "delta": "plan.delta",
    "w": "edit.w",
    "clip_norm": "edit.clip_max",
    "mode": "edit.mode",
    "n": "n",
}


def _set_path(data: dict, path: str, value) -> None:
    *head, last = path.split(".")
    node = data
    for key in head:
        node = node.setdefault(key, {})
    node[last] = value


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def load_config(path: str | Path | None = None, flags: dict | None = None,
                environ: dict | None = None) -> ExperimentConfig:
    """Merge defaults, the JSON file, ``DIL_*`` environment variables and flags."""
    environ = os.environ if environ is None else environ
    path = path or environ.get("DIL_CONFIG")
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigurationError("config root must be a JSON object")
    for name, dotted in OVERRIDES.items():
        env_value = environ.get(f"DIL_{name.upper()}")
        if env_value is not None:
            _set_path(data, dotted, None if env_value.lower() == "none" else env_value)
    for name, value in (flags or {}).items():
        if value is not None and name in OVERRIDES:
            _set_path(data, OVERRIDES[name], value)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(_format_error(exc)) from None
