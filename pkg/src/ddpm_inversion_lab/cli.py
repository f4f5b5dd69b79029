"""``dil`` command-line front end.

Exit codes: 0 success, 1 check failure, 2 usage/configuration error,
3 integrity error (record does not match the configured schedule/denoiser).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, dds
from .config import ExperimentConfig, load_config
from .denoiser import condition_responsibility, draw_sources, matched_gaussian, random_additive
from .editing import EditConfig, EditMode, edit, edit_on_the_fly, guidance_equivalence
from .errors import ConfigurationError, IntegrityError, LabError
from .inversion import InversionRecord, invert
from .sampler import sdedit

RECONSTRUCTION_TOL = 1e-6
EQUIVALENCE_TOL = 1e-9


class Context:
    """Objects built once from the resolved config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.schedule = cfg.build_schedule()
        self.denoiser = cfg.build_denoiser(self.schedule)
        self.plan = cfg.build_plan(self.schedule)
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = cfg.config_hash()

    def write_json(self, name: str, payload: dict) -> Path:
        path = self.out / name
        payload = {"config_hash": self.hash, **payload}
        path.write_text(json.dumps(payload, sort_keys=True, indent=1))
        return path

    def manifest(self, command: str, outputs: list[Path], summary: str) -> None:
        self.write_json(f"manifest_{command}.json", {
            "command": command,
            "config": self.cfg.model_dump(mode="json"),
            "outputs": [p.name for p in outputs],
            "summary": summary,
        })

    def source(self, seed: int) -> np.ndarray:
        return draw_sources(self.denoiser, self.cfg.source_condition, seed)[0]


def _responsibility(ctx: Context, x, target) -> float:
    try:
        return float(condition_responsibility(ctx.denoiser, x, target))
    except ConfigurationError:
        return float("nan")


# -- subcommands -----------------------------------------------------------


def cmd_schedule_dump(ctx: Context, args) -> int:
    csv_path = ctx.out / "schedule.csv"
    ctx.schedule.dump_csv(csv_path)
    json_path = ctx.write_json("schedule.json", ctx.schedule.to_config())
    summary = f"schedule {ctx.schedule.kind.value} T={ctx.schedule.T} alpha_bar[T]={ctx.schedule.alpha_bars[-1]!r}"
    ctx.manifest("schedule-dump", [csv_path, json_path], summary)
    print(summary)
    return 0


def cmd_invert(ctx: Context, args) -> int:
    cfg = ctx.cfg
    cfg_scale = cfg.edit.cfg_scale if cfg.edit.mode == "cfg_both" else None
    record = invert(ctx.schedule, ctx.denoiser, ctx.plan, ctx.source(cfg.seed), cfg.source_condition,
                    cfg.seed, cfg.edit.clip_max, cfg_scale)
    path = ctx.write_json(args.record or "record.json", record.to_json())
    summary = (f"inverted seed={cfg.seed} steps={list(ctx.plan.steps)} delta={ctx.plan.delta} "
               f"final_clipped={record.steps[-1].clipped} -> {path}")
    ctx.manifest("invert", [path], summary)
    print(summary)
    return 0


def _load_record(ctx: Context, name: str | None) -> InversionRecord:
    path = Path(name) if name else ctx.out / "record.json"
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read record {path}: {exc}") from None
    return InversionRecord.from_json(data)


SUMMARY_COLUMNS = ["seed", "mode", "w", "distance_to_source", "target_responsibility"]


def cmd_edit(ctx: Context, args) -> int:
    cfg = ctx.cfg
    target = cfg.target_condition if args.target is None else args.target
    econf = cfg.edit_config()
    if args.on_the_fly:
        x0 = ctx.source(cfg.seed)
        traj = edit_on_the_fly(ctx.schedule, ctx.denoiser, ctx.plan, x0, cfg.source_condition,
                               target, cfg.seed, econf)
        seed = cfg.seed
    else:
        record = _load_record(ctx, args.record)
        traj = edit(ctx.schedule, ctx.denoiser, record, target, econf)
        x0, seed = record.x0, record.seed
    traj_path = ctx.write_json("trajectory.json", traj.to_json())
    distance = float(np.linalg.norm(traj.final - x0))
    row = [seed, econf.mode.value, econf.w, repr(distance),
           repr(_responsibility(ctx, traj.final, target))]
    csv_path = ctx.out / "edit_summary.csv"
    new = not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(SUMMARY_COLUMNS)
        writer.writerow(row)
    summary = ",".join(str(v) for v in row)
    ctx.manifest("edit", [traj_path, csv_path], summary)
    print(summary)
    return 0


def cmd_reconstruct_check(ctx: Context, args) -> int:
    cfg = ctx.cfg
    worst = 0.0
    any_clipped = False
    for i in range(args.count):
        seed = cfg.seed + i
        x0 = ctx.source(seed)
        record = invert(ctx.schedule, ctx.denoiser, ctx.plan, x0, cfg.source_condition, seed,
                        cfg.edit.clip_max)
        any_clipped |= record.steps[-1].clipped
        traj = edit(ctx.schedule, ctx.denoiser, record, cfg.source_condition, EditConfig(EditMode.EF))
        worst = max(worst, float(np.linalg.norm(traj.final - x0) / np.linalg.norm(x0)))
    ok = worst <= RECONSTRUCTION_TOL
    summary = (f"reconstruct-check count={args.count} max_rel_err={worst:.3e} "
               f"clipped={any_clipped} {'PASS' if ok else 'FAIL'}")
    ctx.manifest("reconstruct-check", [], summary)
    print(summary)
    return 0 if ok else 1


def cmd_equiv_dds(ctx: Context, args) -> int:
    configs = dds.random_equivalence_configs(args.configs, ctx.cfg.seed, args.lr_mode)
    rows = dds.ef_dds_equivalence_report(ctx.schedule, configs)
    path = ctx.out / "equiv_dds.csv"
    dds.write_report(rows, path)
    worst = max(r["max_abs_diff"] for r in rows)
    ok = worst <= EQUIVALENCE_TOL
    summary = f"equiv-dds configs={len(rows)} lr_mode={args.lr_mode} max_abs_diff={worst:.3e} {'PASS' if ok else 'FAIL'}"
    ctx.manifest("equiv-dds", [path], summary)
    print(summary)
    return 0 if ok else 1


def cmd_equiv_cfg(ctx: Context, args) -> int:
    rng = np.random.default_rng(ctx.cfg.seed)
    rows = []
    for i in range(args.configs):
        dim = int(rng.integers(2, 17))
        den_seed = int(rng.integers(0, 2**31))
        den = random_additive(ctx.schedule, dim, den_seed)
        x0 = rng.standard_normal(dim)
        for w in args.w_values:
            diff, residual = guidance_equivalence(ctx.schedule, den, ctx.plan, x0, 1, 2, w, den_seed)
            rows.append({"config": i, "dim": dim, "denoiser_seed": den_seed, "w": w,
                         "max_abs_diff": diff, "residual_norm": residual})
    path = ctx.out / "equiv_cfg.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    worst = max(r["max_abs_diff"] for r in rows)
    ok = worst <= EQUIVALENCE_TOL
    summary = (f"equiv-cfg configs={args.configs} max_abs_diff={worst:.3e} "
               f"max_residual={max(r['residual_norm'] for r in rows):.3e} {'PASS' if ok else 'FAIL'}")
    ctx.manifest("equiv-cfg", [path], summary)
    print(summary)
    return 0 if ok else 1


def _curve(ctx: Context, args):
    cfg = ctx.cfg
    if args.toy == "gaussian":
        den = matched_gaussian(ctx.schedule, ctx.denoiser.dim)
        def sampler(n):
            return den.sample(1, cfg.seed, n)
    else:
        den = ctx.denoiser
        def sampler(n):
            return draw_sources(den, cfg.source_condition, cfg.seed, n)
    return analysis.correction_std_curve(ctx.schedule, den, ctx.plan, sampler, cfg.n,
                                         c=cfg.source_condition, seed=cfg.seed)


def cmd_stats(ctx: Context, args) -> int:
    rows = _curve(ctx, args)
    path = ctx.out / "curve.csv"
    analysis.write_curve_csv(rows, path)
    above = all(r.measured_std > r.expected_sigma for r in rows)
    summary = f"stats n={ctx.cfg.n} delta={ctx.plan.delta} measured_above_expected={str(above).lower()}"
    ctx.manifest("stats", [path], summary)
    print(summary)
    return 0


def cmd_offsets(ctx: Context, args) -> int:
    rows = _curve(ctx, args)
    hist = analysis.offset_histogram(ctx.schedule, rows, args.stride_mode)
    path = ctx.out / "offsets.csv"
    analysis.write_histogram_csv(hist, path)
    summary = f"offsets median={hist.median} iqr={hist.iqr} offsets={hist.offsets}"
    ctx.manifest("offsets", [path], summary)
    print(summary)
    return 0


def cmd_cosine(ctx: Context, args) -> int:
    cfg = ctx.cfg
    x0s = draw_sources(ctx.denoiser, cfg.source_condition, cfg.seed, args.count)
    rows = analysis.cosine_survey(ctx.schedule, ctx.denoiser, ctx.plan, x0s, cfg.source_condition,
                                  cfg.target_condition, cfg.edit.w, cfg.seed)
    path = ctx.out / "cosine.csv"
    analysis.write_cosine_csv(rows, path)
    if rows:
        summary = (f"cosine samples={len(rows)} mean_cos_a={np.mean([r[1] for r in rows]):.4f} "
                   f"mean_cos_b={np.mean([r[2] for r in rows]):.4f}")
    else:
        summary = "cosine samples=0"
    ctx.manifest("cosine", [path], summary)
    print(summary)
    return 0


def cmd_sdedit(ctx: Context, args) -> int:
    cfg = ctx.cfg
    target = cfg.target_condition if args.target is None else args.target
    x0 = ctx.source(cfg.seed)
    traj = sdedit(ctx.schedule, ctx.denoiser, ctx.plan, x0, args.strength, target, cfg.seed)
    path = ctx.write_json("sdedit_trajectory.json", traj.to_json())
    summary = (f"sdedit strength={args.strength} entry={traj.states[0][0]} "
               f"distance_to_source={float(np.linalg.norm(traj.final - x0))!r} "
               f"target_responsibility={_responsibility(ctx, traj.final, target)!r}")
    ctx.manifest("sdedit", [path], summary)
    print(summary)
    return 0


COMMANDS = {
    "schedule-dump": cmd_schedule_dump,
    "invert": cmd_invert,
    "edit": cmd_edit,
    "reconstruct-check": cmd_reconstruct_check,
    "equiv-dds": cmd_equiv_dds,
    "equiv-cfg": cmd_equiv_cfg,
    "stats": cmd_stats,
    "offsets": cmd_offsets,
    "cosine": cmd_cosine,
    "sdedit": cmd_sdedit,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--steps", type=int, help="number of denoising steps K")
    common.add_argument("--t-start", type=int)
    common.add_argument("--delta", type=int, help="timestep shift")
    common.add_argument("--w", type=float, help="pseudo-guidance scale")
    common.add_argument("--clip-norm", help="final-step correction norm ceiling, or 'none'")
    common.add_argument("--mode", choices=[m.value for m in EditMode])
    common.add_argument("--n", "--N", dest="n", type=int, help="Monte-Carlo sample count")

    parser = argparse.ArgumentParser(prog="dil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    sub.choices["invert"].add_argument("--record", help="record file name inside --out")
    p = sub.choices["edit"]
    p.add_argument("--record", help="path to an inversion record JSON")
    p.add_argument("--target", type=int, help="target condition id")
    p.add_argument("--on-the-fly", action="store_true", help="skip the record, derive corrections per step")
    sub.choices["reconstruct-check"].add_argument("--count", type=int, default=10)
    p = sub.choices["equiv-dds"]
    p.add_argument("--configs", type=int, default=50)
    p.add_argument("--lr-mode", choices=[m.value for m in dds.LrMode], default="matched")
    p = sub.choices["equiv-cfg"]
    p.add_argument("--configs", type=int, default=100)
    p.add_argument("--w-values", type=float, nargs="+", default=[1.0, 1.5, 2.0, 3.0])
    for name in ("stats", "offsets"):
        sub.choices[name].add_argument("--toy", choices=["config", "gaussian"], default="config")
    sub.choices["offsets"].add_argument("--stride-mode", choices=["plan", "adjacent"], default="plan")
    sub.choices["cosine"].add_argument("--count", type=int, default=100)
    p = sub.choices["sdedit"]
    p.add_argument("--strength", type=float, default=0.5)
    p.add_argument("--target", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: getattr(args, k, None) for k in
             ("seed", "out", "steps", "t_start", "delta", "w", "clip_norm", "mode", "n")}
    if flags["clip_norm"] is not None and flags["clip_norm"].lower() == "none":
        flags["clip_norm"] = None
        clip_disabled = True
    else:
        clip_disabled = False
    try:
        cfg = load_config(args.config, flags)
        if clip_disabled:
            cfg = cfg.model_copy(update={"edit": cfg.edit.model_copy(update={"clip_max": None})})
        return COMMANDS[args.command](Context(cfg), args)
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return 3
    except LabError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
