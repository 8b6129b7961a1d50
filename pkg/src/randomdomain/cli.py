"""Command-line front end.

    randomdomain run      --config cfg.ini [--out DIR] [--workers K]
    randomdomain converge --config cfg.ini [--w-max W] [--ns-list 2,3,4] [--floors]
    randomdomain truncate --config cfg.ini [--ns-list 2,3,4,6]
    randomdomain plan     [--config cfg.ini] [--tol X]
    randomdomain diag     --config cfg.ini
    randomdomain config   [--config cfg.ini]

Failures print a single ``error: <kind>: <reason>`` line to stderr.  Exit
codes: 0 success, 1 failed validation or computation, 2 usage error or
missing config file.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import AppConfig, ConfigError, config_hash, dump_config, load_config, with_overrides
from .deformation import DeformationError
from .diagnostics import region_diagnostics
from .fem import ConvergenceError, FEMError
from .sparse_grid import SparseGridError, format_key
from .uq import (
    CollocationError,
    PlanOverflowError,
    StudyError,
    build_model,
    complexity_plan,
    convergence_study,
    default_workers,
    loglog_slope,
    open_cache,
    reference_moments,
    run_collocation,
    saturation_floors,
    truncation_study,
)

_HANDLED = (
    ConfigError, StudyError, DeformationError, CollocationError, PlanOverflowError,
    SparseGridError, FEMError, ConvergenceError,
)


def _fmt(v) -> str:
    if isinstance(v, bool) or v is None:
        return str(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return f"{v:.17e}"
    return str(v)


def write_csv(path: Path, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


class Manifest:
    """``manifest.json`` in the output directory, one entry per emitted CSV."""

    def __init__(self, out: Path, cfg: AppConfig):
        self.path = out / "manifest.json"
        self.data = {"artifact_version": __version__, "entries": {}}
        if self.path.exists():
            try:
                self.data = json.loads(self.path.read_text())
            except json.JSONDecodeError:
                pass
        self.data["artifact_version"] = __version__
        self.hash = config_hash(cfg)

    def record(self, study: str, outputs, status: str, started: str) -> None:
        for p in outputs:
            self.data["entries"][str(p)] = dict(
                study=study,
                status=status,
                config_hash=self.hash,
                started=started,
                finished=_now(),
            )
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _load(args) -> AppConfig:
    cfg = load_config(args.config) if args.config else AppConfig()
    over = {}
    if getattr(args, "w_max", None) is not None:
        over["w_max"] = args.w_max
    if getattr(args, "tol", None) is not None:
        over["plan_tol"] = args.tol
    return with_overrides(cfg, **over)


def _ns_list(args, default):
    if getattr(args, "ns_list", None) is None:
        return default
    try:
        return tuple(int(s) for s in args.ns_list.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--ns-list {args.ns_list!r} is not a comma-separated integer list") from None


def _cache(args, study):
    return open_cache(study, Path(args.out) / "cache")


# -- subcommands ------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    started = _now()
    t0 = time.perf_counter()
    res, records = run_collocation(cfg.study, cache=_cache(args, cfg.study), workers=args.workers)
    wall = time.perf_counter() - t0
    n_s = cfg.study.N_s
    rec_cols = ["node_key"] + [f"y_{i}" for i in range(1, n_s + 1)] + ["qoi_raw", "qoi_norm", "iters"]
    rec_rows = []
    for r in records:
        row = {"node_key": format_key(r.node_key[:n_s]), "qoi_raw": r.qoi_raw, "qoi_norm": r.qoi_norm, "iters": r.iterations}
        row.update({f"y_{i}": r.y[i - 1] for i in range(1, n_s + 1)})
        rec_rows.append(row)
    mom_cols = ["mean", "variance", "eta", "w", "N_s", "mesh_n"]
    p1 = write_csv(out / "moments.csv", mom_cols, [vars(res)])
    p2 = write_csv(out / "records.csv", rec_cols, rec_rows)
    Manifest(out, cfg).record("run", [p1, p2], "ok", started)
    print(f"mean     = {res.mean:.10f}")
    print(f"variance = {res.variance:.10e}")
    print(f"eta      = {res.eta}")
    print(f"solves   = {res.solves}")
    print(f"wall     = {wall:.2f} s")
    return 0


def cmd_converge(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    started = _now()
    rows = []
    for n_s in _ns_list(args, cfg.ns_list):
        study = replace(cfg.study, N_s=n_s)
        cache = _cache(args, study)
        ref = reference_moments(study, cfg.reference_level, cfg.reference_mesh, cache=cache, workers=args.workers)
        print(f"reference N_s={n_s}: mean={ref.mean:.10f} variance={ref.variance:.10e} ({ref.reference})")
        rows += convergence_study(study, range(cfg.w_max + 1), ref, cache=cache, workers=args.workers)
    cols = ["N_s", "w", "knots", "mean_error", "var_error"]
    outputs = [write_csv(out / "converge.csv", cols, rows)]
    for r in rows:
        print(f"N_s={r['N_s']} w={r['w']} knots={r['knots']} mean_error={r['mean_error']:.3e} var_error={r['var_error']:.3e}")
    if args.floors:
        floors = []
        for n_s in _ns_list(args, cfg.ns_list):
            study = replace(cfg.study, N_s=n_s)
            f = saturation_floors(study, cfg.trunc_w, cache=_cache(args, study), workers=args.workers)
            floors.append(f)
            print(
                f"N_s={n_s} floors at w={f['level']}: truncation var={f['truncation_var']:.3e}, "
                f"discretization (mesh {f['fine_mesh']}) var={f['discretization_var']:.3e}"
            )
        outputs.append(write_csv(out / "floors.csv", list(floors[0]), floors))
    Manifest(out, cfg).record("converge", outputs, "ok", started)
    return 0


def cmd_truncate(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    started = _now()
    study = replace(cfg.study, w=cfg.trunc_w)
    cache = _cache(args, study)
    ref = reference_moments(study, cfg.trunc_w, cfg.study.mesh_n, N_s=study.N, cache=cache, workers=args.workers)
    print(f"reference: mean={ref.mean:.10f} variance={ref.variance:.10e} ({ref.reference}, {ref.eta} knots)")
    rows = truncation_study(study, _ns_list(args, cfg.trunc_ns), ref, cache=cache, workers=args.workers)
    p = write_csv(out / "truncate.csv", ["N_s", "mean_error", "var_error", "B_T_bound"], rows)
    Manifest(out, cfg).record("truncate", [p], "ok", started)
    for r in rows:
        print(f"N_s={r['N_s']} mean_error={r['mean_error']:.3e} var_error={r['var_error']:.3e} B_T={r['B_T_bound']:.4f}")
    pts = [r for r in rows if r["mean_error"] > 0]
    if len(pts) >= 2:
        slope = loglog_slope([r["N_s"] for r in pts], [r["mean_error"] for r in pts])
        print(f"mean error log-log slope = {slope:.3f} ({'faster' if slope <= -1 else 'slower'} than linear)")
    return 0


def cmd_plan(args) -> int:
    cfg = _load(args)
    plan = complexity_plan(cfg.plan_tol, cfg.bounds, cfg.W_sol)
    b = cfg.bounds
    lines = [
        ("tol", f"{plan['tol']:g}"),
        ("E tol / (C_D (1 + D_D))", f"{plan['ratio']:.6g}"),
        (f"N_s (real, l = {b.l:g})", f"{plan['N_s_real']:.6g}"),
        ("N_s required", f"{plan['N_s_required']}"),
        ("eta exponent (1+log 2N_s)/sigma", f"{plan['eta_exponent']:.6g}"),
        ("log eta", f"{plan['log_eta']:.6g}"),
        ("eta required", f"{plan['eta_required']}"),
        ("W_total = W_sol * eta", f"{plan['W_total']:.6g}"),
    ]
    for label, value in lines:
        print(f"{label:32s} = {value}")
    return 0


def cmd_diag(args) -> int:
    cfg = _load(args)
    model = build_model(cfg.study)
    d = region_diagnostics(model, 2, cfg.a_min, cfg.a_max, cfg.alpha)
    for k, v in d.as_dict().items():
        print(f"{k:20s} = {v!r}")
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(dump_config(_load(args)))
    return 0


COMMANDS = {
    "run": cmd_run,
    "converge": cmd_converge,
    "truncate": cmd_truncate,
    "plan": cmd_plan,
    "diag": cmd_diag,
    "config": cmd_config,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="randomdomain", description="Sparse-grid moments of a QoI on a randomly deformed square.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", metavar="PATH", required=name not in ("plan", "config"))
        s.add_argument("--out", metavar="DIR", default="out")
        s.add_argument("--workers", metavar="K", type=int, default=default_workers())
        s.add_argument("--w-max", metavar="W", type=int, dest="w_max")
        s.add_argument("--ns-list", metavar="a,b,c", dest="ns_list")
        s.add_argument("--tol", metavar="X", type=float)
        s.add_argument("--seed", type=int, help="reserved; the pipeline is deterministic")
        if name == "converge":
            s.add_argument("--floors", action="store_true", help="also report truncation and discretization floors")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _HANDLED as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
