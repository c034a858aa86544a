"""Command line interface: ``sqglab {params,verify-lemmas,step,report}``.

Config files are flat UTF-8 ``key = value`` lines with ``#`` comments.  Unknown
keys are a parse error (exit 2).  CSV output uses a header row, ``,`` as
separator and 17 significant digits in scientific notation.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time as _time
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction

import numpy as np

from .params import ParamConfig, ScheduleError, build_schedule, check_admissibility

EXIT_OK, EXIT_FAIL, EXIT_PARSE = 0, 1, 2

PARAM_KEYS = tuple(f.name for f in fields(ParamConfig))


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


@dataclass
class RunConfig:
    params: ParamConfig = field(default_factory=ParamConfig)
    grid: int | None = None  # None: 256 for verify-lemmas, 512 for step
    interval: tuple | None = None
    stages: int = 1
    out: str = "sqglab-out"
    dump_fields: bool = False
    dump_stride: int = 16
    seed: int = 0


def _parse_bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _parse_int(v: str) -> int:
    f = Fraction(v.strip())
    if f.denominator != 1:
        raise ConfigError(f"not an integer: {v!r}")
    return int(f)


def _parse_interval(v: str) -> tuple:
    parts = [p for p in v.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise ConfigError(f"interval needs two numbers: {v!r}")
    a, b = (float(p) for p in parts)
    if not b > a:
        raise ConfigError("interval must have positive length")
    return a, b


RUN_KEYS = {
    "grid": _parse_int,
    "interval": _parse_interval,
    "stages": _parse_int,
    "out": str,
    "dump_fields": _parse_bool,
    "dump_stride": _parse_int,
    "seed": _parse_int,
}


def parse_config_text(text: str) -> RunConfig:
    """Parse flat ``key = value`` text into a RunConfig."""
    pvals, rvals = {}, {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key or not val:
            raise ConfigError(f"line {ln}: empty key or value")
        if key in pvals or key in rvals:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        if key in PARAM_KEYS:
            pvals[key] = val
        elif key in RUN_KEYS:
            try:
                rvals[key] = RUN_KEYS[key](val)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"line {ln}: bad value for {key}: {exc}") from None
        else:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
    try:
        params = ParamConfig(**pvals)
    except (ValueError, TypeError, ZeroDivisionError) as exc:
        raise ConfigError(f"invalid parameters: {exc}") from None
    cfg = RunConfig(params=params, **rvals)
    _check_grid(cfg.grid)
    if cfg.stages < 0:
        raise ConfigError("stages must be >= 0")
    if cfg.dump_stride < 1:
        raise ConfigError("dump_stride must be >= 1")
    return cfg


def _check_grid(n) -> None:
    if n is not None and (n < 32 or n & (n - 1)):
        raise ConfigError("grid must be a power of two >= 32")


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def apply_flags(cfg: RunConfig, args) -> RunConfig:
    kw = {}
    for name in ("grid", "stages", "out", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    if getattr(args, "dump_fields", False):
        kw["dump_fields"] = True
    return replace(cfg, **kw)


# ----------------------------------------------------------------------------
# formatting


def fmt(x) -> str:
    """17 significant digits, scientific notation."""
    return f"{float(x):.16e}"


def _frac(f: Fraction) -> str:
    return str(f) if f.denominator != 1 else str(f.numerator)


def write_csv(path: str, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def _labelled(value, provenance: str) -> dict:
    return {"value": value, "provenance": provenance}


# ----------------------------------------------------------------------------
# params


def admissibility_dict(rep) -> dict:
    return {
        "verdict": rep.verdict,
        "failing": rep.failing(),
        "records": [{"name": r.name, "lhs": r.lhs_expr, "rhs": r.rhs_expr,
                     "lhs_value": _frac(r.lhs), "rhs_value": _frac(r.rhs),
                     "strict": r.strict, "gating": r.gating, "satisfied": r.satisfied}
                    for r in rep.records],
        "alpha_theta_max": _frac(rep.alpha_theta_max),
        "alpha_inv_max": _frac(rep.alpha_inv_max),
        "zeta_max": _frac(rep.zeta_max),
        "notes": list(rep.notes),
    }


def format_admissibility(rep) -> str:
    lines = ["admissibility"]
    for r in rep.records:
        op = "<" if r.strict else "<="
        tag = "pass" if r.satisfied else "FAIL"
        role = "gate" if r.gating else "info"
        lines.append(f"  [{tag}] {role} {r.name:<14} {r.lhs_expr} {op} {r.rhs_expr}: "
                     f"{_frac(r.lhs)} {op} {_frac(r.rhs)} ({float(r.lhs):.6g} vs {float(r.rhs):.6g})")
    lines.append(f"  verdict: {'admissible' if rep.verdict else 'not admissible'}")
    if rep.failing():
        lines.append("  failing gates: " + ", ".join(rep.failing()))
    return "\n".join(lines)


def cmd_params(cfg: RunConfig, args) -> int:
    rep = check_admissibility(cfg.params)
    print(format_admissibility(rep))
    if args.json:
        print(json.dumps(admissibility_dict(rep), indent=2, sort_keys=True))
    return EXIT_OK if rep.verdict else EXIT_FAIL


# ----------------------------------------------------------------------------
# verify-lemmas


def cmd_verify_lemmas(cfg: RunConfig, args) -> int:
    from .identities import kernel_table, run_suite
    t0 = _time.perf_counter()
    N = cfg.grid or 256
    results = run_suite(N, fault=args.inject_fault)
    print(f"identity suite at N={N}")
    for r in results:
        tag = "pass" if r.ok else "FAIL"
        extra = f" {r.detail}" if r.detail else ""
        print(f"  [{tag}] {r.name:<28} measured {fmt(r.measured)} tol {r.tolerance:.1e}{extra}")
    print("kernel table (closed form at lambda = 1, units of 1/(2 sqrt 5)):")
    for key, m in kernel_table().items():
        s = m * 2 * math.sqrt(5)
        label = f"({key[0]},{key[1]})" if isinstance(key, tuple) else "sum"
        print(f"  {label:<6} [[{s[0, 0]:+.12f}, {s[0, 1]:+.12f}], [{s[1, 0]:+.12f}, {s[1, 1]:+.12f}]]")
    print(f"runtime {(_time.perf_counter() - t0):.2f} s")
    failing = [r.name for r in results if not r.ok]
    if failing:
        print("failing identities: " + ", ".join(failing), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ----------------------------------------------------------------------------
# step


class StageFailure(RuntimeError):
    def __init__(self, stage: int, operation: str, exc: BaseException):
        super().__init__(f"stage {stage}, {operation}: {type(exc).__name__}: {exc}")
        self.stage = stage
        self.operation = operation
        self.partial = None  # report of the stages completed before the failure


def _guard(stage: int, operation: str, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (ArithmeticError, ValueError, RuntimeError, KeyError, MemoryError, OSError) as exc:
        raise StageFailure(stage, operation, exc) from exc


def _checks_dict(rep) -> list:
    return [{"name": c.name, "order": c.order, "measured": _labelled(c.measured, "measured"),
             "bound": _labelled(c.bound, "bound"), "gating": c.gating, "ok": c.ok}
            for c in rep.checks]


def _dump_state(state, stage_dir: str, stride: int) -> list:
    from .spectral import write_fields
    os.makedirs(stage_dir, exist_ok=True)
    written = []
    nt = state.times.size
    for i in range(0, nt, stride):
        t = float(state.times[i])
        arrays = [state.eta.get(i), state.eta_tilde.get(i)]
        arrays += list(state.R.get(i)) + list(state.R_tilde.get(i))
        path = os.path.join(stage_dir, f"slice{i:05d}.sqgf")
        write_fields(path, arrays, time=t)
        written.append(os.path.basename(path))
    return written


def scaling_exponents(stages: list) -> dict:
    """Log-log slopes of stage norms against lambda_{q+1} (needs >= 2 stages)."""
    out = {}
    if len(stages) < 2:
        return out
    lam = np.array([s["lam_next"] for s in stages], float)
    for comp in ("R_D", "W"):
        v = np.array([s["norms"].get(comp, {}).get("value", 0.0) for s in stages], float)
        if np.all(v > 0):
            out[comp] = float(np.polyfit(np.log(lam), np.log(v), 1)[0])
    return out


def run_step(cfg: RunConfig, progress=None) -> dict:
    """Run the configured stages; returns the report dictionary (raises StageFailure)."""
    from .engine import (initial_state, residual_check, run_stage, time_support_check,
                         verify_inductive)
    sched = _guard(0, "build_schedule", build_schedule, cfg.params)
    os.makedirs(cfg.out, exist_ok=True)
    workdir = os.path.join(cfg.out, "work")
    report = {"config": _config_dict(cfg), "stages": [], "timings": {}}
    t0 = _time.perf_counter()
    state = _guard(0, "initial_state", initial_state, sched, J=cfg.interval, seed=cfg.seed,
                   N=cfg.grid, stages=max(cfg.stages, 1))
    report["initial"] = {
        "eps": _labelled(state.info["eps"], "measured"),
        "phase": _labelled(state.info["phase"], "config"),
        "slices": _labelled(int(state.times.size), "config"),
        "interval": _labelled(list(state.J), "config"),
        "inductive": _checks_dict(_guard(0, "verify_inductive", verify_inductive, state, sched)),
        "residual": {k: _labelled(v, "measured")
                     for k, v in _guard(0, "residual_check", residual_check, state, sched).items()},
    }
    report["timings"]["initial"] = _time.perf_counter() - t0
    dumps = {}
    if cfg.dump_fields:
        dumps["stage0"] = _dump_state(state, os.path.join(cfg.out, "fields", "stage0"),
                                      cfg.dump_stride)
    for q in range(cfg.stages):
        stage = q + 1
        ts = _time.perf_counter()
        try:
            res = _guard(stage, "run_stage", run_stage, state, sched, workdir=workdir,
                         progress=progress)
        except StageFailure as exc:
            report["failure"] = {"stage": exc.stage, "operation": exc.operation,
                                 "message": str(exc)}
            report["scaling"] = {k: _labelled(v, "measured")
                                 for k, v in scaling_exponents(report["stages"]).items()}
            report["dumps"] = dumps
            report["timings"]["total"] = _time.perf_counter() - t0
            exc.partial = report
            raise
        eb = res.errors
        sup = _guard(stage, "time_support_check", time_support_check, res, state, sched)
        new = res.state
        resid = _guard(stage, "residual_check", residual_check, new, sched)
        inductive = _guard(stage, "verify_inductive", verify_inductive, new, sched)
        norms = {c: _labelled(eb.sup(c), "measured")
                 for c in ("R_T", "R_N", "R_D", "R_S", "R_H", "R_M", "R_O", "R_bar", "W",
                           "R_next", "R_tilde_next")}
        bounds = {c: _labelled(v, "bound") for c, v in eb.bounds.items()}
        delta_next = sched.delta(q + 1)
        diag = {k: v for k, v in eb.diagnostics.items() if k != "phase_report"}
        st = {
            "stage": stage, "q": q, "kind": eb.kind,
            "lam_next": sched.lam(q + 1),
            "norms": norms, "bounds": bounds,
            "R_next_over_delta": _labelled(eb.sup("R_next") / delta_next, "measured"),
            "W_over_target": _labelled(res.increment["W_sup"] / res.increment["W_target"],
                                       "measured"),
            "residual": {k: _labelled(v, "measured") for k, v in resid.items()},
            "time_support": sup,
            "inductive": _checks_dict(inductive),
            "diagnostics": _jsonable(diag),
        }
        report["stages"].append(st)
        report["timings"][f"stage{stage}"] = _time.perf_counter() - ts
        state = new
        if cfg.dump_fields:
            dumps[f"stage{stage}"] = _dump_state(state, os.path.join(cfg.out, "fields",
                                                                     f"stage{stage}"),
                                                 cfg.dump_stride)
    report["scaling"] = {k: _labelled(v, "measured")
                         for k, v in scaling_exponents(report["stages"]).items()}
    report["dumps"] = dumps
    report["timings"]["total"] = _time.perf_counter() - t0
    return report


def _config_dict(cfg: RunConfig) -> dict:
    d = {k: _frac(getattr(cfg.params, k)) if isinstance(getattr(cfg.params, k), Fraction)
         else getattr(cfg.params, k) for k in PARAM_KEYS}
    d.update({"grid": cfg.grid, "interval": cfg.interval, "stages": cfg.stages,
              "dump_fields": cfg.dump_fields, "dump_stride": cfg.dump_stride, "seed": cfg.seed})
    return d


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer, int)) and not isinstance(x, bool):
        return int(x)
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, Fraction):
        return _frac(x)
    return x


STAGE_CSV_HEADER = ("stage", "component", "norm", "bound", "ratio")
CHECK_CSV_HEADER = ("stage", "check", "order", "measured", "bound", "ratio", "gating")


def write_tables(report: dict, out: str) -> None:
    rows = []
    for st in report["stages"]:
        for comp, nv in st["norms"].items():
            b = st["bounds"].get(comp, {}).get("value")
            bound = fmt(b) if b is not None else ""
            ratio = fmt(nv["value"] / b) if b else ""
            rows.append((st["stage"], comp, fmt(nv["value"]), bound, ratio))
    write_csv(os.path.join(out, "stages.csv"), STAGE_CSV_HEADER, rows)
    crow = []
    blocks = [(0, report["initial"]["inductive"])] + [(s["stage"], s["inductive"])
                                                      for s in report["stages"]]
    for stage, checks in blocks:
        for c in checks:
            m, b = c["measured"]["value"], c["bound"]["value"]
            crow.append((stage, c["name"], c["order"], fmt(m), fmt(b),
                         fmt(m / b) if b else "", int(c["gating"])))
    write_csv(os.path.join(out, "checks.csv"), CHECK_CSV_HEADER, crow)


def format_report(report: dict) -> str:
    L = ["sqglab run report", "config:"]
    for k, v in report["config"].items():
        L.append(f"  {k} = {v}  [config]")
    ini = report["initial"]
    L.append("initial state:")
    L.append(f"  eps = {fmt(ini['eps']['value'])}  [measured]")
    L.append(f"  slices = {ini['slices']['value']}  [config]")
    for k, v in ini["residual"].items():
        L.append(f"  residual {k} = {fmt(v['value'])}  [measured]")
    L += _format_checks(ini["inductive"])
    for st in report["stages"]:
        L.append(f"stage {st['stage']} (q = {st['q']}, {st['kind']} step, "
                 f"lambda_next = {st['lam_next']}):")
        for comp, nv in st["norms"].items():
            b = st["bounds"].get(comp)
            tail = ""
            if b is not None:
                ok = "pass" if nv["value"] <= b["value"] else "over"
                tail = f"  bound {fmt(b['value'])} [bound]  ratio {nv['value'] / b['value']:.3e} {ok}"
            L.append(f"  {comp:<13} {fmt(nv['value'])} [measured]{tail}")
        L.append(f"  ||R_next||_0 / delta_next = {fmt(st['R_next_over_delta']['value'])}  [measured]")
        L.append(f"  ||W||_0 / target = {fmt(st['W_over_target']['value'])}  [measured]")
        for k, v in st["residual"].items():
            L.append(f"  residual {k} = {fmt(v['value'])}  [measured]")
        ts = st["time_support"]
        L.append(f"  time support inside {ts['interval']}: {'pass' if ts['ok'] else 'FAIL'}")
        L += _format_checks(st["inductive"])
    if report.get("scaling"):
        L.append("scaling exponents (log-log slope against lambda_next):")
        for k, v in report["scaling"].items():
            L.append(f"  {k} {v['value']:+.6f}  [measured]")
    if report.get("failure"):
        f = report["failure"]
        L.append(f"run stopped: {f['message']}")
    L.append("timings (s): " + ", ".join(f"{k} {v:.2f}" for k, v in report["timings"].items()))
    return "\n".join(L)


def _format_checks(checks) -> list:
    L = ["  inductive checks:"]
    for c in checks:
        tag = ("pass" if c["ok"] else "FAIL") if c["gating"] else ("info" if c["ok"] else "over")
        L.append(f"    [{tag}] {c['name']:<6} n={c['order']} measured {fmt(c['measured']['value'])}"
                 f" bound {fmt(c['bound']['value'])}")
    return L


def cmd_step(cfg: RunConfig, args) -> int:
    cfg = replace(cfg, grid=cfg.grid or 512)
    rep = check_admissibility(cfg.params)
    if not rep.verdict:
        print(format_admissibility(rep))
        print("config is not admissible", file=sys.stderr)
        return EXIT_FAIL
    progress = None
    if args.verbose:
        def progress(i, n):
            if i % 16 == 0 or i == n - 1:
                print(f"  slice {i + 1}/{n}", file=sys.stderr)
    try:
        report = run_step(cfg, progress)
    except StageFailure as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        if exc.partial is not None:
            exc.partial["admissibility"] = admissibility_dict(rep)
            _write_report(exc.partial, cfg.out)
        return EXIT_FAIL
    report["admissibility"] = admissibility_dict(rep)
    print(_write_report(report, cfg.out))
    return EXIT_OK


def _write_report(report: dict, out: str) -> str:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(_jsonable(report), fh, indent=1, sort_keys=True)
    write_tables(report, out)
    text = format_report(report)
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    return text


def cmd_report(cfg: RunConfig, args) -> int:
    path = os.path.join(cfg.out, "report.json")
    try:
        with open(path, encoding="utf-8") as fh:
            report = json.load(fh)
    except (OSError, ValueError) as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    write_tables(report, cfg.out)
    print(format_report(report))
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sqglab", description="Numerical laboratory for a convex "
                                "integration scheme for the SQG sum/difference system.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--grid", type=int, help="grid size N")
        sp.add_argument("--stages", type=int, help="number of stages")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--dump-fields", action="store_true", help="dump field slices")
        sp.add_argument("--seed", type=int, help="RNG seed")

    sp = sub.add_parser("params", help="evaluate the admissibility gates")
    common(sp)
    sp.add_argument("--json", action="store_true", help="also print a JSON document")
    sp = sub.add_parser("verify-lemmas", help="run the identity suite")
    common(sp)
    sp.add_argument("--inject-fault", choices=("mis-sign",), help=argparse.SUPPRESS)
    sp = sub.add_parser("step", help="run stages and write reports")
    common(sp)
    sp.add_argument("-v", "--verbose", action="store_true", help="print slice progress")
    sp = sub.add_parser("report", help="re-render the report of a finished run")
    common(sp)
    return p


COMMANDS = {"params": cmd_params, "verify-lemmas": cmd_verify_lemmas, "step": cmd_step,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code else EXIT_OK
    try:
        cfg = apply_flags(load_config(args.config), args)
        _check_grid(cfg.grid)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        return COMMANDS[args.command](cfg, args)
    except ScheduleError as exc:
        print(f"schedule error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
