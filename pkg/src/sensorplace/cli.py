"""Command line interface: ``sensorplace {solve,table,ellipse,merge,check}``.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
Errors are reported on stderr as a one-line JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import estimator
from .design import DomainError, check_optimality
from .experiments import (
    ExperimentConfig,
    covariance_dict,
    design_from_dict,
    design_to_dict,
    ellipses_csv,
    history_csv,
    TABLE_WEIGHTS,
    merge_atoms,
    parse_criterion,
    run_solve,
    summary_dict,
    table_csv,
    variance_table,
    write_json,
)
from .fem import ConfigurationError, SolverError, forward
from .gcg import StagnationError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _load_config(args) -> ExperimentConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"configuration file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"configuration is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigurationError("configuration must be a JSON object")
    overrides = {
        "level": args.level,
        "beta": args.beta,
        "criterion": args.criterion,
        "variant": args.variant,
        "tol": args.tol,
        "max_iter": args.max_iter,
        "budget_K": getattr(args, "budget_K", None),
        "output_dir": args.output_dir,
        "seed": args.seed,
    }
    for key, val in overrides.items():
        if val is not None:
            data[key] = val
    if args.no_post_process:
        data["post_process"] = False
    return ExperimentConfig.from_dict(data)


def _output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_solve(args) -> int:
    cfg = _load_config(args)
    out = run_solve(cfg)
    d = _output_dir(cfg)
    crit = cfg.criterion_object()
    write_json(d / "design.json", design_to_dict(out.result.design, beta=cfg.beta, criterion=crit,
                                                 level=cfg.level, q_hat=cfg.q_hat, I0=cfg.I0_matrix()))
    (d / "iterations.csv").write_text(history_csv(out.result.history, args.zero_timing))
    write_json(d / "summary.json", summary_dict(out, args.zero_timing))
    _report(args, f"F={out.result.F:.10g} gap={out.result.gap:.3e} support={len(out.result.design)} "
                  f"iterations={out.result.iterations} -> {d}")
    return EXIT_OK


def cmd_table(args) -> int:
    cfg = _load_config(args)
    if cfg.budget_K is None:
        cfg.budget_K = 3e4
    rows, _ = variance_table(cfg)
    d = _output_dir(cfg)
    (d / "table.csv").write_text(table_csv(rows))
    write_json(d / "covariance.json", {r.design: covariance_dict(r.cov) for r in rows})
    for r in rows:
        write_json(d / f"design_{r.design}.json",
                   design_to_dict(r.measure, beta=cfg.beta, criterion=_table_criterion(r.design),
                                  level=cfg.level, q_hat=cfg.q_hat))
    _report(args, "\n".join(f"{r.design}: trace={r.trace:.6g}" for r in rows))
    return EXIT_OK


def _table_criterion(name):
    return parse_criterion({"wA": list(TABLE_WEIGHTS)} if name == "omega_KW" else "A")


def _read_design(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"design file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"design file is not valid JSON: {exc}") from None


def _parse_pairs(text: str):
    pairs = []
    for item in text.split(","):
        try:
            a, b = (int(v) for v in item.split("-"))
        except ValueError:
            raise ConfigurationError(f"pair must look like 1-2, got {item!r}") from None
        if not (1 <= a <= 3 and 1 <= b <= 3 and a != b):
            raise ConfigurationError(f"pair indices must be distinct and in 1..3, got {item!r}")
        pairs.append((a - 1, b - 1))
    return tuple(pairs)


def cmd_ellipse(args) -> int:
    if not 0.0 < args.confidence < 1.0:
        raise ConfigurationError("confidence level must lie in (0, 1)")
    pairs = _parse_pairs(args.pairs)
    if args.identity:
        cov, center = np.eye(3), np.zeros(3)
    else:
        if not args.design:
            raise ConfigurationError("ellipse needs --design or --identity")
        raw = _read_design(args.design)
        fwd = forward(int(raw.get("level", 0)), tuple(raw.get("q_hat", (3.0, 0.5, 0.25))))
        df = design_from_dict(raw, fwd.basis)
        cov = estimator.covariance(df.measure, fwd.basis, df.I0)
        center = np.asarray(fwd.q, dtype=float)
    text = ellipses_csv(cov, center, pairs, args.confidence)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    _report(args, f"wrote {out}")
    return EXIT_OK


def cmd_merge(args) -> int:
    raw = _read_design(args.design)
    df = design_from_dict(raw)
    radius = args.radius if args.radius is not None else 2.0 * np.sqrt(2.0) * 2.0 ** (-df.level)
    if radius < 0:
        raise ConfigurationError("radius must be nonnegative")
    merged = merge_atoms(df.measure, radius)
    obj = {
        "atoms": [{"x": list(a.x), "weight": a.weight, "nodes": list(a.nodes)} for a in merged],
        "radius": radius,
        "level": df.level,
    }
    if args.output:
        write_json(Path(args.output), obj)
    else:
        print(json.dumps(obj, indent=2))
    return EXIT_OK


def cmd_check(args) -> int:
    raw = _read_design(args.design)
    level = int(raw.get("level", 0))
    fwd = forward(level, tuple(raw.get("q_hat", (3.0, 0.5, 0.25))))
    df = design_from_dict(raw, fwd.basis)
    n = fwd.basis.n_params
    I0 = df.I0 if df.I0 is not None else np.zeros((n, n))
    rep = check_optimality(df.measure, fwd.basis, df.criterion, I0, df.beta).as_dict()
    rep["optimal"] = bool(max(rep["global_violation"], rep["support_gap"]) <= args.tol)
    print(json.dumps(rep, indent=2))
    return EXIT_OK if rep["optimal"] or not args.strict else EXIT_NUMERIC


def _report(args, msg):
    if not args.quiet:
        print(msg)


def _add_common(p, with_budget=False):
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--level", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--criterion", help='"A", "D" or "wA:w1,w2,w3"')
    p.add_argument("--variant", choices=("gcg", "spinat", "pdap"))
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--no-post-process", action="store_true")
    p.add_argument("--zero-timing", action="store_true", help="write 0 for wall-clock columns")
    if with_budget:
        p.add_argument("--budget-K", dest="budget_K", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sensorplace", description="Sparse optimal sensor placement.")
    parser.add_argument("-q", "--quiet", action="store_true")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="compute a sparse optimal design")
    _add_common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("table", help="covariances of budget-scaled designs")
    _add_common(p, with_budget=True)
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("ellipse", help="linearized confidence ellipses")
    p.add_argument("--design")
    p.add_argument("--identity", action="store_true", help="use the identity covariance centred at 0")
    p.add_argument("--confidence", type=float, default=0.5)
    p.add_argument("--pairs", default="1-2,2-3,3-1")
    p.add_argument("--output", default="ellipses.csv")
    p.set_defaults(func=cmd_ellipse)

    p = sub.add_parser("merge", help="merge nearby atoms for reporting")
    p.add_argument("--design", required=True)
    p.add_argument("--radius", type=float)
    p.add_argument("--output")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("check", help="first-order optimality certificate of a design")
    p.add_argument("--design", required=True)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--strict", action="store_true", help="exit 3 when the certificate fails")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        _error("configuration", exc, EXIT_CONFIG)
        return EXIT_CONFIG
    except (DomainError, SolverError, StagnationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        _error("numerical", exc, EXIT_NUMERIC)
        return EXIT_NUMERIC


def _error(kind, exc, code):
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}),
          file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
