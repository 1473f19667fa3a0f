"""Experiment workflows shared by the command line and the acceptance suite."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import estimator
from .design import (
    ACriterion,
    Criterion,
    DCriterion,
    DesignMeasure,
    WeightedACriterion,
    check_optimality,
)
from .fem import ConfigurationError, ForwardSolution, forward
from .gcg import SolverConfig, SolverResult, solve

REFERENCE_POINTS = ((0.25, 0.25), (0.25, 0.75), (0.75, 0.5))
DEFAULT_Q_HAT = (3.0, 0.5, 0.25)
CSV_HEADER = ("iter", "F", "gap", "support_size", "step", "wall_time_s")
Q1_BOUNDS = (0.25, 5.0)


def fmt(x) -> str:
    """17 significant digits, enough to round-trip any double."""
    return format(float(x), ".17g")


# --------------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    level: int = 9
    q_hat: tuple = DEFAULT_Q_HAT
    beta: float = 1.0
    budget_K: float | None = None
    criterion: object = "A"
    I0: object = "zero"
    variant: str = "pdap"
    post_process: bool = True
    tol: float = 1e-9
    max_iter: int = 20000
    seed: int = 0
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self):
        if isinstance(self.level, bool) or not isinstance(self.level, int) or not 1 <= self.level <= 12:
            raise ConfigurationError(f"level must be an integer in [1, 12], got {self.level!r}")
        try:
            q = tuple(float(v) for v in self.q_hat)
        except (TypeError, ValueError):
            raise ConfigurationError("q_hat must be a list of three numbers") from None
        if len(q) != 3:
            raise ConfigurationError("q_hat must have three entries")
        if not Q1_BOUNDS[0] <= q[0] <= Q1_BOUNDS[1]:
            raise ConfigurationError(f"q_hat[0] must lie in [{Q1_BOUNDS[0]}, {Q1_BOUNDS[1]}]")
        self.q_hat = q
        if not _is_number(self.beta) or not self.beta > 0:
            raise ConfigurationError("beta must be a positive number")
        if self.budget_K is not None and (not _is_number(self.budget_K) or not self.budget_K > 0):
            raise ConfigurationError("budget_K must be a positive number or null")
        self.criterion_object()
        self.I0_matrix()
        if self.variant not in ("gcg", "spinat", "pdap"):
            raise ConfigurationError("variant must be one of gcg, spinat, pdap")
        if not isinstance(self.post_process, bool):
            raise ConfigurationError("post_process must be a boolean")
        if not _is_number(self.tol) or not self.tol > 0:
            raise ConfigurationError("tol must be positive")
        if isinstance(self.max_iter, bool) or not isinstance(self.max_iter, int) or self.max_iter < 1:
            raise ConfigurationError("max_iter must be a positive integer")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigurationError("seed must be an integer")
        if not isinstance(self.output_dir, str):
            raise ConfigurationError("output_dir must be a path string")

    def criterion_object(self) -> Criterion:
        return parse_criterion(self.criterion)

    def I0_matrix(self) -> np.ndarray:
        if isinstance(self.I0, str):
            if self.I0 != "zero":
                raise ConfigurationError('I0 must be "zero" or a 3x3 matrix literal')
            return np.zeros((3, 3))
        try:
            M = np.asarray(self.I0, dtype=float)
        except (TypeError, ValueError):
            raise ConfigurationError("I0 matrix literal is not numeric") from None
        if M.shape != (3, 3) or not np.allclose(M, M.T):
            raise ConfigurationError("I0 must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(M)[0] < -1e-12 * max(1.0, np.abs(M).max()):
            raise ConfigurationError("I0 must be nonnegative definite")
        return M

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q_hat"] = list(self.q_hat)
        return d


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def parse_criterion(value) -> Criterion:
    """``"A"``, ``"D"``, ``"wA:1,1,4"`` or ``{"wA": [1, 1, 4]}``."""
    if isinstance(value, Criterion):
        return value
    if isinstance(value, dict) and set(value) == {"wA"}:
        return _weighted(value["wA"])
    if isinstance(value, str):
        if value == "A":
            return ACriterion()
        if value == "D":
            return DCriterion()
        if value.startswith("wA:"):
            try:
                return _weighted([float(v) for v in value[3:].split(",")])
            except ValueError:
                pass
    raise ConfigurationError(f"criterion must be A, D, wA:<w1>,<w2>,<w3> or {{\"wA\": [...]}}, got {value!r}")


def _weighted(diag) -> WeightedACriterion:
    d = np.asarray(diag, dtype=float).reshape(-1)
    if d.shape != (3,) or np.any(d < 0):
        raise ConfigurationError("weighted A criterion needs three nonnegative weights")
    return WeightedACriterion(np.diag(d))


def criterion_label(c: Criterion) -> str:
    return c.name


def criterion_weights(c: Criterion):
    if isinstance(c, WeightedACriterion) and not isinstance(c, ACriterion):
        return np.diag(c.W).tolist()
    return None


# --------------------------------------------------------------------------- designs


def reference_design(basis, weight: float = 1e4) -> DesignMeasure:
    """Equal weights at the candidates nearest to the three reference points."""
    nodes = [int(np.argmin(np.sum((basis.points - np.asarray(p)) ** 2, axis=1))) for p in REFERENCE_POINTS]
    return DesignMeasure.on_basis(basis, nodes, np.full(len(nodes), float(weight)))


@dataclass(frozen=True)
class MergedAtom:
    x: tuple
    weight: float
    nodes: tuple


def merge_atoms(measure: DesignMeasure, radius: float) -> list[MergedAtom]:
    """Group atoms closer than ``radius`` (single linkage); each group sits at its centroid."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    m = len(measure)
    if m == 0:
        return []
    if radius == 0:
        labels = np.arange(m)
    else:
        pairs = cKDTree(measure.points).query_pairs(radius, output_type="ndarray")
        adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(m, m))
        _, labels = connected_components(adj, directed=False)
    out = []
    for lab in sorted(set(labels.tolist()), key=lambda v: int(np.flatnonzero(labels == v)[0])):
        idx = np.flatnonzero(labels == lab)
        w = measure.weights[idx]
        centroid = (measure.points[idx] * w[:, None]).sum(axis=0) / w.sum()
        out.append(MergedAtom(tuple(centroid.tolist()), float(w.sum()), tuple(measure.nodes[idx].tolist())))
    return out


def design_to_dict(measure: DesignMeasure, *, beta, criterion: Criterion, level: int, q_hat=None,
                   I0=None) -> dict:
    d = {
        "atoms": [
            {"x": [float(p[0]), float(p[1])], "node": int(j), "weight": float(w)}
            for j, p, w in zip(measure.nodes, measure.points, measure.weights)
        ],
        "beta": float(beta),
        "criterion": criterion_label(criterion),
        "level": int(level),
    }
    wts = criterion_weights(criterion)
    if wts is not None:
        d["criterion_weights"] = wts
    if q_hat is not None:
        d["q_hat"] = [float(v) for v in q_hat]
    if I0 is not None and np.any(np.asarray(I0) != 0):
        d["I0"] = np.asarray(I0, dtype=float).tolist()
    return d


@dataclass
class DesignFile:
    measure: DesignMeasure
    beta: float
    criterion: Criterion
    level: int
    q_hat: tuple = DEFAULT_Q_HAT
    I0: np.ndarray | None = None


def design_from_dict(d: dict, basis=None) -> DesignFile:
    try:
        atoms = d["atoms"]
        level = int(d["level"])
        beta = float(d["beta"])
        label = d["criterion"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"malformed design file: {exc}") from None
    if label == "wA":
        crit = _weighted(d.get("criterion_weights", [1.0, 1.0, 4.0]))
    else:
        crit = parse_criterion(label)
    nodes = [int(a["node"]) for a in atoms]
    weights = [float(a["weight"]) for a in atoms]
    points = [a["x"] for a in atoms]
    if basis is not None:
        bad = [j for j in nodes if not 0 <= j < len(basis)]
        if bad:
            raise ConfigurationError(f"design nodes out of range for level {level}: {bad}")
    measure = DesignMeasure(np.asarray(nodes, dtype=np.int64), np.asarray(weights), np.asarray(points, dtype=float).reshape(-1, 2))
    I0 = np.asarray(d["I0"], dtype=float) if "I0" in d else None
    return DesignFile(measure, beta, crit, level, tuple(d.get("q_hat", DEFAULT_Q_HAT)), I0)


# --------------------------------------------------------------------------- histories


def history_csv(history, zero_timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in history:
        w.writerow([r.k, fmt(r.F), fmt(r.gap), r.support_size, fmt(r.step), fmt(0.0 if zero_timing else r.wall_time)])
    return buf.getvalue()


def read_history_csv(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        rows = [row for row in reader]
    cols = list(zip(*rows)) if rows else [()] * len(CSV_HEADER)
    out = {}
    for name, col in zip(CSV_HEADER, cols):
        conv = int if name in ("iter", "support_size") else float
        out[name] = np.array([conv(v) for v in col])
    return out


@dataclass
class HistoryCheck:
    ok: bool
    problems: list = field(default_factory=list)


def validate_history(F, gap=None, mass=None, beta: float | None = None, m0: float | None = None,
                     F_half=None, rel_tol: float = 1e-13) -> HistoryCheck:
    """Monotone descent, mass bound and gap validity along a run.

    ``rel_tol`` absorbs rounding in independently evaluated objective values.
    Without a mass column the bound follows from ``F_k <= F_1`` since every
    supported criterion is nonnegative: ``beta * mass <= F_k <= F_1 = beta * M0``.
    """
    F = np.asarray(F, dtype=float)
    problems = []
    slack = rel_tol * np.abs(F[:-1])
    up = np.flatnonzero(F[1:] > F[:-1] + slack)
    if up.size:
        problems.append(f"objective increases at iterations {(up + 2).tolist()[:10]}")
    if F_half is not None:
        Fh = np.asarray(F_half, dtype=float)
        for k in range(1, len(F)):
            if math.isnan(Fh[k]):
                continue
            tol = rel_tol * abs(F[k - 1])
            if not (F[k] <= Fh[k] + tol and Fh[k] <= F[k - 1] + tol):
                problems.append(f"intermediate objective out of order at iteration {k + 1}")
    if F.size and np.any(F > F[0] * (1 + rel_tol)):
        problems.append("objective exceeds its initial value")
    if mass is not None and m0 is not None:
        bad = np.flatnonzero(np.asarray(mass) > m0 * (1 + rel_tol))
        if bad.size:
            problems.append(f"mass bound violated at iterations {(bad + 1).tolist()[:10]}")
    if gap is not None:
        gap = np.asarray(gap, dtype=float)
        best = F.min()
        bad = np.flatnonzero(gap < (F - best) - rel_tol * np.abs(F))
        if bad.size:
            problems.append(f"gap below objective residual at iterations {(bad + 1).tolist()[:10]}")
    return HistoryCheck(ok=not problems, problems=problems)


# --------------------------------------------------------------------------- workflows


def solver_config(cfg: ExperimentConfig, criterion: Criterion | None = None) -> SolverConfig:
    I0 = cfg.I0_matrix()
    return SolverConfig(
        beta=cfg.beta,
        criterion=criterion if criterion is not None else cfg.criterion_object(),
        I0=I0,
        variant=cfg.variant,
        post_process=cfg.post_process,
        tol=cfg.tol,
        max_iter=cfg.max_iter,
    )


@dataclass
class SolveOutcome:
    config: ExperimentConfig
    forward: ForwardSolution
    result: SolverResult
    certificate: dict
    wall_time: float


def run_solve(cfg: ExperimentConfig, fwd: ForwardSolution | None = None,
              criterion: Criterion | None = None) -> SolveOutcome:
    import time

    fwd = fwd if fwd is not None else forward(cfg.level, cfg.q_hat)
    scfg = solver_config(cfg, criterion)
    t0 = time.perf_counter()
    result = solve(scfg, fwd.basis)
    elapsed = time.perf_counter() - t0
    cert = check_optimality(result.design, fwd.basis, scfg.criterion, scfg.I0, cfg.beta).as_dict()
    return SolveOutcome(cfg, fwd, result, cert, elapsed)


def summary_dict(out: SolveOutcome, zero_timing: bool = False) -> dict:
    r = out.result
    return {
        "F": r.F,
        "gap": r.gap,
        "support_size": len(r.design),
        "iterations": r.iterations,
        "converged": r.converged,
        "status": r.status,
        "M0": r.m0,
        "total_mass": r.design.total_mass,
        "certificate": out.certificate,
        "wall_time_s": 0.0 if zero_timing else out.wall_time,
        "seed": out.config.seed,
        "level": out.config.level,
        "variant": out.config.variant,
        "post_process": out.config.post_process,
        "criterion": criterion_label(out.config.criterion_object()),
    }


TABLE_WEIGHTS = (1.0, 1.0, 4.0)


@dataclass
class TableRow:
    design: str
    cov: np.ndarray
    measure: DesignMeasure

    @property
    def trace(self) -> float:
        return float(np.trace(self.cov))

    def cells(self):
        return [self.design, fmt(self.cov[0, 0]), fmt(self.cov[1, 1]), fmt(self.cov[2, 2]), fmt(self.trace)]


def variance_table(cfg: ExperimentConfig, fwd: ForwardSolution | None = None):
    """Covariances of the scaled A-optimum, the reference design and the scaled weighted-A optimum."""
    if cfg.budget_K is None:
        raise ConfigurationError("the table workflow needs budget_K")
    if np.any(cfg.I0_matrix() != 0):
        raise ConfigurationError("budget scaling requires I0 = zero")
    fwd = fwd if fwd is not None else forward(cfg.level, cfg.q_hat)
    K = float(cfg.budget_K)
    a_run = run_solve(cfg, fwd, ACriterion())
    w_run = run_solve(cfg, fwd, _weighted(TABLE_WEIGHTS))
    designs = {
        "omega_K": estimator.scale_to_budget(a_run.result.design, K),
        "omega_1": reference_design(fwd.basis, K / len(REFERENCE_POINTS)),
        "omega_KW": estimator.scale_to_budget(w_run.result.design, K),
    }
    rows = [TableRow(name, estimator.covariance(m, fwd.basis), m) for name, m in designs.items()]
    return rows, {"A": a_run, "wA": w_run}


def table_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["design", "cov11", "cov22", "cov33", "trace"])
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


PAIRS = ((0, 1), (1, 2), (2, 0))


def ellipses_csv(cov, center, pairs=PAIRS, confidence_level: float = 0.5, n_points: int = 256) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair", "i", "x", "y"])
    for pair in pairs:
        ell = estimator.confidence_ellipse(cov, pair, confidence_level, center)
        label = f"{pair[0] + 1}-{pair[1] + 1}"
        for i, (x, y) in enumerate(ell.polyline(n_points)):
            w.writerow([label, i, fmt(x), fmt(y)])
    return buf.getvalue()


def covariance_dict(cov) -> dict:
    cov = np.asarray(cov, dtype=float)
    return {"covariance": cov.tolist(), "trace": float(np.trace(cov))}


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")
