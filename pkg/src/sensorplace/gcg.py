"""Successive point insertion for sparse optimal designs.

Each iteration inserts one Dirac atom at the global minimizer of the reduced
gradient, takes a quasi-Armijo step towards it and then (optionally) improves
the weights on the current support and prunes it.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .design import PRUNE_REL, Criterion, DesignMeasure, fisher_matrix, is_pd, quad_forms
from .fem import ConfigurationError, SensitivityBasis
from .removal import Subproblem, pdap_subproblem, spinat_step
from .sparsify import prune_weights

log = logging.getLogger(__name__)

VARIANTS = ("gcg", "spinat", "pdap")
MAX_HALVINGS = 60


class StagnationError(RuntimeError):
    """The step-size rule failed to find an acceptable step."""


@dataclass
class SolverConfig:
    beta: float
    criterion: Criterion
    I0: np.ndarray | None = None
    variant: str = "pdap"
    post_process: bool = True
    armijo_alpha: float = 0.5
    armijo_gamma: float = 0.5
    tol: float = 1e-9
    max_iter: int = 20000
    initial_design: DesignMeasure | None = None
    subproblem_tol: float = 1e-12

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}")
        if not self.beta > 0:
            raise ConfigurationError("beta must be positive")
        if not 0 < self.armijo_alpha <= 0.5:
            raise ConfigurationError("armijo_alpha must lie in (0, 1/2]")
        if not 0 < self.armijo_gamma < 1:
            raise ConfigurationError("armijo_gamma must lie in (0, 1)")
        if not self.tol > 0:
            raise ConfigurationError("tol must be positive")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be at least 1")


@dataclass(frozen=True)
class IterationRecord:
    k: int
    F: float
    gap: float
    support_size: int
    step: float
    inserted_node: int | None
    wall_time: float
    mass: float
    F_half: float = float("nan")
    prune_passes: int = 0
    newton_iterations: int = 0
    flags: str = ""


@dataclass
class SolverResult:
    design: DesignMeasure
    history: list
    m0: float
    converged: bool
    status: str = "converged"  # or "max_iter", "rounding-floor"

    @property
    def F(self) -> float:
        return self.history[-1].F

    @property
    def gap(self) -> float:
        return self.history[-1].gap

    @property
    def iterations(self) -> int:
        return len(self.history)


def phi_m0(t: float, m0: float) -> float:
    """Identity up to ``m0``, continued quadratically (C^1) beyond it."""
    if t < 0:
        raise ValueError("phi_m0 is defined for t >= 0")
    return t if t <= m0 else (t * t + m0 * m0) / (2.0 * m0)


def insertion_candidate(field_values: np.ndarray, beta: float, m0: float):
    """Global minimizer of the gradient (lowest index on ties) and the insertion mass."""
    j = int(np.argmin(field_values))
    g = float(field_values[j])
    theta = 0.0 if g >= -beta else -(m0 / beta) * g
    return j, theta


def primal_dual_gap(weights, grad_on_support, grad_at_candidate: float, theta: float,
                    beta: float, m0: float) -> float:
    """``<psi', omega - v> + beta |omega| - beta phi(|v|)`` for ``v = theta delta_xhat``."""
    own = float(np.dot(np.asarray(weights), np.asarray(grad_on_support) + beta))
    return own - theta * grad_at_candidate - beta * phi_m0(theta, m0)


def armijo_step(decrease, gap: float, alpha: float = 0.5, gamma: float = 0.5,
                max_halvings: int = MAX_HALVINGS) -> float:
    """Largest ``s = gamma^n`` with ``alpha * s * gap <= decrease(s)``.

    ``decrease(s)`` returns ``F(omega) - F(omega + s (v - omega))`` and may be
    ``-inf`` outside the domain, which counts as a failed trial.
    """
    s = 1.0
    for _ in range(max_halvings + 1):
        if alpha * s * gap <= decrease(s):
            return s
        s *= gamma
    raise StagnationError(f"no acceptable step after {max_halvings} reductions (gap {gap:.3e})")


def default_initial_design(basis: SensitivityBasis) -> DesignMeasure:
    """Unit weights at the candidates closest to three fixed points.

    Further fixed points are added one at a time while the information matrix
    is singular. A single-candidate basis gets one unit atom.
    """
    primary = [(0.25, 0.25), (0.25, 0.75), (0.75, 0.5)]
    extra = [(0.5, 0.5), (0.25, 0.5), (0.75, 0.25)]
    nodes: list[int] = []
    for p in primary + extra:
        if len(nodes) >= len(primary) and is_pd(fisher_matrix(basis.values[nodes], np.ones(len(nodes)))):
            break
        j = int(np.argmin(np.sum((basis.points - np.asarray(p)) ** 2, axis=1)))
        if j not in nodes:
            nodes.append(j)
    return DesignMeasure.on_basis(basis, nodes, np.ones(len(nodes)))


class _State:
    """Mutable iterate: support node indices, weights and the information matrix."""

    def __init__(self, basis, nodes, weights, criterion, I0, beta):
        self.basis = basis
        self.criterion = criterion
        self.I0 = I0
        self.beta = beta
        self.set(np.asarray(nodes, dtype=np.int64), np.asarray(weights, dtype=float))

    def set(self, nodes, weights):
        self.nodes = nodes
        self.weights = weights
        self.vectors = self.basis.values[nodes]
        self.fisher = fisher_matrix(self.vectors, weights)
        self.N = self.fisher + self.I0
        self.mass = float(weights.sum())
        self.F = self.criterion.value(self.N) + self.beta * self.mass


def solve(config: SolverConfig, basis: SensitivityBasis, callback=None) -> SolverResult:
    crit, beta = config.criterion, float(config.beta)
    n = basis.n_params
    I0 = np.zeros((n, n)) if config.I0 is None else np.asarray(config.I0, dtype=float)
    init = config.initial_design if config.initial_design is not None else default_initial_design(basis)
    if len(init) > n * (n + 1) // 2 and config.post_process:
        log.info("initial design has %d atoms; it will be pruned after the first step", len(init))
    state = _State(basis, init.nodes, init.weights, crit, I0, beta)
    if not np.isfinite(state.F):
        raise ConfigurationError("initial design has a singular information matrix")
    m0 = state.F / beta
    history: list[IterationRecord] = []
    t_start = time.perf_counter()
    converged = False
    k = 1
    pending = None  # bookkeeping for the step that produced the current iterate

    while True:
        G = crit.gradient(state.N)
        field_values = quad_forms(basis.values, G, basis.products)
        j, theta = insertion_candidate(field_values, beta, m0)
        g_hat = float(field_values[j])
        gap = primal_dual_gap(state.weights, field_values[state.nodes], g_hat, theta, beta, m0)
        done = gap <= config.tol or k >= config.max_iter

        step = 0.0
        floor_hit = False
        if not done:
            dN_dir = theta * np.outer(basis.values[j], basis.values[j]) - state.fisher
            mass_target = theta

            def decrease(s):
                dpsi = crit.decrease(state.N, s * dN_dir)
                mass_s = (1.0 - s) * state.mass + s * mass_target
                if mass_s <= m0:
                    dmass = s * (state.mass - mass_target)
                else:
                    dmass = state.mass - phi_m0(mass_s, m0)
                return dpsi + beta * dmass

            try:
                step = armijo_step(decrease, gap, config.armijo_alpha, config.armijo_gamma)
            except StagnationError:
                # the insertion direction is resolved below rounding; with a
                # weight-update step the candidate still enters the subproblem
                if config.variant == "gcg" or theta == 0.0:
                    raise
                floor_hit = True

        rec = dict(k=k, F=state.F, gap=gap, support_size=len(state.nodes), step=step,
                   inserted_node=(j if theta > 0 and not done else None),
                   wall_time=time.perf_counter() - t_start, mass=state.mass)
        if pending is not None:
            rec.update(pending)
        record = IterationRecord(**rec)
        history.append(record)
        if callback is not None:
            callback(record)
        if done:
            converged = gap <= config.tol
            status = "converged" if converged else "max_iter"
            break

        # intermediate iterate (1 - s) omega + s theta delta_j
        lam = (1.0 - step) * state.weights
        nodes = state.nodes
        if theta > 0:
            hit = np.flatnonzero(nodes == j)
            if hit.size:
                lam[hit[0]] += step * theta
            else:
                nodes = np.append(nodes, j)
                lam = np.append(lam, step * theta)
        state.set(nodes, lam)
        F_half = state.F
        pending = {"F_half": F_half}
        flags = ["armijo-floor"] if floor_hit else []
        before = (F_half, set(state.nodes[state.weights > 0].tolist()), (state.nodes, state.weights))

        if config.variant != "gcg":
            sub = Subproblem(state.vectors, crit, beta, I0, warm_start=state.weights)
            if config.variant == "spinat":
                grad = sub.gradient(state.weights)
                new, sigma = spinat_step(state.weights, grad, beta,
                                         lambda trial: sub.decrease(state.weights, trial))
                if sigma == 0.0:
                    flags.append("spinat-nodescent")
            else:
                new, report = pdap_subproblem(sub, tol=config.subproblem_tol)
                pending["newton_iterations"] = report.iterations
                if not report.converged:
                    flags.append("newton-unconverged")
                if report.fallback_steps:
                    flags.append("newton-fallback")
            keep = new > PRUNE_REL * new.sum()
            state.set(state.nodes[keep], new[keep])
        else:
            keep = state.weights > PRUNE_REL * state.mass
            if not np.all(keep):
                state.set(state.nodes[keep], state.weights[keep])

        if floor_hit and state.F >= before[0] and set(state.nodes.tolist()) == before[1]:
            # the last logged iterate is optimal up to rounding: stop there
            state.set(*before[2])
            status = "rounding-floor"
            log.info("stopping at the rounding floor (gap %.3e)", gap)
            break

        if config.post_process:
            mask, lam_pp, passes = prune_weights(state.vectors, state.weights)
            if passes:
                state.set(state.nodes[mask], lam_pp)
            pending["prune_passes"] = passes
        pending["flags"] = ",".join(flags)
        k += 1

    design = DesignMeasure(state.nodes, state.weights, basis.points[state.nodes])
    return SolverResult(design=design, history=history, m0=m0, converged=converged, status=status)
