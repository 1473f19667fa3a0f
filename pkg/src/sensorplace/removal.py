"""Weight updates on a fixed support: projected gradient (SPINAT) and exact solve (PDAP)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .design import Criterion, DomainError, fisher_matrix, is_pd, quad_forms

log = logging.getLogger(__name__)

MAX_HALVINGS = 60
NEWTON_MAXIT = 100
NEWTON_TOL = 1e-12


@dataclass
class Subproblem:
    """``min_{lam >= 0} Psi(sum_j lam_j s_j s_j^T + I0) + beta * sum(lam)``."""

    vectors: np.ndarray
    criterion: Criterion
    beta: float
    I0: np.ndarray | None = None
    warm_start: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        n = self.vectors.shape[1]
        self.I0 = np.zeros((n, n)) if self.I0 is None else np.asarray(self.I0, dtype=float)
        if self.warm_start is None:
            self.warm_start = np.ones(len(self.vectors))
        self.warm_start = np.asarray(self.warm_start, dtype=float)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    def information(self, lam) -> np.ndarray:
        return fisher_matrix(self.vectors, lam) + self.I0

    def objective(self, lam) -> float:
        return self.criterion.value(self.information(lam)) + self.beta * float(np.sum(lam))

    def gradient(self, lam) -> np.ndarray:
        """Gradient of the smooth part; equals psi' at the support points."""
        return quad_forms(self.vectors, self.criterion.gradient(self.information(lam)))

    def hessian(self, lam) -> np.ndarray:
        return self.criterion.coefficient_hessian(self.information(lam), self.vectors)

    def decrease(self, lam_old, lam_new) -> float:
        """``F(lam_old) - F(lam_new)``, accurate when the two are close."""
        dlam = np.asarray(lam_new, dtype=float) - np.asarray(lam_old, dtype=float)
        dN = fisher_matrix(self.vectors, dlam)
        return self.criterion.decrease(self.information(lam_old), dN) - self.beta * float(dlam.sum())

    def residual(self, lam, grad=None) -> np.ndarray:
        grad = self.gradient(lam) if grad is None else grad
        return np.minimum(lam, grad + self.beta)


def coefficient_hessian(sub: Subproblem, lam) -> np.ndarray:
    N = sub.information(lam)
    if not is_pd(N):
        raise DomainError("information matrix is not positive definite")
    return sub.criterion.coefficient_hessian(N, sub.vectors)


def spinat_sigma0(lam, grad, beta) -> float:
    slack = -grad - beta
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(slack != 0, lam / slack, np.inf)
    return max(100.0, -2.0 * float(np.min(ratios))) if len(lam) else 100.0


def spinat_step(lam, grad, beta: float, decrease, sigma0: float | None = None):
    """One projected-gradient step on the weights with halving of the step size.

    ``decrease(lam_new)`` must return ``F(lam) - F(lam_new)``. Returns the new
    weight vector (zeros mark removed atoms) and the accepted ``sigma``; after
    ``MAX_HALVINGS`` failures the input weights are returned with ``sigma = 0``.
    """
    lam = np.asarray(lam, dtype=float)
    grad = np.asarray(grad, dtype=float)
    sigma = spinat_sigma0(lam, grad, beta) if sigma0 is None else sigma0
    direction = grad + beta
    if not np.any(direction):
        return lam.copy(), sigma
    for _ in range(MAX_HALVINGS + 1):
        trial = np.maximum(lam - sigma * direction, 0.0)
        if decrease(trial) >= 0.0:
            return trial, sigma
        sigma *= 0.5
    return lam.copy(), 0.0


@dataclass
class NewtonReport:
    iterations: int = 0
    residual: float = np.inf
    converged: bool = False
    fallback_steps: int = 0
    history: list = field(default_factory=list)


def _projected_gradient(sub: Subproblem, lam, grad):
    def dec(trial):
        return sub.decrease(lam, trial)

    new, sigma = spinat_step(lam, grad, sub.beta, dec, sigma0=max(1.0, float(np.max(lam, initial=1.0))))
    return new


def pdap_subproblem(sub: Subproblem, tol: float = NEWTON_TOL, maxit: int = NEWTON_MAXIT,
                    polish: int = 2):
    """Solve the weight subproblem by a primal active-set semismooth Newton method.

    Active set ``{j : lam_j - (g_j + beta) <= 0}``; the Newton system is solved
    on the complement and the step is globalized by projected backtracking on
    the objective. After the residual drops below ``tol`` up to ``polish``
    extra steps are taken while they reduce it further, which drives the
    residual to rounding level. Returns ``(lam, report)``.
    """
    lam = np.maximum(np.asarray(sub.warm_start, dtype=float).copy(), 0.0)
    report = NewtonReport()
    if not np.isfinite(sub.objective(lam)):
        raise DomainError("warm start of the weight subproblem is outside the domain")
    beta = sub.beta
    extra = 0
    grad = sub.gradient(lam)
    res = float(np.max(np.abs(sub.residual(lam, grad))))
    report.history.append(res)
    for it in range(maxit):
        if res <= tol:
            if extra >= polish:
                break
        active = lam - (grad + beta) <= 0.0
        inactive = ~active
        d = np.zeros_like(lam)
        d[active] = -lam[active]
        if np.any(inactive):
            H = sub.hessian(lam)
            rhs = -(grad[inactive] + beta) - H[np.ix_(inactive, active)] @ d[active]
            Hii = H[np.ix_(inactive, inactive)]
            try:
                d[inactive] = np.linalg.solve(Hii, rhs)
            except np.linalg.LinAlgError:
                d[inactive] = np.linalg.lstsq(Hii, rhs, rcond=None)[0]

        accepted = None
        if res <= tol:
            # rounding regime: only take the full step, judged by the residual
            trial = np.maximum(lam + d, 0.0)
            if is_pd(sub.information(trial)):
                tgrad = sub.gradient(trial)
                tres = float(np.max(np.abs(sub.residual(trial, tgrad))))
                if tres < res and sub.decrease(lam, trial) >= -1e-15 * abs(sub.objective(lam)):
                    accepted = (trial, tgrad, tres)
            extra += 1
            if accepted is None:
                break
        else:
            t = 1.0
            slope = float(np.dot(grad + beta, d))
            for _ in range(MAX_HALVINGS):
                trial = np.maximum(lam + t * d, 0.0)
                dec = sub.decrease(lam, trial)
                if dec >= -1e-4 * t * min(slope, 0.0) and dec >= 0.0:
                    accepted = (trial, None, None)
                    break
                t *= 0.5
            if accepted is None:
                report.fallback_steps += 1
                trial = _projected_gradient(sub, lam, grad)
                accepted = (trial, None, None)
        lam = accepted[0]
        grad = sub.gradient(lam) if accepted[1] is None else accepted[1]
        res = float(np.max(np.abs(sub.residual(lam, grad)))) if accepted[2] is None else accepted[2]
        report.iterations = it + 1
        report.history.append(res)
    report.residual = res
    report.converged = res <= tol
    if not report.converged:
        log.warning("weight subproblem stopped at residual %.3e after %d steps", res, report.iterations)
    return lam, report
