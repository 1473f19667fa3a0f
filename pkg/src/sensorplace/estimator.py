"""Linearized least-squares estimator, its covariance and confidence ellipses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .design import DesignMeasure, DomainError, _inverse, information
from .fem import SensitivityBasis


class EstimationError(ValueError):
    """Sensitivity matrix is rank deficient; the estimator is undefined."""


def covariance(measure: DesignMeasure, basis: SensitivityBasis, I0=None) -> np.ndarray:
    """``(I(omega) + I0)^{-1}``, the covariance of the linearized estimator."""
    inv, _ = _inverse(information(measure, basis, I0))
    return 0.5 * (inv + inv.T)


def scale_to_budget(measure: DesignMeasure, K: float) -> DesignMeasure:
    """Rescale a penalized optimum to total mass ``K``.

    Valid as an optimum of the budget-constrained problem only for ``I0 = 0``
    and positively homogeneous criteria (A, weighted A, D).
    """
    if not K > 0:
        raise ValueError("budget K must be positive")
    mass = measure.total_mass
    if len(measure) == 0 or mass <= 0:
        raise ValueError("cannot scale the zero measure")
    return DesignMeasure(measure.nodes, measure.weights * (K / mass), measure.points)


@dataclass(frozen=True)
class LinearizedModel:
    """Observation model linearized at ``q_hat``.

    ``X[j, k]`` is the sensitivity of the state at measurement point ``j``
    to parameter ``k``; ``weights`` are inverse noise variances.
    """

    X: np.ndarray
    weights: np.ndarray
    reference: np.ndarray
    q_hat: np.ndarray

    @classmethod
    def from_design(cls, measure: DesignMeasure, basis: SensitivityBasis, state: np.ndarray, q_hat):
        return cls(
            X=basis.values[measure.nodes],
            weights=measure.weights.copy(),
            reference=np.asarray(state, dtype=float)[measure.nodes],
            q_hat=np.asarray(q_hat, dtype=float),
        )

    def normal_matrix(self) -> np.ndarray:
        return (self.X.T * self.weights) @ self.X

    def covariance(self) -> np.ndarray:
        try:
            inv, _ = _inverse(self.normal_matrix())
        except DomainError as exc:
            raise EstimationError("sensitivity matrix does not have full column rank") from exc
        return inv


def linearized_estimate(model: LinearizedModel, data) -> np.ndarray:
    """``q_hat + (X^T S X)^{-1} X^T S (data - reference)`` with ``S = diag(weights)``."""
    cov = model.covariance()
    r = np.asarray(data, dtype=float) - model.reference
    return model.q_hat + cov @ (model.X.T @ (model.weights * r))


def sample_estimates(model: LinearizedModel, n_draws: int, seed: int = 0) -> np.ndarray:
    """Estimates from synthetic data with Gaussian noise of variance ``1 / weights``."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n_draws, len(model.weights))) / np.sqrt(model.weights)
    data = model.reference + noise
    cov = model.covariance()
    return model.q_hat + (data - model.reference) * model.weights @ model.X @ cov.T


def chi2_quantile(dof: int, confidence_level: float) -> float:
    """Quantile of the chi-squared distribution with ``dof`` degrees of freedom."""
    if dof < 1:
        raise ValueError("dof must be at least 1")
    if not 0.0 < confidence_level < 1.0:
        raise ValueError("confidence level must lie in (0, 1)")
    return 2.0 * float(special.gammaincinv(0.5 * dof, confidence_level))


@dataclass(frozen=True)
class Ellipse:
    center: np.ndarray
    axes: np.ndarray  # columns are unit directions
    semi_axes: np.ndarray
    confidence_level: float

    def polyline(self, n_points: int = 256) -> np.ndarray:
        """Closed polyline; the first and last points coincide exactly."""
        t = np.linspace(0.0, 2.0 * np.pi, n_points)
        unit = np.column_stack([np.cos(t), np.sin(t)]) * self.semi_axes
        pts = self.center + unit @ self.axes.T
        pts[-1] = pts[0]
        return pts


def marginal(cov, pair) -> np.ndarray:
    i, j = pair
    cov = np.asarray(cov, dtype=float)
    return cov[np.ix_([i, j], [i, j])]


def confidence_ellipse(cov, pair, confidence_level: float = 0.5, center=None) -> Ellipse:
    """Linearized confidence ellipse of the 2-D marginal of ``cov`` for ``pair`` (0-based)."""
    sub = marginal(cov, pair)
    evals, evecs = np.linalg.eigh(0.5 * (sub + sub.T))
    if evals[0] <= 0:
        raise DomainError("marginal covariance is not positive definite")
    r2 = chi2_quantile(2, confidence_level)
    c = np.zeros(2) if center is None else np.asarray(center, dtype=float)[list(pair)]
    return Ellipse(center=c, axes=evecs, semi_axes=np.sqrt(r2 * evals), confidence_level=confidence_level)


def ellipse_nested(cov_inner, cov_outer, pair) -> bool:
    """Concentric ellipses at the same level nest iff the marginals are Loewner ordered."""
    diff = marginal(cov_outer, pair) - marginal(cov_inner, pair)
    return bool(np.linalg.eigvalsh(0.5 * (diff + diff.T))[0] >= 0.0)
