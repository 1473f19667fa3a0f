"""Caratheodory-type support reduction that keeps the Fisher matrix fixed."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import PRUNE_REL, DesignMeasure
from .fem import SensitivityBasis

RANK_TOL = 1e-12
TIE_TOL = 1e-12


def vectorize_rank_one(vectors: np.ndarray) -> np.ndarray:
    """Columns ``vec(v v^T)`` in R^{n(n+1)/2}: upper triangle, off-diagonals times sqrt(2)."""
    V = np.atleast_2d(np.asarray(vectors, dtype=float))
    n = V.shape[1]
    iu, ju = np.triu_indices(n)
    scale = np.where(iu == ju, 1.0, np.sqrt(2.0))
    return (V[:, iu] * V[:, ju] * scale).T


@dataclass(frozen=True)
class PruneDirection:
    gamma: np.ndarray
    mu: float


def null_direction(vectors: np.ndarray, weights: np.ndarray | None = None) -> PruneDirection | None:
    """Kernel direction of the vectorized rank-one matrices, or ``None`` if they are independent.

    The sign is fixed so that ``sum(gamma) >= 0``. ``mu = max_j gamma_j / w_j``
    is filled in when ``weights`` is given.
    """
    A = vectorize_rank_one(vectors)
    d, m = A.shape
    if m == 0:
        return None
    _, sv, vt = np.linalg.svd(A, full_matrices=True)
    smax = sv[0] if sv.size else 0.0
    rank = int(np.sum(sv > RANK_TOL * smax)) if smax > 0 else 0
    if rank >= m:
        return None
    gamma = vt[-1].copy()
    if gamma.sum() < 0:
        gamma = -gamma
    mu = float(np.max(gamma / weights)) if weights is not None else float("nan")
    return PruneDirection(gamma, mu)


def prune_weights(vectors: np.ndarray, weights: np.ndarray):
    """Run the removal loop on raw arrays.

    Returns ``(keep_mask, new_weights, passes)`` where ``new_weights`` is
    aligned with the kept atoms and ``passes`` counts loop executions.
    """
    V = np.asarray(vectors, dtype=float)
    lam = np.asarray(weights, dtype=float).copy()
    idx = np.arange(len(lam))
    passes = 0
    while True:
        direction = null_direction(V[idx], lam)
        if direction is None:
            break
        passes += 1
        gamma, mu = direction.gamma, direction.mu
        ratio = gamma / lam
        hit = ratio >= mu * (1.0 - TIE_TOL)
        new = lam - gamma / mu
        new[hit] = 0.0
        keep = new > PRUNE_REL * lam.sum()
        idx, lam = idx[keep], new[keep]
        if len(lam) == 0:
            break
    mask = np.zeros(len(weights), dtype=bool)
    mask[idx] = True
    return mask, lam, passes


def prune(measure: DesignMeasure, basis: SensitivityBasis) -> DesignMeasure:
    if len(measure) == 0:
        return measure
    mask, lam, _ = prune_weights(basis.values[measure.nodes], measure.weights)
    return DesignMeasure(measure.nodes[mask], lam, measure.points[mask])
