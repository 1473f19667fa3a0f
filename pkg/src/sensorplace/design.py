"""Design measures, Fisher information and the A / weighted-A / D criteria."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .fem import SensitivityBasis

PRUNE_REL = 1e-14


class DomainError(ValueError):
    """Information matrix is not positive definite (criterion is +inf there)."""


@dataclass(frozen=True)
class DesignMeasure:
    """Finite nonnegative atomic measure ``sum_j w_j delta_{x_j}`` on candidate nodes.

    Atoms are keyed by node index; duplicates are merged and weights at or
    below ``PRUNE_REL * total_mass`` are dropped on construction.
    """

    nodes: np.ndarray
    weights: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if not (len(nodes) == len(weights) == len(points)):
            raise ValueError("nodes, weights and points must have equal length")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and nonnegative")
        if len(np.unique(nodes)) != len(nodes):
            uniq, first, inv = np.unique(nodes, return_index=True, return_inverse=True)
            order = np.argsort(first)
            merged = np.zeros(len(uniq))
            np.add.at(merged, inv, weights)
            nodes, weights, points = uniq[order], merged[order], points[first[order]]
        keep = weights > PRUNE_REL * weights.sum()
        object.__setattr__(self, "nodes", nodes[keep])
        object.__setattr__(self, "weights", weights[keep])
        object.__setattr__(self, "points", points[keep])

    @classmethod
    def empty(cls) -> "DesignMeasure":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, 2)))

    @classmethod
    def on_basis(cls, basis: SensitivityBasis, nodes, weights) -> "DesignMeasure":
        nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
        return cls(nodes, weights, basis.points[nodes])

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def __len__(self):
        return len(self.nodes)

    def atoms(self):
        return list(zip(self.nodes.tolist(), map(tuple, self.points.tolist()), self.weights.tolist()))

    def scaled(self, factor: float) -> "DesignMeasure":
        return DesignMeasure(self.nodes, factor * self.weights, self.points)

    def __add__(self, other: "DesignMeasure") -> "DesignMeasure":
        return DesignMeasure(
            np.concatenate([self.nodes, other.nodes]),
            np.concatenate([self.weights, other.weights]),
            np.concatenate([self.points, other.points]),
        )


def fisher_matrix(vectors: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_j w_j v_j v_j^T`` for the rows ``v_j`` of ``vectors``."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    w = np.asarray(weights, dtype=float)
    # sequential accumulation over atoms: zero weights leave the result bit-identical
    return np.sum(w[:, None, None] * vectors[:, :, None] * vectors[:, None, :], axis=0)


def fisher(measure: DesignMeasure, basis: SensitivityBasis) -> np.ndarray:
    if len(measure) == 0:
        return np.zeros((basis.n_params, basis.n_params))
    return fisher_matrix(basis.values[measure.nodes], measure.weights)


def pair_products(vectors: np.ndarray) -> np.ndarray:
    """Rows ``v_a * v_b`` for ``a <= b`` (upper-triangle order), shape ``(n(n+1)/2, m)``."""
    V = np.atleast_2d(np.asarray(vectors, dtype=float))
    iu, ju = np.triu_indices(V.shape[1])
    return np.ascontiguousarray((V[:, iu] * V[:, ju]).T)


def quad_forms(vectors: np.ndarray, G: np.ndarray, products: np.ndarray | None = None) -> np.ndarray:
    """Row-wise ``v^T G v`` for symmetric ``G``.

    Uses elementwise operations in a fixed order, so a row gives bit-identical
    results whether it is evaluated alone or inside a large array. The solver
    relies on this when it compares support values from the weight subproblem
    with the full gradient field. ``products`` may carry precomputed
    :func:`pair_products` of ``vectors``.
    """
    P = pair_products(vectors) if products is None else products
    iu, ju = np.triu_indices(G.shape[0])
    coef = np.where(iu == ju, 1.0, 2.0) * G[iu, ju]
    out = P[0] * coef[0]
    tmp = np.empty_like(out)
    for k in range(1, len(coef)):
        np.multiply(P[k], coef[k], out=tmp)
        np.add(out, tmp, out=out)
    return out


def _cholesky(N):
    """Lower Cholesky factor, or ``None`` if ``N`` is not positive definite."""
    try:
        L = np.linalg.cholesky(N)
    except np.linalg.LinAlgError:
        return None
    return L if np.all(np.isfinite(L)) else None


def is_pd(N) -> bool:
    return _cholesky(np.asarray(N, dtype=float)) is not None


def _inverse(N):
    L = _cholesky(N)
    if L is None:
        raise DomainError("information matrix is not positive definite")
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv, L


class Criterion:
    """Smooth convex design criterion acting on positive definite matrices."""

    name = "?"

    def value(self, N) -> float:
        raise NotImplementedError

    def gradient(self, N) -> np.ndarray:
        raise NotImplementedError

    def decrease(self, N, dN) -> float:
        """``value(N) - value(N + dN)`` without the cancellation of a plain difference.

        Returns ``-inf`` when ``N + dN`` leaves the domain.
        """
        raise NotImplementedError

    def coefficient_hessian(self, N, vectors) -> np.ndarray:
        """Hessian of ``lam -> value(sum_j lam_j v_j v_j^T + ...)`` at information ``N``."""
        raise NotImplementedError

    def is_homogeneous(self) -> bool:
        return True


class WeightedACriterion(Criterion):
    """``Tr(W N^{-1} W)``; the plain A criterion is ``W = I``."""

    name = "wA"

    def __init__(self, W):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        if W.shape[0] != W.shape[1] or not np.allclose(W, W.T):
            raise ValueError("weight matrix must be square and symmetric")
        self.W = W

    def __repr__(self):
        return f"{type(self).__name__}(W={self.W.tolist()})"

    def _w2(self, n):
        return self.W @ self.W

    def value(self, N) -> float:
        N = np.asarray(N, dtype=float)
        L = _cholesky(N)
        if L is None:
            return np.inf
        Linv = np.linalg.inv(L)
        return float(np.sum(self._w2(N.shape[0]) * (Linv.T @ Linv)))

    def gradient(self, N) -> np.ndarray:
        inv, _ = _inverse(np.asarray(N, dtype=float))
        g = -inv @ self._w2(inv.shape[0]) @ inv
        return 0.5 * (g + g.T)

    def decrease(self, N, dN) -> float:
        N = np.asarray(N, dtype=float)
        try:
            inv_m, _ = _inverse(N + dN)
        except DomainError:
            return -np.inf
        inv_n, _ = _inverse(N)
        # N^{-1} - M^{-1} = M^{-1} dN N^{-1}
        return float(np.sum(self._w2(N.shape[0]) * (inv_m @ dN @ inv_n)))

    def coefficient_hessian(self, N, vectors) -> np.ndarray:
        inv, _ = _inverse(np.asarray(N, dtype=float))
        V = np.asarray(vectors, dtype=float)
        P = V @ inv @ V.T
        B = V @ (inv @ self._w2(inv.shape[0]) @ inv) @ V.T
        H = 2.0 * P * B
        return 0.5 * (H + H.T)


class ACriterion(WeightedACriterion):
    name = "A"

    def __init__(self):
        self.W = None

    def __repr__(self):
        return "ACriterion()"

    def _w2(self, n):
        return np.eye(n)


class DCriterion(Criterion):
    """``det(N^{-1})``, evaluated through the log-determinant of a Cholesky factor."""

    name = "D"

    def __repr__(self):
        return "DCriterion()"

    @staticmethod
    def _logdet(L) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(L))))

    def log_value(self, N) -> float:
        L = _cholesky(np.asarray(N, dtype=float))
        return np.inf if L is None else -self._logdet(L)

    def value(self, N) -> float:
        return float(np.exp(self.log_value(N)))

    def gradient(self, N) -> np.ndarray:
        N = np.asarray(N, dtype=float)
        inv, L = _inverse(N)
        return -np.exp(-self._logdet(L)) * inv

    def decrease(self, N, dN) -> float:
        N = np.asarray(N, dtype=float)
        L = _cholesky(N)
        if L is None:
            raise DomainError("information matrix is not positive definite")
        if _cholesky(N + dN) is None:
            return -np.inf
        X = sla.solve_triangular(L, dN, lower=True)
        E = sla.solve_triangular(L, X.T, lower=True)
        mu = np.linalg.eigvalsh(0.5 * (E + E.T))
        if np.any(mu <= -1.0):
            return -np.inf
        # det(N^{-1}) - det(M^{-1}) = det(N^{-1}) * (1 - 1/det(I + E))
        return float(-np.exp(-self._logdet(L)) * np.expm1(-np.sum(np.log1p(mu))))

    def coefficient_hessian(self, N, vectors) -> np.ndarray:
        N = np.asarray(N, dtype=float)
        inv, L = _inverse(N)
        d = np.exp(-self._logdet(L))
        V = np.asarray(vectors, dtype=float)
        P = V @ inv @ V.T
        p = np.diag(P)
        H = d * (np.outer(p, p) + P * P)
        return 0.5 * (H + H.T)


def make_criterion(kind: str, weights=None) -> Criterion:
    kind = kind.strip()
    if kind == "A":
        return ACriterion()
    if kind == "D":
        return DCriterion()
    if kind == "wA":
        if weights is None:
            raise ValueError("weighted A criterion needs a weight diagonal")
        return WeightedACriterion(np.diag(np.asarray(weights, dtype=float)))
    raise ValueError(f"unknown criterion {kind!r}")


def criterion_value(c: Criterion, N) -> float:
    return c.value(N)


def criterion_gradient(c: Criterion, N) -> np.ndarray:
    return c.gradient(N)


def information(measure: DesignMeasure, basis: SensitivityBasis, I0=None) -> np.ndarray:
    N = fisher(measure, basis)
    return N if I0 is None else N + np.asarray(I0, dtype=float)


def reduced_gradient_field(measure: DesignMeasure, basis: SensitivityBasis, c: Criterion,
                           I0=None) -> np.ndarray:
    """``psi'(omega)(x) = s(x)^T Psi'(N) s(x)`` for every candidate point."""
    G = c.gradient(information(measure, basis, I0))
    return quad_forms(basis.values, G, basis.products)


def objective(measure: DesignMeasure, basis: SensitivityBasis, c: Criterion, I0, beta: float) -> float:
    return c.value(information(measure, basis, I0)) + beta * measure.total_mass


def beta_zero(basis: SensitivityBasis, c: Criterion, I0) -> float:
    """Smallest cost for which the empty design is optimal."""
    I0 = np.asarray(I0, dtype=float)
    if not is_pd(I0):
        raise DomainError("I0 must be positive definite")
    return float(max(0.0, -quad_forms(basis.values, c.gradient(I0), basis.products).min()))


@dataclass(frozen=True)
class OptimalityReport:
    global_violation: float  # max_x(-psi'(x)) - beta
    support_gap: float  # max_j |psi'(x_j) + beta|
    kw_residual: float  # <psi', omega> - min psi' * mass
    pairing: float  # <psi', omega>
    min_gradient: float
    argmin_node: int

    def as_dict(self):
        return {
            "global_violation": self.global_violation,
            "support_gap": self.support_gap,
            "kw_residual": self.kw_residual,
            "pairing": self.pairing,
            "min_gradient": self.min_gradient,
            "argmin_node": self.argmin_node,
        }


def check_optimality(measure: DesignMeasure, basis: SensitivityBasis, c: Criterion, I0,
                     beta: float) -> OptimalityReport:
    """First-order certificates for the penalized and the budget-constrained problem."""
    field = reduced_gradient_field(measure, basis, c, I0)
    j = int(np.argmin(field))
    on_support = field[measure.nodes]
    pairing = float(np.dot(on_support, measure.weights))
    gap = float(np.max(np.abs(on_support + beta))) if len(measure) else 0.0
    return OptimalityReport(
        global_violation=float(-field[j] - beta),
        support_gap=gap,
        kw_residual=pairing - float(field[j]) * measure.total_mass,
        pairing=pairing,
        min_gradient=float(field[j]),
        argmin_node=j,
    )
