"""Linear finite elements for the convection-diffusion model on the unit square.

The state ``y = S[q]`` solves

    -q1 * Laplace(y) + (q2, q3) . grad(y) = f   in (0, 1)^2,   y = 0 on the boundary,

with ``f(x) = exp(3 (x1^2 + x2^3))``.  The derivatives of ``S`` with respect to
the three coefficients (the sensitivities) are obtained from the same
operator with right-hand sides ``-K y``, ``-Cx y`` and ``-Cy y``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

MAX_LEVEL = 12
RESIDUAL_TOL = 1e-10


class ConfigurationError(ValueError):
    """Invalid user-supplied setting (mesh level, parameter vector, ...)."""


class SolverError(RuntimeError):
    """A linear solve did not reach the requested residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def default_forcing(x1, x2):
    return np.exp(3.0 * (x1**2 + x2**3))


@dataclass(frozen=True)
class Mesh:
    """Uniform Friedrichs-Keller triangulation of the unit square.

    Nodes are numbered lexicographically with ``x1`` running fastest; every
    square cell is split along its SW-NE diagonal.
    """

    level: int
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_mask: np.ndarray

    @property
    def h(self) -> float:
        return np.sqrt(2.0) * 2.0 ** (-self.level)

    @property
    def spacing(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_per_side(self) -> int:
        return 2**self.level + 1

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    def nearest_node(self, point) -> int:
        """Index of the node closest to ``point`` (lowest index on ties)."""
        d2 = np.sum((self.nodes - np.asarray(point, dtype=float)) ** 2, axis=1)
        return int(np.argmin(d2))


def build_mesh(level: int) -> Mesh:
    if not isinstance(level, (int, np.integer)) or not 1 <= level <= MAX_LEVEL:
        raise ConfigurationError(f"mesh level must be an integer in [1, {MAX_LEVEL}], got {level!r}")
    level = int(level)
    n = 2**level
    ticks = np.linspace(0.0, 1.0, n + 1)
    x1, x2 = np.meshgrid(ticks, ticks, indexing="xy")
    nodes = np.column_stack([x1.ravel(), x2.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    sw = (i + j * (n + 1)).ravel()
    se = sw + 1
    ne = sw + n + 2
    nw = sw + n + 1
    triangles = np.concatenate(
        [np.column_stack([sw, se, ne]), np.column_stack([sw, ne, nw])]
    ).astype(np.int64)

    on_edge = (
        np.isclose(nodes[:, 0], 0.0)
        | np.isclose(nodes[:, 0], 1.0)
        | np.isclose(nodes[:, 1], 0.0)
        | np.isclose(nodes[:, 1], 1.0)
    )
    return Mesh(level=level, nodes=nodes, triangles=triangles, boundary_mask=on_edge)


@dataclass(frozen=True)
class Operators:
    """Global P1 matrices on all nodes (boundary rows included)."""

    stiffness: sp.csr_matrix
    convection_x: sp.csr_matrix
    convection_y: sp.csr_matrix
    load: np.ndarray

    def system(self, q) -> sp.csr_matrix:
        q1, q2, q3 = q
        return (q1 * self.stiffness + q2 * self.convection_x + q3 * self.convection_y).tocsr()


def _element_geometry(mesh: Mesh):
    p = mesh.nodes[mesh.triangles]  # (T, 3, 2)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * np.abs(det)
    # gradients of the barycentric coordinates, shape (T, 3, 2)
    grads = np.empty((len(det), 3, 2))
    grads[:, 1, 0] = d2[:, 1] / det
    grads[:, 1, 1] = -d2[:, 0] / det
    grads[:, 2, 0] = -d1[:, 1] / det
    grads[:, 2, 1] = d1[:, 0] / det
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    return p, area, grads


def assemble(mesh: Mesh, q=None, forcing: Callable = default_forcing) -> Operators:
    """Assemble stiffness, the two convection matrices and the load vector.

    ``q`` is accepted for interface symmetry; the operators themselves do not
    depend on it (the system is ``q1 K + q2 Cx + q3 Cy``).
    """
    if q is not None and q[0] <= 0:
        raise ConfigurationError("diffusion coefficient q1 must be positive")
    p, area, grads = _element_geometry(mesh)
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    nn = mesh.n_nodes

    k_loc = area[:, None, None] * np.einsum("tik,tjk->tij", grads, grads)
    # (phi_i, d phi_j / dx): phi_i integrates to area/3, the derivative is constant
    cx_loc = (area / 3.0)[:, None, None] * np.broadcast_to(grads[:, None, :, 0], (len(area), 3, 3))
    cy_loc = (area / 3.0)[:, None, None] * np.broadcast_to(grads[:, None, :, 1], (len(area), 3, 3))

    def _coo(local):
        return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(nn, nn)).tocsr()

    # edge-midpoint rule, exact for quadratics: phi_i is 1/2 on its two edges
    mids = 0.5 * (p[:, [0, 1, 2]] + p[:, [1, 2, 0]])  # midpoints of edges 01, 12, 20
    fm = forcing(mids[..., 0], mids[..., 1])
    b_loc = (area / 6.0)[:, None] * np.column_stack(
        [fm[:, 0] + fm[:, 2], fm[:, 0] + fm[:, 1], fm[:, 1] + fm[:, 2]]
    )
    load = np.bincount(tri.ravel(), weights=b_loc.ravel(), minlength=nn)
    return Operators(_coo(k_loc), _coo(cx_loc), _coo(cy_loc), load)


@dataclass
class InteriorSolver:
    """Factorized interior block of ``A(q)`` shared by state and sensitivity solves."""

    mesh: Mesh
    ops: Operators
    q: tuple
    _lu: object = field(init=False, repr=False)
    _matrix: sp.csc_matrix = field(init=False, repr=False)

    def __post_init__(self):
        idx = self.mesh.interior
        self._matrix = self.ops.system(self.q)[idx][:, idx].tocsc()
        self._lu = spla.splu(self._matrix)

    def solve(self, rhs_interior: np.ndarray) -> np.ndarray:
        """Solve on interior nodes and return the full nodal vector (zero on the boundary)."""
        x = self._lu.solve(rhs_interior)
        norm_b = np.linalg.norm(rhs_interior)
        res = np.linalg.norm(rhs_interior - self._matrix @ x) / max(norm_b, np.finfo(float).tiny)
        for _ in range(3):
            if res <= RESIDUAL_TOL:
                break
            x = x + self._lu.solve(rhs_interior - self._matrix @ x)
            res = np.linalg.norm(rhs_interior - self._matrix @ x) / max(norm_b, np.finfo(float).tiny)
        if norm_b > 0 and res > RESIDUAL_TOL:
            raise SolverError(f"linear solve stalled at relative residual {res:.3e}", residual=res)
        full = np.zeros(self.mesh.n_nodes)
        full[self.mesh.interior] = x
        return full


def _check_q(q):
    q = tuple(float(v) for v in q)
    if len(q) != 3:
        raise ConfigurationError("parameter vector must have three entries")
    if not q[0] > 0:
        raise ConfigurationError("diffusion coefficient q1 must be positive")
    return q


def solve_state(mesh: Mesh, q, forcing: Callable = default_forcing, ops: Operators | None = None,
                solver: InteriorSolver | None = None) -> np.ndarray:
    q = _check_q(q)
    ops = ops if ops is not None else assemble(mesh, q, forcing)
    solver = solver if solver is not None else InteriorSolver(mesh, ops, q)
    return solver.solve(ops.load[mesh.interior])


def solve_sensitivities(mesh: Mesh, q, state: np.ndarray, ops: Operators | None = None,
                        solver: InteriorSolver | None = None) -> list[np.ndarray]:
    """Derivatives of the discrete state with respect to q1, q2, q3."""
    q = _check_q(q)
    ops = ops if ops is not None else assemble(mesh, q)
    solver = solver if solver is not None else InteriorSolver(mesh, ops, q)
    idx = mesh.interior
    out = []
    for mat in (ops.stiffness, ops.convection_x, ops.convection_y):
        out.append(solver.solve(-(mat @ state)[idx]))
    return out


def _radon_rule():
    """Seven-point rule on the reference triangle, exact for degree 5 (barycentric, weights sum to 1)."""
    r = np.sqrt(15.0)
    a, b = (6.0 - r) / 21.0, (6.0 + r) / 21.0
    bary = [(1 / 3, 1 / 3, 1 / 3)]
    bary += [(a, a, 1 - 2 * a), (a, 1 - 2 * a, a), (1 - 2 * a, a, a)]
    bary += [(b, b, 1 - 2 * b), (b, 1 - 2 * b, b), (1 - 2 * b, b, b)]
    w = [9.0 / 40.0] + [(155.0 - r) / 1200.0] * 3 + [(155.0 + r) / 1200.0] * 3
    return np.array(bary), np.array(w)


def l2_error(mesh: Mesh, values: np.ndarray, exact: Callable) -> float:
    """``||u_h - u||_{L2}`` for the P1 interpolant of nodal ``values``."""
    bary, w = _radon_rule()
    p, area, _ = _element_geometry(mesh)
    pts = np.einsum("qi,tid->tqd", bary, p)
    uh = np.einsum("qi,ti->tq", bary, np.asarray(values, dtype=float)[mesh.triangles])
    err = uh - exact(pts[..., 0], pts[..., 1])
    return float(np.sqrt(np.sum(area[:, None] * w * err**2)))


@dataclass(frozen=True)
class SensitivityBasis:
    """Sensitivity vector ``s(x)`` for every candidate point.

    ``values[i]`` is the vector for ``points[i]``; candidates are mesh nodes
    when the basis comes from :func:`extract_basis`, but any point cloud works.
    """

    values: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        pts = np.asarray(self.points, dtype=float)
        if pts.shape[0] != v.shape[0]:
            raise ValueError("one point per sensitivity vector required")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "points", pts)

    @property
    def n_params(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]

    @cached_property
    def products(self) -> np.ndarray:
        """Pairwise component products, cached for repeated gradient-field scans."""
        iu, ju = np.triu_indices(self.n_params)
        return np.ascontiguousarray((self.values[:, iu] * self.values[:, ju]).T)

    def scaled(self, factor: float) -> "SensitivityBasis":
        return SensitivityBasis(factor * self.values, self.points)


def extract_basis(mesh: Mesh, sensitivities) -> SensitivityBasis:
    fields = [np.asarray(s, dtype=float) for s in sensitivities]
    if any(f.shape != (mesh.n_nodes,) for f in fields):
        raise ValueError("sensitivity fields must have one value per mesh node")
    return SensitivityBasis(np.column_stack(fields), mesh.nodes)


@dataclass(frozen=True)
class ForwardSolution:
    mesh: Mesh
    q: tuple
    state: np.ndarray
    sensitivities: list
    basis: SensitivityBasis


def forward(level: int, q=(3.0, 0.5, 0.25)) -> ForwardSolution:
    """Mesh, state, sensitivities and basis in one go (single factorization)."""
    mesh = build_mesh(level)
    q = _check_q(q)
    ops = assemble(mesh, q)
    solver = InteriorSolver(mesh, ops, q)
    state = solve_state(mesh, q, ops=ops, solver=solver)
    sens = solve_sensitivities(mesh, q, state, ops=ops, solver=solver)
    log.info("forward solve on level %d: %d nodes", level, mesh.n_nodes)
    return ForwardSolution(mesh, q, state, sens, extract_basis(mesh, sens))
