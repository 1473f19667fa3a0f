import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import toy_basis
from sensorplace.design import DesignMeasure, fisher_matrix
from sensorplace.sparsify import null_direction, prune, prune_weights, vectorize_rank_one


def direct_fisher(V, w):
    out = np.zeros((V.shape[1], V.shape[1]))
    for v, lam in zip(V, w):
        out += lam * np.outer(v, v)
    return out


def test_vectorization_is_isometry():
    rng = np.random.default_rng(0)
    V = rng.standard_normal((4, 3))
    A = vectorize_rank_one(V)
    G = A.T @ A
    ref = (V @ V.T) ** 2  # <vv^T, uu^T>_F = (v.u)^2
    assert np.allclose(G, ref)


def test_null_direction_identical_scalars():
    d = null_direction(np.array([[1.0], [1.0]]))
    g = d.gamma / d.gamma[0]
    assert np.allclose(g, [1.0, -1.0])
    assert d.gamma.sum() >= -1e-15


def test_null_direction_independent():
    assert null_direction(np.eye(3)) is None
    assert null_direction(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])) is None


def test_null_direction_generic_overcomplete():
    rng = np.random.default_rng(1)
    V = rng.standard_normal((4, 2))
    d = null_direction(V)
    assert d is not None and d.gamma.sum() >= 0
    assert np.linalg.norm(direct_fisher(V, d.gamma)) <= 1e-10


def test_prune_two_identical():
    b = toy_basis([1.0, 1.0])
    out = prune(DesignMeasure.on_basis(b, [0, 1], [1.0, 1.0]), b)
    assert len(out) == 1 and out.total_mass == pytest.approx(2.0)


def test_prune_independent_unchanged():
    b = toy_basis(np.eye(3))
    w = DesignMeasure.on_basis(b, [0, 1, 2], [1.0, 2.0, 3.0])
    out = prune(w, b)
    assert np.array_equal(out.weights, w.weights) and np.array_equal(out.nodes, w.nodes)


def test_prune_ten_atoms_n2():
    rng = np.random.default_rng(2)
    V = rng.standard_normal((10, 2))
    b = toy_basis(V)
    w = DesignMeasure.on_basis(b, range(10), rng.uniform(0.5, 2, 10))
    out = prune(w, b)
    assert len(out) <= 3
    before = direct_fisher(V, w.weights)
    after = direct_fisher(V[out.nodes], out.weights)
    assert np.linalg.norm(after - before) <= 1e-10 * np.linalg.norm(before)
    assert out.total_mass <= w.total_mass * (1 + 1e-14)
    again = prune(out, b)
    assert np.array_equal(again.nodes, out.nodes) and np.array_equal(again.weights, out.weights)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 3), m=st.integers(1, 12))
@settings(max_examples=200, deadline=None)
def test_prune_properties(seed, n, m):
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((m, n))
    w = rng.uniform(0.1, 5.0, m)
    mask, lam, passes = prune_weights(V, w)
    before = direct_fisher(V, w)
    after = direct_fisher(V[mask], lam)
    assert np.linalg.norm(after - before) <= 1e-10 * np.linalg.norm(before)
    assert lam.sum() <= w.sum() * (1 + 1e-14)
    assert mask.sum() <= n * (n + 1) // 2
    assert m - mask.sum() >= passes
    assert np.all(lam > 0)
