"""Acceptance gate: one test per criterion, one PASS/FAIL line each."""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, toy_basis
from sensorplace.design import (
    ACriterion,
    DCriterion,
    DesignMeasure,
    WeightedACriterion,
    check_optimality,
    objective,
    reduced_gradient_field,
)
from sensorplace.estimator import covariance, scale_to_budget
from sensorplace.experiments import (
    history_csv,
    merge_atoms,
    read_history_csv,
    reference_design,
    validate_history,
)
from sensorplace.fem import build_mesh, forward, l2_error, solve_sensitivities, solve_state
from sensorplace.gcg import SolverConfig, solve
from sensorplace.removal import Subproblem, coefficient_hessian
from sensorplace.sparsify import prune_weights

K = 3e4
W_TABLE = np.diag([1.0, 1.0, 4.0])
TABLE = {
    "omega_K": (0.019, 5.627, 5.955, 11.601),
    "omega_1": (0.091, 7.388, 20.678, 28.157),
    "omega_KW": (0.023, 14.12, 3.831, 17.974),
}
TRACE_TOL = {"omega_K": 0.03, "omega_1": 0.02, "omega_KW": 0.03}
OPT_ATOMS = [((0.321, 0.687), 219.068), ((0.848, 0.891), 115.441), ((0.842, 0.502), 56.758),
             ((0.646, 0.299), 198.667)]

HISTORIES: dict = {}


def report(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


def _config(**kw):
    kw.setdefault("beta", 1.0)
    kw.setdefault("criterion", ACriterion())
    return SolverConfig(**kw)


def _run(name, cfg, basis):
    res = solve(cfg, basis)
    HISTORIES[name] = res
    return res


@pytest.fixture(scope="module")
def pdap9(fwd9):
    return _run("pdap-A-level9", _config(), fwd9.basis)


@pytest.fixture(scope="module")
def pdap9_weighted(fwd9):
    return _run("pdap-wA-level9", _config(criterion=WeightedACriterion(W_TABLE)), fwd9.basis)


@pytest.fixture(scope="module")
def pdap_levels(fwd9):
    out = {9: HISTORIES.get("pdap-A-level9") or _run("pdap-A-level9", _config(), fwd9.basis)}
    for level in range(5, 9):
        out[level] = _run(f"pdap-A-level{level}", _config(), forward(level).basis)
    return out


@pytest.fixture(scope="module")
def gcg9(fwd9):
    return _run("gcg-level9", _config(variant="gcg", post_process=False), fwd9.basis)


@pytest.fixture(scope="module")
def gcgpp9(fwd9):
    return _run("gcg+pp-level9", _config(variant="gcg", post_process=True), fwd9.basis)


@pytest.fixture(scope="module")
def toy_runs():
    b = toy_basis([1.0])
    out = {}
    for variant in ("gcg", "spinat", "pdap"):
        for start in (0.2, 3.0):
            cfg = _config(variant=variant, tol=1e-10, initial_design=DesignMeasure.on_basis(b, [0], [start]))
            out[(variant, start)] = _run(f"toy-{variant}-{start}", cfg, b)
    return b, out


def test_criterion_01_table(fwd9, pdap9, pdap9_weighted):
    designs = {
        "omega_K": scale_to_budget(pdap9.design, K),
        "omega_1": reference_design(fwd9.basis, K / 3),
        "omega_KW": scale_to_budget(pdap9_weighted.design, K),
    }
    ok, parts = True, []
    for name, d in designs.items():
        cov = covariance(d, fwd9.basis)
        vals = (*np.diag(cov), np.trace(cov))
        ref = TABLE[name]
        trace_err = abs(vals[3] - ref[3]) / ref[3]
        diag_err = max(abs(v - r) / r for v, r in zip(vals[:3], ref[:3]))
        ok &= trace_err <= TRACE_TOL[name] and diag_err <= 0.08
        parts.append(f"{name} trace={vals[3]:.4f} (err {trace_err:.2%}, diag err {diag_err:.2%})")
    report(1, ok, "; ".join(parts))


def test_criterion_02_support_geometry(fwd9, pdap9):
    h = fwd9.mesh.h
    merged = merge_atoms(pdap9.design, 2 * h)
    ok = len(merged) == 4
    worst_d, worst_w = 0.0, 0.0
    if ok:
        for x, w in OPT_ATOMS:
            a = min(merged, key=lambda a: np.hypot(a.x[0] - x[0], a.x[1] - x[1]))
            worst_d = max(worst_d, float(np.hypot(a.x[0] - x[0], a.x[1] - x[1])))
            worst_w = max(worst_w, abs(a.weight - w) / w)
        ok = worst_d <= 0.02 and worst_w <= 0.05
    report(2, ok, f"{len(merged)} merged atoms, max distance {worst_d:.4f}, max weight error {worst_w:.2%}")


def test_criterion_03_pdap_efficiency(pdap_levels):
    iters = {lv: r.iterations for lv, r in sorted(pdap_levels.items())}
    gaps_ok = all(r.gap <= 1e-9 for r in pdap_levels.values())
    sup = max(max(h.support_size for h in r.history) for r in pdap_levels.values())
    ok = gaps_ok and max(iters.values()) <= 30 and sup <= 6 and max(iters.values()) <= 2 * min(iters.values())
    report(3, ok, f"iterations by level {iters}, max support {sup}, all gaps <= 1e-9: {gaps_ok}")


def test_criterion_04_gcg_sublinear(gcg9, gcgpp9):
    F = np.array([h.F for h in gcg9.history])
    gap = np.array([h.gap for h in gcg9.history])
    k = np.arange(1, len(F) + 1)
    r = F - F.min()
    window = (k >= 100) & (k <= 2000)
    slope = float(np.polyfit(np.log(k[window]), np.log(r[window]), 1)[0])
    max_sup = max(h.support_size for h in gcg9.history)
    max_sup_pp = max(h.support_size for h in gcgpp9.history)
    checks = {
        "gap stays above 1e-3": bool(gap.min() > 1e-3 and len(F) == 20000),
        "slope in [-1.5,-0.7]": -1.5 <= slope <= -0.7,
        "support exceeds 40": max_sup > 40,
        "GCG+PP support <= 6": max_sup_pp <= 6,
    }
    failed = [c for c, v in checks.items() if not v]
    report(4, not failed, f"min gap {gap.min():.3g}, slope {slope:.3f}, max support {max_sup}, "
                          f"GCG+PP max support {max_sup_pp}" + (f"; failed: {', '.join(failed)}" if failed else ""))


def test_criterion_05_prune_suite():
    rng = np.random.default_rng(20240501)
    t0 = time.perf_counter()
    worst, ok = 0.0, True
    for _ in range(1000):
        n = int(rng.integers(1, 4))
        m = int(rng.integers(1, 13))
        V = rng.standard_normal((m, n))
        w = rng.uniform(0.05, 5.0, m)
        mask, lam, passes = prune_weights(V, w)
        before = np.einsum("j,ji,jk->ik", w, V, V)
        after = np.einsum("j,ji,jk->ik", lam, V[mask], V[mask])
        err = np.linalg.norm(after - before) / np.linalg.norm(before)
        worst = max(worst, err)
        ok &= err <= 1e-10 and lam.sum() <= w.sum() * (1 + 1e-14)
        ok &= mask.sum() <= n * (n + 1) // 2 and (m - mask.sum()) >= passes
    elapsed = time.perf_counter() - t0
    report(5, ok and elapsed <= 10, f"1000 instances, worst Fisher error {worst:.2e}, {elapsed:.2f}s")


def test_criterion_06_derivative_oracles():
    rng = np.random.default_rng(7)
    crits = [ACriterion(), WeightedACriterion(np.diag([1.0, 2.0, 4.0])), DCriterion()]
    worst_g, worst_h = 0.0, 0.0
    for i in range(100):
        crit = crits[i % 3]
        m = int(rng.integers(3, 9))
        V = rng.standard_normal((m, 3))
        b = toy_basis(V)
        lam = rng.uniform(0.5, 2.0, m)
        I0 = 0.05 * np.eye(3)
        w = DesignMeasure.on_basis(b, range(m), lam)
        field = reduced_gradient_field(w, b, crit, I0)
        fd = np.empty(m)
        for j in range(m):
            e = np.zeros(m)
            e[j] = 1e-5 * lam[j]
            Fp = objective(DesignMeasure.on_basis(b, range(m), lam + e), b, crit, I0, 0.0)
            Fm = objective(DesignMeasure.on_basis(b, range(m), lam - e), b, crit, I0, 0.0)
            fd[j] = (Fp - Fm) / (2 * e[j])
        worst_g = max(worst_g, float(np.max(np.abs(fd - field) / np.abs(field))))
        sub = Subproblem(V, crit, 1.0, I0=I0)
        H = coefficient_hessian(sub, lam)
        Hfd = np.empty_like(H)
        for j in range(m):
            e = np.zeros(m)
            e[j] = 1e-6 * lam[j]
            Hfd[:, j] = (sub.gradient(lam + e) - sub.gradient(lam - e)) / (2 * e[j])
        worst_h = max(worst_h, float(np.linalg.norm(Hfd - H) / np.linalg.norm(H)))
    report(6, worst_g <= 1e-6 and worst_h <= 1e-5,
           f"worst gradient error {worst_g:.2e}, worst Hessian error {worst_h:.2e} over 100 instances")


def test_criterion_07_toy_optimum(toy_runs):
    b, runs = toy_runs
    worst_w, worst_gap, worst_cert = 0.0, 0.0, 0.0
    for res in runs.values():
        wt = res.design.weights[0] if len(res.design) == 1 else np.nan
        rep = check_optimality(res.design, b, ACriterion(), None, 1.0)
        worst_w = max(worst_w, abs(wt - 1.0))
        worst_gap = max(worst_gap, res.gap)
        worst_cert = max(worst_cert, abs(rep.global_violation), rep.support_gap)
    ok = worst_w <= 1e-8 and worst_gap <= 1e-10 and worst_cert <= 1e-8
    report(7, ok, f"weight error {worst_w:.1e}, gap {worst_gap:.1e}, certificate {worst_cert:.1e}")


def test_criterion_08_certificate(fwd9, pdap9):
    beta = 1.0
    rep = check_optimality(pdap9.design, fwd9.basis, ACriterion(), None, beta)
    scaled = scale_to_budget(pdap9.design, K)
    kw = check_optimality(scaled, fwd9.basis, ACriterion(), None, beta)
    kw_rel = kw.kw_residual / abs(kw.pairing)
    ok = -rep.min_gradient <= beta * (1 + 1e-6) and rep.support_gap <= 1e-6 * beta and kw_rel <= 1e-6
    report(8, ok, f"max(-psi') - beta = {rep.global_violation:.1e}, support gap {rep.support_gap:.1e}, "
                  f"scaled KW residual {kw_rel:.1e}")


def test_criterion_09_fem():
    exact = lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
    rhs = lambda x, y: 2 * np.pi**2 * exact(x, y)
    errs = []
    for level in range(4, 8):
        m = build_mesh(level)
        errs.append(l2_error(m, solve_state(m, (1.0, 0.0, 0.0), forcing=rhs), exact))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    m = build_mesh(6)
    q = np.array([3.0, 0.5, 0.25])
    sens = solve_sensitivities(m, q, solve_state(m, q))
    fd_err = 0.0
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1e-4
        fd = (solve_state(m, q + e) - solve_state(m, q - e)) / 2e-4
        fd_err = max(fd_err, np.linalg.norm(fd - sens[k]) / np.linalg.norm(sens[k]))
    ok = bool(np.all((orders >= 1.9) & (orders <= 2.1))) and fd_err <= 1e-5
    report(9, ok, f"L2 orders {np.round(orders, 4).tolist()}, sensitivity FD error {fd_err:.2e}")


def test_criterion_10_history_invariants(tmp_path, pdap9, pdap9_weighted, pdap_levels, gcg9, gcgpp9, toy_runs):
    bad = []
    for name, res in HISTORIES.items():
        path = tmp_path / f"{name}.csv"
        path.write_text(history_csv(res.history))
        cols = read_history_csv(path)
        from_csv = validate_history(cols["F"], gap=cols["gap"])
        # mass bound: psi >= 0, so beta * mass <= F_k <= F_1 = beta * M0
        mass_ok = bool(np.all(cols["F"] <= cols["F"][0]))
        full = validate_history([h.F for h in res.history], mass=[h.mass for h in res.history], m0=res.m0,
                                F_half=[h.F_half for h in res.history])
        if not (from_csv.ok and mass_ok and full.ok):
            bad.append(f"{name}: {from_csv.problems + full.problems}")
    report(10, not bad, f"{len(HISTORIES)} histories validated" + (f"; {bad}" if bad else ""))
