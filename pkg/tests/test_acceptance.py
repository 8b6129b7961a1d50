"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test emits one ``criterion k: PASS|FAIL ...`` line, collected in the
terminal summary.  Criteria 4 to 6 run full-size studies (about 9 minutes
on one core); they share the node cache from the ``cache_dir`` fixture.
"""

import itertools
import math
import time
from dataclasses import replace

import mpmath
import numpy as np
import pytest

from randomdomain.deformation import experiment_model
from randomdomain.diagnostics import gamma_of, region_diagnostics
from randomdomain.fem import manufactured_convergence
from randomdomain.sparse_grid import build_grid, cc_nodes_1d, quadrature
from randomdomain.uq import (
    BoundParams,
    StudyConfig,
    bound_eta_threshold,
    complexity_plan,
    convergence_study,
    default_workers,
    log_error_bound,
    loglog_slope,
    open_cache,
    reference_moments,
    run_collocation,
    tail_bound_consistent,
    truncation_study,
)

DESK = StudyConfig(mesh_n=65, dt=1 / 100, T=1.0)


def verdict(report, k, ok, detail, seconds, budget):
    ok = ok and seconds <= budget
    report(f"criterion {k}: {'PASS' if ok else 'FAIL'} {detail} [{seconds:.1f} s, budget {budget:g} s]")
    return ok


# -- 1: sparse grid -----------------------------------------------------------------------


def _cheb(level):
    m = 1 if level == 1 else 2 ** (level - 1) + 1
    return np.array([0.0]) if m == 1 else -np.cos(np.pi * np.arange(m) / (m - 1))


def _union_count(d, w):
    pts = set()
    for idx in itertools.product(range(1, w + 2), repeat=d):
        if sum(i - 1 for i in idx) <= w:
            pts.update(itertools.product(*(np.round(_cheb(i), 12) + 0.0 for i in idx)))
    return len(pts)


def _f(p):
    return 0 if p == 0 else 1 if p == 1 else math.ceil(math.log2(p))


def _moment(deg):
    return math.prod(0.0 if p % 2 else 1.0 / (p + 1) for p in deg)


def _quad_error(rule, deg):
    vals = np.prod(rule.nodes ** np.array(deg), axis=1)
    return abs(quadrature(rule, vals) - _moment(deg))


def test_criterion_1_sparse_grid(report):
    t0 = time.perf_counter()
    nested = all(
        np.all(np.min(np.abs(cc_nodes_1d(i + 1)[:, None] - cc_nodes_1d(i)[None, :]), axis=0) < 1e-15) for i in range(1, 6)
    )
    counts = [len(build_grid(2, w, "SM")) for w in range(5)]
    counts_ok = counts == [_union_count(2, w) for w in range(5)]
    worst = 0.0
    for d, w in [(1, 5), (2, 0), (2, 1), (2, 2), (2, 3), (2, 4), (3, 2), (3, 3)]:
        rule = build_grid(d, w, "SM")
        for deg in itertools.product(range(2**w + 2), repeat=d):
            if sum(_f(p) for p in deg) <= w:
                worst = max(worst, _quad_error(rule, deg))
    probes = [((2, 2), 1), ((6, 0), 2), ((4, 4), 3), ((2, 2, 2), 2), ((0, 18), 4)]
    probe_err = min(_quad_error(build_grid(len(deg), w, "SM"), deg) for deg, w in probes)
    assert all(sum(_f(p) for p in deg) == w + 1 for deg, w in probes)
    dt = time.perf_counter() - t0
    # inexact means clearly above the 1e-12 exactness tolerance
    ok = nested and counts_ok and worst < 1e-12 and probe_err > 1e-10
    detail = f"nested={nested} counts={counts} max exact err={worst:.1e} min probe err={probe_err:.1e}"
    assert verdict(report, 1, ok, detail, dt, 10)


# -- 2: FEM rate -------------------------------------------------------------------------


def test_criterion_2_fem_rate(report):
    t0 = time.perf_counter()
    exact = lambda x, t: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]) * math.exp(-t)
    forcing = lambda x, t: (2 * np.pi**2 - 1) * exact(x, t)
    r = manufactured_convergence(exact, forcing, ns=(9, 17, 33, 65), solver="lu")
    dt = time.perf_counter() - t0
    ok = 1.8 <= r["rate"] <= 2.2
    detail = f"L2 rate={r['rate']:.3f} errors={', '.join(f'{e:.2e}' for e in r['errors'])}"
    assert verdict(report, 2, ok, detail, dt, 120)


# -- 3: zero deformation -----------------------------------------------------------------------


def test_criterion_3_zero_deformation(report):
    t0 = time.perf_counter()
    flat = replace(DESK, c=0.0)
    cache = open_cache(flat)
    worst_var, worst_mean = 0.0, 0.0
    for n_s, w in [(1, 0), (1, 4), (2, 3), (4, 2), (15, 1)]:
        res, _ = run_collocation(replace(flat, N_s=n_s, w=w), cache=cache, workers=default_workers())
        worst_var = max(worst_var, res.variance)
        worst_mean = max(worst_mean, abs(res.mean - 1.0))
    dt = time.perf_counter() - t0
    ok = worst_var <= 1e-12 and worst_mean <= 1e-10
    assert verdict(report, 3, ok, f"max variance={worst_var:.1e} max |mean-1|={worst_mean:.1e}", dt, 60)


# -- 4: desk-scale moments ---------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_desk_scale(report, cache_dir):
    t0 = time.perf_counter()
    cfg = replace(DESK, N_s=4, w=4)
    res, _ = run_collocation(cfg, cache=open_cache(cfg, cache_dir), workers=default_workers())
    dt = time.perf_counter() - t0
    ok = abs(res.mean - 0.9846) <= 0.02 and 0.0342 / 2 <= res.variance <= 0.0342 * 2
    assert verdict(report, 4, ok, f"mean={res.mean:.5f} variance={res.variance:.5f} knots={res.eta}", dt, 1800)


# -- 5: convergence shape ------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_convergence_shape(report, cache_dir):
    t0 = time.perf_counter()
    cfg = replace(DESK, N_s=2, w=0)
    cache = open_cache(cfg, cache_dir)
    ref = reference_moments(cfg, 6, cache=cache, workers=default_workers())
    rows = convergence_study(cfg, range(5), ref, cache=cache, workers=default_workers())
    errs = [r["var_error"] for r in rows]
    dt = time.perf_counter() - t0
    monotone = all(b <= a for a, b in zip(errs, errs[1:]))
    drop = errs[0] / errs[-1] if errs[-1] > 0 else math.inf
    ok = monotone and drop >= 10
    detail = f"variance errors={', '.join(f'{e:.2e}' for e in errs)} decrease={drop:.3g}x"
    # no runtime budget is stated; the generous cap only guards against hangs
    assert verdict(report, 5, ok, detail, dt, 1800)


# -- 6: truncation decay ---------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_truncation_decay(report, cache_dir):
    t0 = time.perf_counter()
    cfg = replace(DESK, N_s=15, w=3)
    cache = open_cache(cfg, cache_dir)
    ref = reference_moments(cfg, 3, N_s=cfg.N, cache=cache, workers=default_workers())
    rows = truncation_study(cfg, [2, 3, 4, 6], ref, cache=cache, workers=default_workers())
    slope = loglog_slope([r["N_s"] for r in rows], [r["mean_error"] for r in rows])
    assert tail_bound_consistent(rows, "mean_error")
    dt = time.perf_counter() - t0
    errs = ", ".join(f"{r['mean_error']:.2e}" for r in rows)
    assert verdict(report, 6, slope <= -1, f"slope={slope:.3f} mean errors={errs} ({ref.eta}-knot reference)", dt, 2700)


# -- 7: bounds and planner ----------------------------------------------------------------------


def test_criterion_7_bounds(report):
    t0 = time.perf_counter()
    p = BoundParams()
    ok_eta = True
    for n_s in (1, 2, 4, 8):
        etas = bound_eta_threshold(p, n_s) * np.geomspace(1, 1e6, 40)
        b = [log_error_bound(p, n_s, e) for e in etas]
        ok_eta &= all(x > y for x, y in zip(b, b[1:]))
    sig = np.linspace(0.1, 3.0, 30)
    eta = 1e8
    b = [log_error_bound(BoundParams(sigma=s), 4, eta) for s in sig]
    ok_sigma = eta > bound_eta_threshold(BoundParams(sigma=sig[-1]), 4) and all(x > y for x, y in zip(b, b[1:]))
    plan = complexity_plan(0.5, p)
    ok_plan = plan["ratio"] == 0.25 and plan["N_s_required"] == 4
    dt = time.perf_counter() - t0
    detail = f"decreasing in eta={ok_eta} decreasing in sigma={ok_sigma} plan N_s={plan['N_s_required']}"
    assert verdict(report, 7, ok_eta and ok_sigma and ok_plan, detail, dt, 1)


# -- 8: diagnostics ----------------------------------------------------------------------------


def test_criterion_8_diagnostics(report):
    t0 = time.perf_counter()
    d = region_diagnostics(experiment_model(sample_n=DESK.mesh_n))
    mpmath.mp.dps = 50
    cot = 1 / mpmath.tan(mpmath.pi / 8)
    g_ref = cot * mpmath.mpf(1.5) ** 2 / (mpmath.mpf(0.5) ** 2 + cot * mpmath.mpf(1.5) ** 2)
    g = gamma_of(0.5, 2)
    dt = time.perf_counter() - t0
    ok = 0 < d.delta_tilde < 1 and d.beta_max > 0 and abs(g - float(g_ref)) < 1e-15 and round(g, 5) == 0.956
    detail = f"delta_tilde={d.delta_tilde:.5f} beta_max={d.beta_max:.3e} gamma(0.5, 2)={g:.10f}"
    assert verdict(report, 8, ok, detail, dt, 1)
