import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randomdomain.sparse_grid import (
    SparseGridError,
    admissible_indices,
    build_grid,
    cc_codes_1d,
    cc_nodes_1d,
    cc_size,
    cc_weights_1d,
    code_to_coord,
    combination_coefficients,
    dump_grid,
    format_key,
    in_lambda,
    interpolate,
    is_downward_closed,
    moments,
    pad_key,
    parse_key,
    quadrature,
)

# -- independent oracles --------------------------------------------------------------


def cheb_extrema(level):
    m = 1 if level == 1 else 2 ** (level - 1) + 1
    if m == 1:
        return np.array([0.0])
    return -np.cos(np.pi * np.arange(m) / (m - 1))


def brute_force_count(n_dims, w):
    pts = set()
    for idx in itertools.product(range(1, w + 2), repeat=n_dims):
        if sum(i - 1 for i in idx) > w:
            continue
        for p in itertools.product(*(cheb_extrema(i) for i in idx)):
            pts.add(tuple(round(v, 12) + 0.0 for v in p))
    return len(pts)


def lagrange_integrals(nodes):
    """int l_j(y) dy / 2 with a 64-point Gauss-Legendre rule."""
    t, wt = np.polynomial.legendre.leggauss(64)
    out = []
    for j, xj in enumerate(nodes):
        lj = np.ones_like(t)
        for k, xk in enumerate(nodes):
            if k != j:
                lj *= (t - xk) / (xj - xk)
        out.append(0.5 * np.dot(wt, lj))
    return np.array(out)


def uniform_moment(p):
    return 0.0 if p % 2 else 1.0 / (p + 1)


def f_table(p):
    if p == 0:
        return 0
    if p == 1:
        return 1
    return math.ceil(math.log2(p))


# -- 1D rules -------------------------------------------------------------------------


def test_cc_size_growth():
    assert [cc_size(i) for i in range(1, 6)] == [1, 3, 5, 9, 17]
    with pytest.raises(SparseGridError):
        cc_size(0)


def test_cc_nodes_examples():
    assert cc_nodes_1d(1).tolist() == [0.0]
    assert cc_nodes_1d(2).tolist() == [-1.0, 0.0, 1.0]
    h = math.sqrt(2) / 2
    np.testing.assert_allclose(cc_nodes_1d(3), [-1, -h, 0, h, 1], atol=1e-15)


@pytest.mark.parametrize("level", range(1, 8))
def test_cc_nodes_match_chebyshev_extrema(level):
    x = cc_nodes_1d(level)
    np.testing.assert_allclose(x, cheb_extrema(level), atol=2e-16)
    assert np.all(np.diff(x) > 0)
    np.testing.assert_array_equal(x, -x[::-1])
    if level > 1:
        assert x[0] == -1.0 and x[-1] == 1.0


@pytest.mark.parametrize("level", range(1, 6))
def test_cc_nested(level):
    lo = set(cc_codes_1d(level))
    hi = set(cc_codes_1d(level + 1))
    assert lo < hi
    for c in lo:
        assert code_to_coord(c) in cc_nodes_1d(level + 1)


def test_cc_weights_examples():
    assert cc_weights_1d(1).tolist() == [1.0]
    np.testing.assert_allclose(cc_weights_1d(2), [1 / 6, 2 / 3, 1 / 6], rtol=1e-15)


@pytest.mark.parametrize("level", range(2, 7))
def test_cc_weights_are_lagrange_integrals(level):
    np.testing.assert_allclose(cc_weights_1d(level), lagrange_integrals(cc_nodes_1d(level)), atol=1e-14)
    assert abs(cc_weights_1d(level).sum() - 1.0) < 1e-15


@pytest.mark.parametrize("level", range(1, 7))
def test_cc_weights_monomial_exactness(level):
    m = cc_size(level)
    x, w = cc_nodes_1d(level), cc_weights_1d(level)
    for k in range(m):
        assert abs(np.dot(w, x**k) - uniform_moment(k)) < 1e-14


# -- index sets -----------------------------------------------------------------------


def test_admissible_indices_examples():
    assert admissible_indices(2, 0) == [(1, 1)]
    assert admissible_indices(2, 1) == [(1, 1), (1, 2), (2, 1)]
    assert len(admissible_indices(3, 2)) == 10


@pytest.mark.parametrize("family", ["SM", "TD", "TP", "HC"])
def test_admissible_indices_brute_force(family):
    g = {
        "SM": lambda i: sum(v - 1 for v in i),
        "TD": lambda i: sum(v - 1 for v in i),
        "TP": lambda i: max(v - 1 for v in i),
        "HC": lambda i: math.prod(i) - 1,
    }[family]
    for d, w in [(1, 4), (2, 3), (3, 3)]:
        expected = sorted(i for i in itertools.product(range(1, w + 2), repeat=d) if g(i) <= w)
        got = admissible_indices(d, w, family)
        assert got == expected
        assert is_downward_closed(got)


def test_unknown_family():
    with pytest.raises(SparseGridError):
        admissible_indices(2, 1, "XX")


def test_combination_coefficients_examples():
    assert combination_coefficients([(1, 1)]) == {(1, 1): 1}
    assert combination_coefficients(admissible_indices(2, 1)) == {(1, 1): -1, (1, 2): 1, (2, 1): 1}


def test_combination_coefficients_by_definition():
    s = admissible_indices(3, 3)
    sset = set(s)
    coeffs = combination_coefficients(s)
    for i in s:
        ref = 0
        for e in itertools.product((0, 1), repeat=3):
            if tuple(a + b for a, b in zip(i, e)) in sset:
                ref += (-1) ** sum(e)
        assert coeffs[i] == ref


def test_combination_coefficients_reject_non_monotone():
    with pytest.raises(SparseGridError):
        combination_coefficients([(1, 1), (1, 3)])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 4), st.sampled_from(["SM", "TP", "HC"]))
def test_coefficients_sum_to_one(d, w, family):
    assert sum(combination_coefficients(admissible_indices(d, w, family)).values()) == 1


# -- grids ------------------------------------------------------------------------------


def test_build_grid_small_example():
    g = build_grid(2, 1)
    pts = sorted(map(tuple, g.nodes.tolist()))
    assert pts == sorted([(0.0, 0.0), (-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0)])
    assert len(build_grid(2, 2)) == 13


@pytest.mark.parametrize("w", range(0, 5))
def test_node_counts_brute_force(w):
    assert len(build_grid(2, w)) == brute_force_count(2, w)


@pytest.mark.parametrize("w", range(0, 6))
def test_one_dimensional_grid_is_cc_rule(w):
    g = build_grid(1, w)
    np.testing.assert_array_equal(np.sort(g.nodes[:, 0]), cc_nodes_1d(w + 1))
    order = np.argsort(g.nodes[:, 0])
    np.testing.assert_allclose(g.weights[order], cc_weights_1d(w + 1), atol=1e-15)


@pytest.mark.parametrize("d", [2, 3])
def test_grid_nestedness(d):
    prev = set(build_grid(d, 0).keys)
    for w in range(1, 6 if d == 2 else 5):
        cur = set(build_grid(d, w).keys)
        assert prev <= cur
        prev = cur


@pytest.mark.parametrize("d,w", [(1, 5), (2, 4), (3, 3), (5, 3), (15, 2)])
def test_weights_sum_to_one(d, w):
    assert abs(build_grid(d, w).weights.sum() - 1.0) < 1e-13


def test_weights_bitwise_reproducible():
    a, b = build_grid(4, 3), build_grid(4, 3)
    assert a.keys == b.keys
    assert a.weights.tobytes() == b.weights.tobytes()
    assert a.nodes.tobytes() == b.nodes.tobytes()


def test_keys_unique_and_consistent_with_nodes():
    g = build_grid(3, 4)
    assert len(set(g.keys)) == len(g.keys)
    rounded = {tuple(np.round(p, 12)) for p in g.nodes}
    assert len(rounded) == len(g.keys)
    for k, p in zip(g.keys, g.nodes):
        assert [code_to_coord(c) for c in k] == p.tolist()


def test_padded_keys_embed_lower_dimensional_grid():
    lo = build_grid(2, 3)
    hi = set(build_grid(4, 3).keys)
    assert all(pad_key(k, 4) in hi for k in lo.keys)


def test_key_text_roundtrip():
    for k in build_grid(3, 2).keys:
        assert parse_key(format_key(k)) == k
    with pytest.raises(SparseGridError):
        pad_key((1, 2, 3), 2)


# -- exactness ---------------------------------------------------------------------------


def monomial(deg):
    return lambda y: np.prod(np.asarray(y) ** np.asarray(deg), axis=-1)


def exact_moment(deg):
    return math.prod(uniform_moment(p) for p in deg)


@pytest.mark.parametrize("d,w", [(1, 4), (2, 3), (2, 4), (3, 3)])
def test_quadrature_exact_on_lambda(d, w):
    g = build_grid(d, w)
    maxdeg = 2 ** w + 1
    n = 0
    for deg in itertools.product(range(maxdeg + 1), repeat=d):
        if sum(f_table(p) for p in deg) > w:
            continue
        assert in_lambda(deg, w)
        assert abs(quadrature(g, monomial(deg)(g.nodes)) - exact_moment(deg)) < 1e-12
        n += 1
    assert n > 0


@pytest.mark.parametrize("d,w,deg", [(2, 1, (2, 2)), (2, 2, (6, 0)), (2, 3, (4, 4)), (3, 2, (2, 2, 2))])
def test_quadrature_inexact_just_outside(d, w, deg):
    assert not in_lambda(deg, w)
    g = build_grid(d, w)
    assert abs(quadrature(g, monomial(deg)(g.nodes)) - exact_moment(deg)) > 1e-6


def test_quadrature_examples():
    g = build_grid(2, 3)
    assert abs(quadrature(g, np.ones(len(g))) - 1.0) < 1e-14
    assert abs(quadrature(g, g.nodes[:, 0])) < 1e-15
    assert abs(quadrature(g, g.nodes[:, 0] ** 2 * g.nodes[:, 1] ** 2) - 1 / 9) < 1e-14


def test_interpolation_delta_property():
    g = build_grid(3, 3)
    rng = np.random.default_rng(0)
    vals = rng.normal(size=len(g))
    for k in range(0, len(g), 7):
        assert interpolate(g, vals, g.nodes[k]) == pytest.approx(vals[k], abs=1e-13)


def test_interpolation_constant_and_polynomial():
    g = build_grid(2, 2)
    assert interpolate(g, np.full(len(g), 3.5), [0.3, -0.7]) == pytest.approx(3.5, abs=1e-14)
    f = lambda y: y[..., 0] ** 2
    vals = f(g.nodes)
    rng = np.random.default_rng(1)
    for y in rng.uniform(-1, 1, size=(100, 2)):
        assert abs(interpolate(g, vals, y) - y[0] ** 2) < 1e-13


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_interpolation_reproduces_lambda_polynomials(y):
    # y1^3 y2 and y3^2 y1 have multi-degrees inside Lambda(3)
    g = build_grid(3, 3)
    f = lambda p: p[..., 0] ** 3 * p[..., 1] + p[..., 2] ** 2 * p[..., 0] - 0.5
    assert abs(interpolate(g, f(g.nodes), y) - f(np.array(y))) < 1e-12


def test_interpolation_next_to_node():
    g = build_grid(2, 2)
    f = lambda p: 1 + p[..., 0] ** 2 - 3 * p[..., 1]
    for y in ([0.0, 5e-324], [1e-310, -1e-310], [1.0 - 1e-16, 0.5**0.5]):
        assert abs(interpolate(g, f(g.nodes), y) - f(np.array(y))) < 1e-12


def test_interpolation_missing_value():
    g = build_grid(2, 1)
    with pytest.raises(SparseGridError):
        interpolate(g, {g.keys[0]: 1.0}, [0.0, 0.0])


# -- moments --------------------------------------------------------------------------------


def test_moments_examples():
    g = build_grid(2, 1)
    m = moments(g, np.full(len(g), 2.0))
    assert m["mean"] == pytest.approx(2.0, abs=1e-15) and m["variance"] == pytest.approx(0.0, abs=1e-14)
    m = moments(g, g.nodes[:, 0])
    assert abs(m["mean"]) < 1e-15 and abs(m["variance"] - 1 / 3) < 1e-14
    vals = np.sin(g.nodes[:, 0])
    assert moments(g, vals, np.ones(len(g)))["mean"] == quadrature(g, vals)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_moments_of_affine_functions(coef):
    g = build_grid(3, 2)
    a0, a = coef[0], np.array(coef[1:])
    m = moments(g, a0 + g.nodes @ a)
    assert abs(m["mean"] - a0) < 1e-12
    assert abs(m["variance"] - np.sum(a**2) / 3) < 1e-12


def test_moments_reject_bad_ratio():
    g = build_grid(2, 1)
    with pytest.raises(SparseGridError):
        moments(g, np.ones(len(g)), np.zeros(len(g)))


def test_negative_variance_is_clamped_with_warning():
    g = build_grid(3, 2)
    k = int(np.argmin(g.weights))
    assert g.weights[k] < 0
    # an indicator of a negatively weighted node: E[Q^2] - E[Q]^2 = w_k - w_k^2 < 0
    vals = np.zeros(len(g))
    vals[k] = 1.0
    with pytest.warns(UserWarning, match="negative variance"):
        m = moments(g, vals)
    assert m["variance"] == 0.0
    assert m["mean"] == pytest.approx(g.weights[k], abs=1e-15)


def test_dump_grid(tmp_path):
    g = build_grid(2, 2)
    p = tmp_path / "grid.csv"
    dump_grid(g, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "node_key,y_1,y_2,weight"
    assert len(lines) == len(g) + 1
    back = np.array([[float(v) for v in ln.split(",")[1:]] for ln in lines[1:]])
    np.testing.assert_array_equal(back[:, :2], g.nodes)
    np.testing.assert_array_equal(back[:, 2], g.weights)
