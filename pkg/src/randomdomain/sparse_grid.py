"""Isotropic Smolyak sparse grids on [-1, 1]^N with nested Clenshaw-Curtis nodes.

The grid is built with the combination technique: a Smolyak operator over a
downward-closed multi-index set is written as a signed sum of small tensor
interpolants, and the quadrature weight of every distinct node is the
accumulated signed product of one-dimensional Clenshaw-Curtis weights.

Nodes are identified by integer keys, never by comparing floats.  In one
dimension a Clenshaw-Curtis node is ``-cos(pi * theta)`` with ``theta`` a
dyadic fraction; the key enumerates those fractions hierarchically::

    code 0 -> theta = 1/2          (level 1, the centre)
    code 1 -> theta = 0, code 2 -> theta = 1          (new at level 2)
    code 3 -> theta = 1/4, code 4 -> theta = 3/4      (new at level 3)
    code 5..8 -> theta = 1/8, 3/8, 5/8, 7/8           (new at level 4)

so a node key of an N-dimensional grid is a tuple of N such codes, and the
key of a lower-dimensional node padded with zeros is the key of the same
point embedded in a higher-dimensional grid.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

FAMILIES = ("SM", "TD", "HC", "TP")

NodeKey = tuple


class SparseGridError(ValueError):
    pass


def cc_size(level: int) -> int:
    """Number of Clenshaw-Curtis nodes m(i) at a given level (doubling rule)."""
    if level < 1:
        raise SparseGridError(f"level must be >= 1, got {level}")
    return 1 if level == 1 else 2 ** (level - 1) + 1


def _code_of(j: int, level: int) -> int:
    # node j of the level-`level` rule, theta = j / (m - 1)
    if level == 1:
        return 0
    n = 2 ** (level - 1)
    g = math.gcd(j, n)
    p, q = j // g, n // g
    if q == 1:
        return 1 if p == 0 else 2
    if q == 2:
        return 0
    return q // 2 + (p - 1) // 2 + 1


def code_to_theta(code: int) -> tuple[int, int]:
    """Return the dyadic fraction ``(p, q)`` with ``theta = p / q`` for a 1D code."""
    if code < 0:
        raise SparseGridError(f"invalid node code {code}")
    if code == 0:
        return 1, 2
    if code == 1:
        return 0, 1
    if code == 2:
        return 1, 1
    q = 1 << (code - 1).bit_length()
    offset = code - q // 2 - 1
    return 2 * offset + 1, q


def code_level(code: int) -> int:
    """Level at which a 1D node first appears."""
    if code == 0:
        return 1
    if code in (1, 2):
        return 2
    return (code - 1).bit_length() + 1


def code_to_coord(code: int) -> float:
    p, q = code_to_theta(code)
    if 2 * p == q:
        return 0.0
    if p == 0:
        return -1.0
    if p == q:
        return 1.0
    # sin is odd, so symmetric nodes come out as exact negatives
    return math.sin(math.pi * (p / q - 0.5))


@lru_cache(maxsize=None)
def _cc_rule(level: int) -> tuple[tuple[int, ...], np.ndarray, np.ndarray]:
    m = cc_size(level)
    codes = tuple(_code_of(j, level) for j in range(m))
    nodes = np.array([code_to_coord(c) for c in codes])
    if m == 1:
        return codes, nodes, np.array([1.0])
    n = m - 1
    theta = np.pi * np.arange(m) / n
    w = np.empty(m)
    for j in range(m):
        s = 0.0
        for k in range(1, n // 2 + 1):
            b = 1.0 if 2 * k == n else 2.0
            s += b / (4.0 * k * k - 1.0) * math.cos(2.0 * k * theta[j])
        cj = 1.0 if j in (0, n) else 2.0
        w[j] = cj / n * (1.0 - s)
    # density 1/2 on [-1, 1]; symmetrize to kill round-off asymmetry
    w = 0.25 * (w + w[::-1])
    return codes, nodes, w


def cc_nodes_1d(level: int) -> np.ndarray:
    """Clenshaw-Curtis nodes at ``level`` in ascending order.

    Level 1 is the single midpoint; level ``i > 1`` holds the
    ``2**(i-1) + 1`` Chebyshev extrema with exact endpoints.
    """
    return _cc_rule(level)[1].copy()


def cc_weights_1d(level: int) -> np.ndarray:
    """Interpolatory CC weights for the uniform density 1/2 on [-1, 1]."""
    return _cc_rule(level)[2].copy()


def cc_codes_1d(level: int) -> tuple[int, ...]:
    return _cc_rule(level)[0]


def _g(index, family: str) -> float:
    if family in ("SM", "TD"):
        return sum(i - 1 for i in index)
    if family == "TP":
        return max(i - 1 for i in index)
    if family == "HC":
        return math.prod(index) - 1
    raise SparseGridError(f"unknown family {family!r}; expected one of {FAMILIES}")


def admissible_indices(n_dims: int, level: int, family: str = "SM") -> list[tuple[int, ...]]:
    """All multi-indices ``i >= 1`` with ``g(i) <= level``, sorted lexicographically.

    SM and TD share ``g(i) = sum(i_n - 1)``; TP uses ``max(i_n - 1)`` and HC
    uses ``prod(i_n) - 1``.  All families use the doubling CC rule, so
    they differ only in which tensor rules enter the combination.
    """
    if family not in FAMILIES:
        raise SparseGridError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if n_dims < 1:
        raise SparseGridError("n_dims must be >= 1")
    if level < 0:
        raise SparseGridError("level must be >= 0")

    out: list[tuple[int, ...]] = []

    def rec(prefix: list[int]):
        if len(prefix) == n_dims:
            out.append(tuple(prefix))
            return
        i = 1
        while True:
            cand = prefix + [i] + [1] * (n_dims - len(prefix) - 1)
            if _g(cand, family) > level:
                break
            rec(prefix + [i])
            i += 1

    rec([])
    out.sort()
    return out


def is_downward_closed(index_set) -> bool:
    s = set(index_set)
    for idx in s:
        for n, i in enumerate(idx):
            if i > 1 and idx[:n] + (i - 1,) + idx[n + 1:] not in s:
                return False
    return True


def combination_coefficients(index_set) -> dict[tuple[int, ...], int]:
    """Smolyak combination coefficients ``c_i = sum_{e in {0,1}^N, i+e in I} (-1)^|e|``.

    Only the e-vectors that stay inside the set are visited; a downward-closed
    set guarantees every sub-vector of a valid e is also valid.
    """
    indices = list(index_set)
    s = set(indices)
    if len(s) != len(indices):
        raise SparseGridError("index set contains duplicates")
    if not is_downward_closed(s):
        raise SparseGridError("index set is not downward closed")

    coeffs: dict[tuple[int, ...], int] = {}
    for idx in sorted(s):
        d = len(idx)
        total = 0
        stack = [(idx, 0, 0)]
        while stack:
            cur, start, parity = stack.pop()
            total += -1 if parity else 1
            for n in range(start, d):
                nxt = cur[:n] + (cur[n] + 1,) + cur[n + 1:]
                if nxt in s:
                    stack.append((nxt, n + 1, parity ^ 1))
        coeffs[idx] = total
    return coeffs


@dataclass(frozen=True)
class SparseGridRule:
    n_dims: int
    level: int
    family: str
    index_set: tuple
    coefficients: dict = field(repr=False)
    keys: tuple = field(repr=False)
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def active(self) -> list[tuple[tuple[int, ...], int]]:
        return [(i, c) for i, c in self.coefficients.items() if c != 0]

    def position(self) -> dict:
        return {k: n for n, k in enumerate(self.keys)}


def build_grid(n_dims: int, level: int, family: str = "SM") -> SparseGridRule:
    """Build the sparse grid rule for ``(n_dims, level, family)``.

    Nodes are the union of the tensor CC grids of every index with a nonzero
    combination coefficient, deduplicated by key and stored in sorted key
    order.  The weight of a node is ``sum_i c_i * (tensor weight under i)``.
    """
    index_set = admissible_indices(n_dims, level, family)
    coeffs = combination_coefficients(index_set)

    acc: dict[tuple[int, ...], list] = {}
    for idx in index_set:
        c = coeffs[idx]
        if c == 0:
            continue
        rules = [_cc_rule(i) for i in idx]
        for combo in itertools.product(*(range(len(r[0])) for r in rules)):
            key = tuple(r[0][j] for r, j in zip(rules, combo))
            w = float(c)
            for r, j in zip(rules, combo):
                w *= r[2][j]
            acc.setdefault(key, []).append(w)

    keys = tuple(sorted(acc))
    nodes = np.array([[code_to_coord(c) for c in k] for k in keys]).reshape(len(keys), n_dims)
    # signed contributions cancel heavily in high dimension; sum them exactly
    weights = np.array([math.fsum(acc[k]) for k in keys])
    return SparseGridRule(
        n_dims=n_dims,
        level=level,
        family=family,
        index_set=tuple(index_set),
        coefficients=coeffs,
        keys=keys,
        nodes=nodes,
        weights=weights,
    )


def _values_by_key(rule: SparseGridRule, values) -> dict:
    if isinstance(values, dict):
        missing = [k for k in rule.keys if k not in values]
        if missing:
            raise SparseGridError(f"missing value for node {format_key(missing[0])}")
        return values
    vals = np.asarray(values, dtype=float)
    if vals.shape != (len(rule),):
        raise SparseGridError(f"expected {len(rule)} node values, got shape {vals.shape}")
    return dict(zip(rule.keys, vals))


def _bary_1d(level: int, t: float) -> np.ndarray:
    """Lagrange basis values of the level rule at ``t``."""
    _, x, _ = _cc_rule(level)
    m = len(x)
    if m == 1:
        return np.ones(1)
    d = t - x
    j = int(np.argmin(np.abs(d)))
    # at or next to a node (subnormal gaps would overflow 1 / d) the basis is a unit vector
    if abs(d[j]) < 1e-150:
        out = np.zeros(m)
        out[j] = 1.0
        return out
    # barycentric weights for Chebyshev extrema: (-1)^j, halved at the ends
    bw = (-1.0) ** np.arange(m)
    bw[0] *= 0.5
    bw[-1] *= 0.5
    r = bw / d
    return r / r.sum()


def interpolate(rule: SparseGridRule, values, y) -> float:
    """Evaluate the Smolyak interpolant of nodal ``values`` at ``y``."""
    by_key = _values_by_key(rule, values)
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != rule.n_dims:
        raise SparseGridError(f"point has {y.size} components, grid has {rule.n_dims}")
    total = 0.0
    for idx, c in rule.active:
        basis = [_bary_1d(i, t) for i, t in zip(idx, y)]
        codes = [_cc_rule(i)[0] for i in idx]
        s = 0.0
        for combo in itertools.product(*(np.nonzero(b)[0] for b in basis)):
            key = tuple(cd[j] for cd, j in zip(codes, combo))
            term = by_key[key]
            for b, j in zip(basis, combo):
                term *= b[j]
            s += term
        total += c * s
    return float(total)


def quadrature(rule: SparseGridRule, values) -> float:
    """Integral of the interpolant under the uniform density on [-1, 1]^N."""
    by_key = _values_by_key(rule, values)
    vals = np.array([by_key[k] for k in rule.keys])
    return float(np.dot(rule.weights, vals))


def moments(rule: SparseGridRule, values, density_ratio=None) -> dict:
    """Mean and variance from quadrature of Q and Q**2.

    ``density_ratio`` holds per-node factors rho / rho_hat (default 1).  A
    slightly negative variance caused by quadrature error is clamped to 0;
    a warning is emitted when its magnitude exceeds 1e-10.
    """
    by_key = _values_by_key(rule, values)
    q = np.array([by_key[k] for k in rule.keys])
    if density_ratio is None:
        ratio = np.ones_like(q)
    else:
        ratio = np.asarray(
            [density_ratio[k] for k in rule.keys] if isinstance(density_ratio, dict) else density_ratio,
            dtype=float,
        )
        if ratio.shape != q.shape:
            raise SparseGridError("density_ratio must have one entry per node")
        if np.any(ratio <= 0):
            raise SparseGridError("density_ratio must be positive")
    mean = float(np.dot(rule.weights, q * ratio))
    second = float(np.dot(rule.weights, q * q * ratio))
    var = second - mean * mean
    if var < 0.0:
        if var < -1e-10:
            import warnings

            warnings.warn(f"negative variance {var:.3e} from quadrature error clamped to 0")
        var = 0.0
    return {"mean": mean, "variance": var}


def format_key(key) -> str:
    return "-".join(str(c) for c in key)


def parse_key(text: str) -> tuple[int, ...]:
    return tuple(int(c) for c in text.split("-"))


def pad_key(key, n_dims: int) -> tuple[int, ...]:
    """Embed a node key into ``n_dims`` dimensions (new coordinates at 0)."""
    if len(key) > n_dims:
        raise SparseGridError("cannot pad a key to fewer dimensions")
    return tuple(key) + (0,) * (n_dims - len(key))


def dump_grid(rule: SparseGridRule, path) -> None:
    """Write ``node_key, y_1..y_N, weight`` rows for external checking."""
    with open(path, "w") as fh:
        cols = ["node_key"] + [f"y_{n + 1}" for n in range(rule.n_dims)] + ["weight"]
        fh.write(",".join(cols) + "\n")
        for key, y, w in zip(rule.keys, rule.nodes, rule.weights):
            fh.write(",".join([format_key(key)] + [f"{v:.17e}" for v in y] + [f"{w:.17e}"]) + "\n")


def in_lambda(degree, level: int) -> bool:
    """Whether a multi-degree lies in the Smolyak polynomial set of ``level``."""

    def f(p: int) -> int:
        if p == 0:
            return 0
        if p == 1:
            return 1
        return (p - 1).bit_length()  # ceil(log2 p) in integer arithmetic

    return sum(f(p) for p in degree) <= level
