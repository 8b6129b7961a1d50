"""Stochastic collocation studies, error bounds and the complexity planner.

Every node of the sparse grid is solved with the *full* N-dimensional
model at ``y`` padded with zeros.  A truncated model evaluated at ``y_s``
gives bit-for-bit the same fields as the full model at ``(y_s, 0)``, so one
cache per solver fidelity serves every ``N_s`` and every level.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fem
from .deformation import DeformationModel, InadmissibleDeformation, experiment_model
from .diagnostics import region_diagnostics
from .sparse_grid import build_grid, format_key, moments, pad_key, parse_key

QOI_WEIGHTS = {"bump": fem.bump}
SOLVERS = ("lu", "pcg")


class StudyError(ValueError):
    pass


class CollocationError(RuntimeError):
    """A node solve failed; the message names the node."""


class PlanOverflowError(OverflowError):
    pass


@dataclass(frozen=True)
class StudyConfig:
    N: int = 15
    N_s: int = 4
    w: int = 4
    mesh_n: int = 65
    dt: float = 0.01
    T: float = 1.0
    L: float = 19 / 50
    L_p: float = 1.0
    c: float = 1 / 2.175
    decay: float = 1.0
    support_scale: float = math.sqrt(3.0)
    first_mode: str = "sqrt"
    qoi: str = "bump"
    normalize: bool = True
    g2: float = 1.0
    solver: str = "lu"
    tol: float = 1e-10

    def __post_init__(self):
        if self.N < 1:
            raise StudyError("N must be >= 1")
        if not 1 <= self.N_s <= self.N:
            raise StudyError(f"N_s = {self.N_s} must satisfy 1 <= N_s <= N = {self.N}")
        if self.w < 0:
            raise StudyError("w must be >= 0")
        if self.mesh_n < 3 or self.mesh_n % 2 == 0:
            raise StudyError(f"mesh_n = {self.mesh_n} must be odd and >= 3 so x2 = 0.5 is a vertex row")
        if not (self.dt > 0 and self.T > 0):
            raise StudyError("dt and T must be positive")
        k = round(self.T / self.dt)
        if k < 1 or abs(k * self.dt - self.T) > 1e-9 * self.T:
            raise StudyError(f"dt = {self.dt!r} does not divide T = {self.T!r}")
        if self.c < 0:
            raise StudyError("c must be >= 0")
        if self.qoi not in QOI_WEIGHTS:
            raise StudyError(f"unknown qoi weight {self.qoi!r}; choose from {sorted(QOI_WEIGHTS)}")
        if self.solver not in SOLVERS:
            raise StudyError(f"unknown solver {self.solver!r}; choose from {SOLVERS}")
        if not self.tol > 0:
            raise StudyError("tol must be positive")

    def fidelity(self) -> dict:
        """Everything a node value depends on besides the node itself."""
        keys = ("N", "mesh_n", "dt", "T", "L", "L_p", "c", "decay", "support_scale", "first_mode", "qoi", "g2", "solver", "tol")
        return {k: getattr(self, k) for k in keys}

    def fidelity_hash(self) -> str:
        blob = json.dumps(self.fidelity(), sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_model(config: StudyConfig) -> DeformationModel:
    """Full N-mode model; sup estimates sampled on the study mesh."""
    return experiment_model(
        N=config.N,
        L=config.L,
        L_p=config.L_p,
        c=config.c,
        decay=config.decay,
        support_scale=config.support_scale,
        sample_n=config.mesh_n,
        first_mode=config.first_mode,
    )


@dataclass(frozen=True)
class CollocationRecord:
    node_key: tuple
    y: tuple
    qoi_raw: float
    qoi_norm: float
    iterations: int
    seconds: float


@dataclass(frozen=True)
class MomentResult:
    mean: float
    variance: float
    eta: int
    w: int
    N_s: int
    mesh_n: int
    reference: Optional[str] = None
    solves: int = field(default=0, compare=False)


# -- node solver ------------------------------------------------------------------


class NodeSolver:
    """Solves the transient problem on the reference square for one ``y``."""

    def __init__(self, config: StudyConfig, model: Optional[DeformationModel] = None):
        self.config = config
        self.model = build_model(config) if model is None else model
        self.mesh = fem.build_structured_mesh(config.mesh_n)
        self.space = fem.space_of(self.mesh)
        self.q = fem.qoi_weights(self.mesh, fem.separable_weight(QOI_WEIGHTS[config.qoi]))

    def solve(self, y) -> tuple[float, int, float]:
        """Return ``(raw QoI, solver iterations, seconds)`` at full-length ``y``."""
        t0 = time.perf_counter()
        y = np.asarray(y, dtype=float)
        J = self.model.jacobian(self.space.barycenters, y)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        K = fem.assemble_stiffness(self.mesh, self.model.diffusion_matrix(self.space.barycenters, y))
        M = fem.assemble_mass(self.mesh, det)
        b = fem.assemble_neumann_load(self.mesh, self.config.g2, self.model, y)
        problem = fem.TransientProblem(
            K, M, b, np.zeros(self.mesh.n_vertices), self.config.dt, self.config.T,
            self.space.dirichlet, tol=self.config.tol, solver=self.config.solver,
        )
        res = fem.backward_euler_solve(problem)
        return float(self.q @ res.u), res.iterations, time.perf_counter() - t0


# -- cache --------------------------------------------------------------------------


class CollocationCache:
    """Raw QoI values keyed by the node key padded to N.

    With a ``path`` every insert is appended to a CSV file
    ``node_key, y_1..y_N, qoi_raw, qoi_norm, iters, seconds`` and existing
    rows are loaded on construction.
    """

    def __init__(self, n_dims: int, path=None, fidelity: Optional[str] = None):
        self.n_dims = n_dims
        self.fidelity = fidelity
        self.path = None if path is None else Path(path)
        self._rows: dict[tuple, CollocationRecord] = {}
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return
            if len(header) != self.n_dims + 5:
                raise StudyError(f"cache {self.path} has {len(header)} columns, expected {self.n_dims + 5}")
            for row in reader:
                if len(row) != len(header):
                    continue  # torn final line from an interrupted run
                key = parse_key(row[0])
                n = self.n_dims
                self._rows[key] = CollocationRecord(
                    node_key=key,
                    y=tuple(float(v) for v in row[1 : n + 1]),
                    qoi_raw=float(row[n + 1]),
                    qoi_norm=float(row[n + 2]),
                    iterations=int(row[n + 3]),
                    seconds=float(row[n + 4]),
                )

    def __contains__(self, key) -> bool:
        return tuple(key) in self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def get(self, key) -> CollocationRecord:
        return self._rows[tuple(key)]

    def add(self, rec: CollocationRecord) -> None:
        self._rows[rec.node_key] = rec
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists() or self.path.stat().st_size == 0
        with open(self.path, "a", newline="") as fh:
            if new:
                cols = ["node_key"] + [f"y_{i}" for i in range(1, self.n_dims + 1)]
                fh.write(",".join(cols + ["qoi_raw", "qoi_norm", "iters", "seconds"]) + "\n")
            vals = [format_key(rec.node_key)] + [f"{v:.17e}" for v in rec.y]
            vals += [f"{rec.qoi_raw:.17e}", f"{rec.qoi_norm:.17e}", str(rec.iterations), f"{rec.seconds:.6f}"]
            fh.write(",".join(vals) + "\n")


def cache_filename(config: StudyConfig) -> str:
    return f"qoi_n{config.mesh_n}_dt{config.dt:.6g}_{config.fidelity_hash()}.csv"


def open_cache(config: StudyConfig, cache_dir=None) -> CollocationCache:
    h = config.fidelity_hash()
    if cache_dir is None:
        return CollocationCache(config.N, fidelity=h)
    return CollocationCache(config.N, Path(cache_dir) / cache_filename(config), fidelity=h)


# -- collocation ---------------------------------------------------------------------

# NodeSolvers are rebuilt only when the fidelity changes
_SOLVERS: dict[str, NodeSolver] = {}
_POOL_SOLVER: Optional[NodeSolver] = None


def node_solver(config: StudyConfig) -> NodeSolver:
    h = config.fidelity_hash()
    if h not in _SOLVERS:
        _SOLVERS.clear()
        _SOLVERS[h] = NodeSolver(config)
    return _SOLVERS[h]


def _pool_task(y):
    return _POOL_SOLVER.solve(y)


def _solve_nodes(solver: NodeSolver, keys, ys, workers: int):
    """Yield ``(key, y, result)`` in the given order."""
    if workers <= 1 or len(keys) <= 1:
        for k, y in zip(keys, ys):
            try:
                yield k, y, solver.solve(y)
            except Exception as exc:
                raise CollocationError(f"node {format_key(k)} (y = {list(y)}): {exc}") from exc
        return
    global _POOL_SOLVER
    _POOL_SOLVER = solver
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        futures = [pool.submit(_pool_task, y) for y in ys]
        for k, y, fut in zip(keys, ys, futures):
            try:
                yield k, y, fut.result()
            except Exception as exc:
                raise CollocationError(f"node {format_key(k)} (y = {list(y)}): {exc}") from exc


def check_admissible(config: StudyConfig, model: Optional[DeformationModel] = None):
    """Region diagnostics of the retained model; raises when delta_tilde <= 0."""
    model = build_model(config) if model is None else model
    return region_diagnostics(model.truncate(config.N_s))


def run_collocation(
    config: StudyConfig,
    cache: Optional[CollocationCache] = None,
    workers: int = 1,
    reference: Optional[str] = None,
) -> tuple[MomentResult, list[CollocationRecord]]:
    """Mean and variance of the (normalized) QoI on the SM grid ``(N_s, w)``.

    Records are returned in canonical key order; nodes already in ``cache``
    are not solved again.
    """
    cache = open_cache(config) if cache is None else cache
    if cache.n_dims != config.N:
        raise StudyError(f"cache has {cache.n_dims} dimensions, config has N = {config.N}")
    if cache.fidelity is not None and cache.fidelity != config.fidelity_hash():
        raise StudyError("cache was opened for a different solver fidelity")
    solver = node_solver(config)
    check_admissible(config, solver.model)
    rule = build_grid(config.N_s, config.w, "SM")

    keys = [pad_key(k, config.N) for k in rule.keys]
    ys = []
    for node in rule.nodes:
        y = np.zeros(config.N)
        y[: config.N_s] = node
        ys.append(y)
    zero = pad_key((0,), config.N)
    todo = [(k, y) for k, y in zip(keys, ys) if k not in cache]
    if zero not in cache and all(k != zero for k, _ in todo):
        todo.insert(0, (zero, np.zeros(config.N)))
    # the reference-domain value must be known before normalizing anything
    todo.sort(key=lambda item: item[0] != zero)

    q_ref = cache.get(zero).qoi_raw if zero in cache else None
    for k, y, (raw, iters, secs) in _solve_nodes(solver, [k for k, _ in todo], [y for _, y in todo], workers):
        if k == zero:
            q_ref = raw
        cache.add(CollocationRecord(k, tuple(float(v) for v in y), raw, raw / q_ref, iters, secs))

    records = [cache.get(k) for k in keys]
    values = [r.qoi_norm if config.normalize else r.qoi_raw for r in records]
    m = moments(rule, values)
    result = MomentResult(
        mean=m["mean"],
        variance=m["variance"],
        eta=len(rule),
        w=config.w,
        N_s=config.N_s,
        mesh_n=config.mesh_n,
        reference=reference,
        solves=len(todo),
    )
    return result, records


def _sibling_cache(config: StudyConfig, cache: Optional[CollocationCache]) -> Optional[CollocationCache]:
    """``cache`` if it matches the fidelity of ``config``, else one in the same directory."""
    if cache is None or cache.fidelity == config.fidelity_hash():
        return cache
    return open_cache(config, None if cache.path is None else cache.path.parent)


def reference_moments(
    config: StudyConfig,
    w_ref: int,
    mesh_ref: Optional[int] = None,
    N_s: Optional[int] = None,
    cache: Optional[CollocationCache] = None,
    workers: int = 1,
) -> MomentResult:
    """High-level isotropic run standing in for an adaptive reference."""
    mesh_ref = config.mesh_n if mesh_ref is None else mesh_ref
    if mesh_ref < config.mesh_n:
        raise StudyError(f"reference mesh {mesh_ref} is coarser than the study mesh {config.mesh_n}")
    ref_cfg = replace(config, w=w_ref, mesh_n=mesh_ref, N_s=config.N_s if N_s is None else N_s)
    cache = _sibling_cache(ref_cfg, cache)
    tag = f"isotropic SM reference N_s={ref_cfg.N_s} w={w_ref} mesh_n={mesh_ref}"
    return run_collocation(ref_cfg, cache=cache, workers=workers, reference=tag)[0]


def convergence_study(
    config: StudyConfig,
    w_list: Sequence[int],
    reference: MomentResult,
    cache: Optional[CollocationCache] = None,
    workers: int = 1,
) -> list[dict]:
    """Rows ``N_s, w, knots, mean_error, var_error`` for each level."""
    cache = open_cache(config) if cache is None else cache
    rows = []
    for w in w_list:
        res, _ = run_collocation(replace(config, w=w), cache=cache, workers=workers)
        rows.append(
            dict(
                N_s=config.N_s,
                w=w,
                knots=res.eta,
                mean_error=abs(reference.mean - res.mean),
                var_error=abs(reference.variance - res.variance),
            )
        )
    return rows


def truncation_study(
    config: StudyConfig,
    N_s_list: Sequence[int],
    reference: MomentResult,
    cache: Optional[CollocationCache] = None,
    workers: int = 1,
) -> list[dict]:
    """Rows ``N_s, mean_error, var_error, B_T_bound`` at the fixed level ``config.w``."""
    cache = open_cache(config) if cache is None else cache
    model = node_solver(config).model
    rows = []
    for n_s in N_s_list:
        res, _ = run_collocation(replace(config, N_s=n_s), cache=cache, workers=workers)
        rows.append(
            dict(
                N_s=n_s,
                mean_error=abs(reference.mean - res.mean),
                var_error=abs(reference.variance - res.variance),
                B_T_bound=model.tail_bound(n_s),
            )
        )
    return rows


def saturation_floors(
    config: StudyConfig,
    level: int,
    fine_mesh: Optional[int] = None,
    cache: Optional[CollocationCache] = None,
    workers: int = 1,
) -> dict:
    """Both candidate error floors of a convergence study at ``level``.

    The truncation floor compares ``N_s`` against all ``N`` modes on the
    study mesh; the discretization floor compares the study mesh against
    ``fine_mesh`` (default ``2 mesh_n - 1``) at the same ``N_s``.  Neither is
    attributed as the cause of saturation.
    """
    fine_mesh = 2 * config.mesh_n - 1 if fine_mesh is None else fine_mesh
    if fine_mesh <= config.mesh_n:
        raise StudyError(f"fine mesh {fine_mesh} must be finer than the study mesh {config.mesh_n}")
    base_cfg = replace(config, w=level)
    fine_cfg = replace(base_cfg, mesh_n=fine_mesh)
    base = run_collocation(base_cfg, cache=_sibling_cache(base_cfg, cache), workers=workers)[0]
    full = run_collocation(replace(base_cfg, N_s=config.N), cache=_sibling_cache(base_cfg, cache), workers=workers)[0]
    fine = run_collocation(fine_cfg, cache=_sibling_cache(fine_cfg, cache), workers=workers)[0]
    return dict(
        N_s=config.N_s,
        level=level,
        fine_mesh=fine_mesh,
        truncation_mean=abs(full.mean - base.mean),
        truncation_var=abs(full.variance - base.variance),
        discretization_mean=abs(fine.mean - base.mean),
        discretization_var=abs(fine.variance - base.variance),
    )


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x`` over the positive entries."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        raise StudyError("need at least two positive points to fit a slope")
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])


def tail_bound_consistent(rows: Sequence[dict], column: str = "mean_error") -> bool:
    """Empirical error stays below the B_T shape scaled through the first row."""
    first = rows[0]
    if first["B_T_bound"] <= 0:
        return all(r[column] == 0 for r in rows)
    const = first[column] / first["B_T_bound"]
    return all(r[column] <= const * r["B_T_bound"] * (1 + 1e-12) for r in rows[1:])


# -- bounds and planner ----------------------------------------------------------------


@dataclass(frozen=True)
class BoundParams:
    """Constants of the sparse-grid estimate and the complexity planner.

    ``delta_star`` defaults to ``(e log 2 - 1) / C2_tilde``; ``C_F`` and ``F``
    default to ``C1 / |1 - C1|`` and ``max(1, C1)``.
    """

    sigma: float = 1.0
    delta_star: Optional[float] = None
    C1: float = 0.5
    C2_tilde: float = 1.0
    C_D: float = 1.0
    D_D: float = 1.0
    l: float = 1.0
    E: float = 1.0
    C_T: float = 1.0
    C_SG: float = 1.0
    C_F: Optional[float] = None
    F: Optional[float] = None
    rho_ratio: float = 1.0

    def __post_init__(self):
        if self.delta_star is None:
            object.__setattr__(self, "delta_star", (math.e * math.log(2.0) - 1.0) / self.C2_tilde)
        if self.C_F is None and self.C1 != 1.0:
            object.__setattr__(self, "C_F", self.C1 / abs(1.0 - self.C1))
        if self.F is None:
            object.__setattr__(self, "F", max(1.0, self.C1))
        if not self.sigma > 0:
            raise StudyError("sigma must be positive")
        if self.C1 == 1.0:
            raise StudyError("C1 = 1 makes the bound prefactor infinite")
        for name, v in asdict(self).items():
            if v is None or not math.isfinite(v) or v <= 0:
                raise StudyError(f"bound constant {name} = {v!r} must be finite and positive")

    @classmethod
    def from_diagnostics(cls, diag, **kw) -> "BoundParams":
        """``sigma = sigma_hat / 2`` from region diagnostics."""
        return cls(sigma=diag.sigma_hat / 2.0, **kw)


def mu2(N_s: int) -> float:
    return math.log(2.0) / (N_s * (1.0 + math.log(2.0 * N_s)))


def mu3(params: BoundParams, N_s: int) -> float:
    return params.sigma * params.delta_star * params.C2_tilde / (1.0 + math.log(2.0 * N_s))


def bound_prefactor(params: BoundParams, N_s: int) -> float:
    C1 = params.C1
    return C1 / math.exp(params.sigma * params.delta_star * params.C2_tilde) * max(1.0, C1) ** N_s / abs(1.0 - C1)


def log_error_bound(params: BoundParams, N_s: int, eta: float) -> float:
    """Natural log of the sparse-grid bound; finite where the bound underflows."""
    if N_s < 1:
        raise StudyError("N_s must be >= 1")
    if eta < 1:
        raise StudyError("eta must be >= 1")
    rate = N_s * params.sigma / 2.0 ** (1.0 / N_s)
    return math.log(bound_prefactor(params, N_s)) + mu3(params, N_s) * math.log(eta) - rate * eta ** mu2(N_s)


def sparse_grid_error_bound(params: BoundParams, N_s: int, eta: float) -> float:
    """``Q eta^mu3 exp(-N_s sigma 2^(-1/N_s) eta^mu2)``."""
    return math.exp(log_error_bound(params, N_s, eta))


def bound_eta_threshold(params: BoundParams, N_s: int) -> float:
    """Smallest ``eta`` beyond which the bound decreases monotonically.

    ``d/d eta`` of the log bound is ``mu3/eta - rate mu2 eta^(mu2-1)``, which
    is negative once ``eta^mu2 > mu3 / (rate mu2)``.
    """
    m2 = mu2(N_s)
    rate = N_s * params.sigma / 2.0 ** (1.0 / N_s)
    log_eta = math.log(mu3(params, N_s) / (rate * m2)) / m2
    if log_eta > 709.0:
        raise PlanOverflowError(f"threshold eta = exp({log_eta:.4g}) overflows")
    return max(1.0, math.exp(log_eta))


def _ceil(x: float) -> int:
    # absorb round-off so exact substitutions land on the integer
    r = round(x)
    return int(r) if abs(x - r) <= 1e-9 * max(1.0, abs(x)) else math.ceil(x)


def complexity_plan(tol: float, params: BoundParams, W_sol: float = 1.0) -> dict:
    """Dimensions, knots and total work needed for a target tolerance."""
    if not tol > 0:
        raise StudyError("tol must be positive")
    ratio = params.E * tol / (params.C_D * (1.0 + params.D_D))
    ns_real = ratio ** (-1.0 / params.l)
    if not math.isfinite(ns_real):
        raise PlanOverflowError(f"N_s = ({ratio:.3e})^(-1/l) overflows")
    N_s = max(1, _ceil(ns_real))
    exponent = (1.0 + math.log(2.0 * N_s)) / params.sigma
    log_base = (
        math.log(3.0 * params.rho_ratio * params.C_SG * params.C_T * params.C_F)
        + N_s * math.log(params.F)
        + params.sigma
        - math.log(tol)
    )
    log_eta = exponent * log_base
    if log_eta > 709.0:
        raise PlanOverflowError(f"eta = exp({log_eta:.4g}) overflows; tolerance {tol:g} too small")
    eta = max(1, _ceil(math.exp(log_eta)))
    return dict(
        tol=tol,
        ratio=ratio,
        N_s_real=ns_real,
        N_s_required=N_s,
        eta_exponent=exponent,
        log_eta=log_eta,
        eta_required=eta,
        W_sol=W_sol,
        W_total=W_sol * eta,
    )


def default_workers() -> int:
    return os.cpu_count() or 1
