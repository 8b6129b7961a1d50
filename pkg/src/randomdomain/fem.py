"""P1 finite elements on the unit square with a matrix diffusion coefficient.

Everything is solved on the fixed reference square: the random geometry
enters only through the per-triangle coefficient matrix, the mass weight
and the Neumann boundary factor.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp

SIDES = ("bottom", "right", "top", "left")
_OUTWARD = {"bottom": (0.0, -1.0), "right": (1.0, 0.0), "top": (0.0, 1.0), "left": (-1.0, 0.0)}


class FEMError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, iterations, residual):
        super().__init__(f"{message} (iterations={iterations}, relative residual={residual:.3e})")
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)
    boundary_edges: np.ndarray = field(repr=False)
    edge_sides: tuple = field(repr=False)
    dirichlet_sides: tuple = ("top",)
    n: int = 0

    @property
    def edge_tags(self) -> list[str]:
        return ["dirichlet" if s in self.dirichlet_sides else "neumann" for s in self.edge_sides]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


def build_structured_mesh(n: int, dirichlet_sides=("top",)) -> Mesh:
    """Uniform ``n x n`` vertex lattice on the unit square, two triangles per cell.

    Every cell is split along its lower-left to upper-right diagonal and both
    triangles are counter-clockwise.  Vertex ``(i, j)`` (``x1 = i h``,
    ``x2 = j h``) has index ``j * n + i``.
    """
    if n < 2:
        raise FEMError(f"need at least 2 vertices per side, got {n}")
    bad = set(dirichlet_sides) - set(SIDES)
    if bad:
        raise FEMError(f"unknown sides {sorted(bad)}")
    t = np.linspace(0.0, 1.0, n)
    X1, X2 = np.meshgrid(t, t)
    vertices = np.column_stack([X1.ravel(), X2.ravel()])

    i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1))
    v00 = (j * n + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * (n - 1) ** 2, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    k = np.arange(n - 1)
    edges, sides = [], []
    for side, a, b in (
        ("bottom", k, k + 1),
        ("right", k * n + n - 1, (k + 1) * n + n - 1),
        ("top", (n - 1) * n + k + 1, (n - 1) * n + k),
        ("left", (k + 1) * n, k * n),
    ):
        edges.append(np.column_stack([a, b]))
        sides += [side] * (n - 1)
    return Mesh(
        vertices=vertices,
        triangles=triangles,
        boundary_edges=np.vstack(edges),
        edge_sides=tuple(sides),
        dirichlet_sides=tuple(dirichlet_sides),
        n=n,
    )


class P1Space:
    """Precomputed element geometry and the sparse pattern of a mesh."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        V, T = mesh.vertices, mesh.triangles
        p0, p1, p2 = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
        e1, e2 = p1 - p0, p2 - p0
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det <= 0):
            raise FEMError("mesh has triangles with nonpositive signed area")
        self.areas = 0.5 * det
        self.barycenters = (p0 + p1 + p2) / 3.0
        # gradients of the three barycentric basis functions, shape (T, 3, 2)
        g = np.empty((len(T), 3, 2))
        g[:, 1, 0] = e2[:, 1] / det
        g[:, 1, 1] = -e2[:, 0] / det
        g[:, 2, 0] = -e1[:, 1] / det
        g[:, 2, 1] = e1[:, 0] / det
        g[:, 0] = -g[:, 1] - g[:, 2]
        self.grads = g

        n = mesh.n_vertices
        rows = np.repeat(T, 3, axis=1).ravel()
        cols = np.tile(T, (1, 3)).ravel()
        ids = rows * n + cols
        uniq, self._scatter = np.unique(ids, return_inverse=True)
        self._indices = (uniq % n).astype(np.int32)
        self._indptr = np.searchsorted(uniq // n, np.arange(n + 1)).astype(np.int32)
        self.nnz = len(uniq)

        dirichlet_edges = [e for e, s in zip(mesh.boundary_edges, mesh.edge_sides) if s in mesh.dirichlet_sides]
        dnodes = np.unique(np.array(dirichlet_edges, dtype=np.int64).ravel()) if dirichlet_edges else np.array([], dtype=np.int64)
        self.dirichlet = dnodes
        mask = np.ones(n, dtype=bool)
        mask[dnodes] = False
        self.free = np.nonzero(mask)[0]

    def matrix_from_local(self, local: np.ndarray) -> sp.csr_matrix:
        """Sum ``(T, 3, 3)`` element matrices into a CSR matrix with sorted indices."""
        data = np.bincount(self._scatter, weights=local.reshape(-1), minlength=self.nnz)
        n = self.mesh.n_vertices
        return sp.csr_matrix((data, self._indices.copy(), self._indptr.copy()), shape=(n, n))


_SPACES: dict = {}


def space_of(mesh: Mesh) -> P1Space:
    key = id(mesh)
    sp_ = _SPACES.get(key)
    if sp_ is None or sp_.mesh is not mesh:
        sp_ = P1Space(mesh)
        _SPACES[key] = sp_
    return sp_


def _field_at(space: P1Space, f, shape) -> np.ndarray:
    vals = f(space.barycenters) if callable(f) else f
    vals = np.asarray(vals, dtype=float)
    return np.broadcast_to(vals, shape)


def assemble_stiffness(mesh: Mesh, G_field) -> sp.csr_matrix:
    """``K_ij = sum_K |K| grad(phi_i)^T G(bary_K) grad(phi_j)``.

    ``G_field`` is a callable on points of shape (T, 2) returning (T, 2, 2),
    a (T, 2, 2) array of per-triangle matrices, or a single 2x2 matrix.
    """
    space = space_of(mesh)
    nt = len(mesh.triangles)
    G = _field_at(space, G_field, (nt, 2, 2))
    if not np.all(np.isfinite(G)):
        raise FEMError("non-finite diffusion matrix entries")
    g = space.grads
    local = np.einsum("tai,tij,tbj->tab", g, G, g) * space.areas[:, None, None]
    local = 0.5 * (local + local.transpose(0, 2, 1))
    return space.matrix_from_local(local)


_P1_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def assemble_mass(mesh: Mesh, weight_field=1.0) -> sp.csr_matrix:
    """Consistent P1 mass matrix with a positive weight sampled at barycenters."""
    space = space_of(mesh)
    w = _field_at(space, weight_field, (len(mesh.triangles),))
    if np.any(~(w > 0)):
        raise FEMError("mass weight must be positive")
    local = (space.areas * w)[:, None, None] * _P1_MASS
    return space.matrix_from_local(local)


def assemble_load(mesh: Mesh, f_values) -> np.ndarray:
    """Body load ``int f phi_i`` with ``f`` sampled at barycenters."""
    space = space_of(mesh)
    f = _field_at(space, f_values, (len(mesh.triangles),))
    per = (space.areas * f / 3.0)[:, None] * np.ones(3)
    return np.bincount(mesh.triangles.ravel(), weights=per.ravel(), minlength=mesh.n_vertices)


def neumann_factor(model, y, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """``det(J) |J^{-T} n| / |n|`` for reference outward normals ``n``.

    With ``J^{-T} = adj(J)^T / det(J)`` and ``det(J) > 0`` this is
    ``|adj(J)^T n| / |n|``.
    """
    J = model.jacobian(points, y)
    adjT_n = np.empty_like(normals)
    adjT_n[:, 0] = J[:, 1, 1] * normals[:, 0] - J[:, 1, 0] * normals[:, 1]
    adjT_n[:, 1] = -J[:, 0, 1] * normals[:, 0] + J[:, 0, 0] * normals[:, 1]
    return np.linalg.norm(adjT_n, axis=1) / np.linalg.norm(normals, axis=1)


def assemble_neumann_load(mesh: Mesh, g2=1.0, model=None, y=None) -> np.ndarray:
    """Boundary load from flux ``g2`` on every Neumann edge.

    Each edge contributes ``factor * g2 * length / 2`` to both endpoints, with
    the geometric factor of the mapping evaluated at the edge midpoint
    (identity map when ``model`` is None).  ``g2`` may be a callable of the
    mapped midpoint.
    """
    mask = np.array([t == "neumann" for t in mesh.edge_tags], dtype=bool)
    edges = mesh.boundary_edges[mask]
    sides = [s for s, m in zip(mesh.edge_sides, mask) if m]
    load = np.zeros(mesh.n_vertices)
    if len(edges) == 0:
        return load
    a, b = mesh.vertices[edges[:, 0]], mesh.vertices[edges[:, 1]]
    mid = 0.5 * (a + b)
    length = np.linalg.norm(b - a, axis=1)
    if model is None:
        factor = np.ones(len(edges))
        mapped = mid
    else:
        normals = np.array([_OUTWARD[s] for s in sides])
        factor = neumann_factor(model, y, mid, normals)
        mapped = model.map_point(mid, y)
    g = np.asarray(g2(mapped), dtype=float) if callable(g2) else np.full(len(edges), float(g2))
    half = 0.5 * factor * g * length
    np.add.at(load, edges[:, 0], half)
    np.add.at(load, edges[:, 1], half)
    return load


# -- linear algebra ---------------------------------------------------------------


@dataclass
class SolveInfo:
    iterations: int
    residual: float


def pcg(A, b, tol: float = 1e-10, x0=None, maxiter: Optional[int] = None):
    """Jacobi-preconditioned conjugate gradients.

    Returns ``(x, SolveInfo)``; exits when the true relative residual
    ``||b - A x|| / ||b||`` is at most ``tol``.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    maxiter = 10 * n if maxiter is None else maxiter
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolveInfo(0, 0.0)
    dinv = 1.0 / A.diagonal()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    it = 0
    while True:
        rel = np.linalg.norm(r) / bnorm
        if rel <= tol:
            return x, SolveInfo(it, rel)
        z = dinv * r
        p = z
        rz = r @ z
        while it < maxiter:
            Ap = A @ p
            alpha = rz / (p @ Ap)
            x = x + alpha * p
            r = r - alpha * Ap
            it += 1
            if np.linalg.norm(r) <= tol * bnorm:
                break
            z = dinv * r
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
        # confirm with the true residual; restart if recursion drifted
        r = b - A @ x
        rel = np.linalg.norm(r) / bnorm
        if rel <= tol:
            return x, SolveInfo(it, rel)
        if it >= maxiter:
            raise ConvergenceError("PCG did not converge", it, rel)


def solve_linear(A, b, tol: float = 1e-10, x0=None, maxiter: Optional[int] = None) -> np.ndarray:
    return pcg(A, b, tol=tol, x0=x0, maxiter=maxiter)[0]


# -- time stepping ------------------------------------------------------------------


@dataclass
class TransientProblem:
    K: sp.csr_matrix
    M: sp.csr_matrix
    load: Union[np.ndarray, Callable]
    u0: np.ndarray
    dt: float
    T: float
    dirichlet: np.ndarray
    tol: float = 1e-10
    solver: str = "pcg"

    def n_steps(self) -> int:
        if not (self.dt > 0 and self.T > 0):
            raise FEMError("dt and T must be positive")
        k = round(self.T / self.dt)
        if k < 1 or abs(k * self.dt - self.T) > 1e-9 * max(1.0, self.T):
            raise FEMError(f"dt = {self.dt!r} does not divide T = {self.T!r}")
        return k


@dataclass
class TransientResult:
    u: np.ndarray
    steps: int
    iterations: int
    seconds: float


def backward_euler_solve(problem: TransientProblem, hook: Optional[Callable] = None) -> TransientResult:
    """Backward Euler ``(M + dt K) u^{k+1} = M u^k + dt b^{k+1}`` up to ``T``.

    Dirichlet dofs are held at zero.  ``load`` is a vector or a callable of
    time; ``hook(k, t, u)`` is called after every step.
    """
    t0 = time.perf_counter()
    nsteps = problem.n_steps()
    n = problem.M.shape[0]
    free = np.setdiff1d(np.arange(n), problem.dirichlet)
    A = (problem.M + problem.dt * problem.K).tocsr()[free][:, free]
    Mff = problem.M.tocsr()[free][:, free]
    if problem.solver == "lu":
        import scipy.sparse.linalg as spla

        # minimum degree on A + A^T: about 30% less fill than COLAMD for these SPD systems
        lu = spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A")
    elif problem.solver != "pcg":
        raise FEMError(f"unknown solver {problem.solver!r}")
    u = np.zeros(n)
    u[free] = np.asarray(problem.u0, dtype=float)[free]
    total_it = 0
    for k in range(1, nsteps + 1):
        t = k * problem.dt
        b = problem.load(t) if callable(problem.load) else problem.load
        rhs = Mff @ u[free] + problem.dt * np.asarray(b)[free]
        if problem.solver == "lu":
            u[free] = lu.solve(rhs)
        else:
            try:
                u[free], info = pcg(A, rhs, tol=problem.tol, x0=u[free])
            except ConvergenceError as exc:
                raise ConvergenceError(f"step {k} (t = {t:g}): PCG did not converge", exc.iterations, exc.residual) from None
            total_it += info.iterations
        if hook is not None:
            hook(k, t, u)
    return TransientResult(u=u, steps=nsteps, iterations=total_it, seconds=time.perf_counter() - t0)


# -- quantity of interest -----------------------------------------------------------

BOTTOM_HALF = ((0.0, 1.0), (0.0, 0.5))


def qoi_weights(mesh: Mesh, q_field: Callable, subdomain=BOTTOM_HALF) -> np.ndarray:
    """Vector ``w`` with ``Q(u) = w . u`` for ``Q(u) = int_D q u``.

    ``subdomain`` is a box ``((x1_lo, x1_hi), (x2_lo, x2_hi))`` that must be
    a union of whole triangles.
    """
    space = space_of(mesh)
    (a1, b1), (a2, b2) = subdomain
    tol = 1e-12
    V = mesh.vertices[mesh.triangles]
    inside_closed = (
        (V[..., 0] >= a1 - tol) & (V[..., 0] <= b1 + tol) & (V[..., 1] >= a2 - tol) & (V[..., 1] <= b2 + tol)
    )
    inside_open = (V[..., 0] > a1 + tol) & (V[..., 0] < b1 - tol) & (V[..., 1] > a2 + tol) & (V[..., 1] < b2 - tol)
    bc = space.barycenters
    sel = (bc[:, 0] > a1) & (bc[:, 0] < b1) & (bc[:, 1] > a2) & (bc[:, 1] < b2)
    if np.any(sel & ~inside_closed.all(axis=1)) or np.any(~sel & inside_open.any(axis=1)):
        raise FEMError("QoI subdomain is not aligned with the mesh")
    q = np.asarray(q_field(bc[sel]), dtype=float) * np.ones(int(sel.sum()))
    per = (space.areas[sel] * q / 3.0)[:, None] * np.ones(3)
    return np.bincount(mesh.triangles[sel].ravel(), weights=per.ravel(), minlength=mesh.n_vertices)


def evaluate_qoi(mesh: Mesh, u: np.ndarray, q_field: Callable, subdomain=BOTTOM_HALF) -> float:
    """``sum_{K in D} int_K q u_h`` (exact for P1 ``u_h`` with barycentric ``q``)."""
    return float(qoi_weights(mesh, q_field, subdomain) @ u)


def bump(t):
    return t * (1.0 - t)


def separable_weight(g: Callable = bump) -> Callable:
    """``q(x1, x2) = g(x1) g(2 x2)`` on the bottom half."""

    def q(x):
        return g(x[..., 0]) * g(2.0 * x[..., 1])

    return q


# -- verification helpers -----------------------------------------------------------


def l2_error(mesh: Mesh, u: np.ndarray, exact: Callable) -> float:
    """L2 norm of ``exact - u_h`` with the edge-midpoint rule (exact for quadratics)."""
    space = space_of(mesh)
    T = mesh.triangles
    V = mesh.vertices
    total = 0.0
    for a, b in ((0, 1), (1, 2), (2, 0)):
        mid = 0.5 * (V[T[:, a]] + V[T[:, b]])
        uh = 0.5 * (u[T[:, a]] + u[T[:, b]])
        total += np.sum(space.areas / 3.0 * (exact(mid) - uh) ** 2)
    return math.sqrt(total)


def manufactured_convergence(
    exact: Callable,
    forcing: Callable,
    ns=(9, 17, 33, 65),
    T: float = 0.1,
    dt_factor: float = 1.0,
    dirichlet_sides=SIDES,
    solver: str = "pcg",
) -> dict:
    """Observed L2 rate of the solver for a manufactured solution.

    ``exact(x, t)`` must vanish on the Dirichlet sides and the problem has no
    Neumann flux, so use it with all sides Dirichlet unless the solution has
    zero normal derivative elsewhere.  The time step is ``dt_factor h^2``
    rounded so that it divides ``T``.
    """
    hs, errs = [], []
    for n in ns:
        mesh = build_structured_mesh(n, dirichlet_sides=dirichlet_sides)
        space = space_of(mesh)
        h = 1.0 / (n - 1)
        steps = max(1, math.ceil(T / (dt_factor * h * h)))
        dt = T / steps
        K = assemble_stiffness(mesh, np.eye(2))
        M = assemble_mass(mesh)

        def load(t, mesh=mesh, space=space):
            return assemble_load(mesh, forcing(space.barycenters, t))

        prob = TransientProblem(
            K=K, M=M, load=load, u0=exact(mesh.vertices, 0.0), dt=dt, T=T, dirichlet=space.dirichlet, solver=solver
        )
        res = backward_euler_solve(prob)
        hs.append(h)
        errs.append(l2_error(mesh, res.u, lambda x: exact(x, T)))
    hs, errs = np.array(hs), np.array(errs)
    if np.all(errs == 0):
        rate = math.nan
    else:
        rate = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    return {"n": list(ns), "h": hs, "errors": errs, "rate": rate}


def write_field(path, mesh: Mesh, u: np.ndarray) -> None:
    """Plain-text dump: vertex block, triangle block, nodal values."""
    with open(path, "w") as fh:
        fh.write(f"VERTICES {mesh.n_vertices}\n")
        for p in mesh.vertices:
            fh.write(f"{p[0]:.17e} {p[1]:.17e}\n")
        fh.write(f"TRIANGLES {len(mesh.triangles)}\n")
        for t in mesh.triangles:
            fh.write(f"{t[0]} {t[1]} {t[2]}\n")
        fh.write(f"VALUES {len(u)}\n")
        for v in u:
            fh.write(f"{v:.17e}\n")
