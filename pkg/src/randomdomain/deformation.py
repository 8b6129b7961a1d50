"""Random domain mappings of the unit square and the fields they induce.

A realization of the random domain is the image of the reference square
under

    F(x, y) = x + c * e(x, y) * v(x),     e(x, y) = sum_l a_l * b_l(x) * y_l,

with ``y`` in [-1, 1]^N.  ``a_l`` is the effective amplitude: when the
stochastic variables live on a wider symmetric interval (the uniform
(-sqrt 3, sqrt 3) variables of the reference experiment) the half-width is
folded into ``a_l`` at construction and remembered in ``support_scale``.

Two variants exist.  ``generic`` takes a user direction field ``v`` with an
analytic Jacobian.  ``upper-half-stretch`` stretches the part of the square
above ``x2 = 0.5`` vertically and leaves the lower half fixed; it is the
generic form with ``v(x) = (0, max(x2 - 0.5, 0))`` but is evaluated through
its closed-form Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

VARIANTS = ("generic", "upper-half-stretch")


class DeformationError(ValueError):
    pass


class InadmissibleDeformation(DeformationError):
    """The Jacobian of the mapping is (numerically) singular or inverted."""


@dataclass(frozen=True)
class DeformationMode:
    index: int
    amplitude: float
    profile: Callable = field(repr=False, compare=False)
    gradient: Callable = field(repr=False, compare=False)
    profile_sup: float = math.nan
    mode_matrix_sup: float = math.nan

    def __post_init__(self):
        if self.index < 1:
            raise DeformationError("mode index must be >= 1")
        if self.amplitude < 0:
            raise DeformationError("mode amplitude must be nonnegative")


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise DeformationError(f"points must have 2 coordinates, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class DeformationModel:
    modes: tuple
    variant: str = "upper-half-stretch"
    c: float = 1.0
    direction: Optional[Callable] = field(default=None, repr=False, compare=False)
    direction_jacobian: Optional[Callable] = field(default=None, repr=False, compare=False)
    support_scale: float = 1.0
    det_tol: float = 1e-12
    label: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DeformationError(f"unknown variant {self.variant!r}")
        if self.c < 0:
            raise DeformationError("scaling c must be >= 0")
        if self.variant == "generic" and (self.direction is None or self.direction_jacobian is None):
            raise DeformationError("generic variant needs a direction field and its Jacobian")
        object.__setattr__(self, "modes", tuple(self.modes))

    @property
    def N(self) -> int:
        return len(self.modes)

    # -- scalar displacement field -------------------------------------------------

    def _check_y(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.size != self.N:
            raise DeformationError(f"stochastic point has {y.size} components, model has N = {self.N}")
        return y

    def displacement(self, x, y) -> np.ndarray:
        """``e(x, y)`` at points ``x`` of shape (..., 2)."""
        x = _as_points(x)
        y = self._check_y(y)
        e = np.zeros(x.shape[:-1])
        for mode, yl in zip(self.modes, y):
            if yl != 0.0:
                e = e + (mode.amplitude * yl) * mode.profile(x)
        return e

    def displacement_gradient(self, x, y) -> np.ndarray:
        x = _as_points(x)
        y = self._check_y(y)
        g = np.zeros(x.shape)
        for mode, yl in zip(self.modes, y):
            if yl != 0.0:
                g = g + (mode.amplitude * yl) * mode.gradient(x)
        return g

    def _direction(self, x):
        """Return ``(v, dv)`` with shapes (..., 2) and (..., 2, 2)."""
        if self.variant == "generic":
            return np.asarray(self.direction(x), dtype=float), np.asarray(self.direction_jacobian(x), dtype=float)
        up = x[..., 1] > 0.5
        v = np.zeros(x.shape)
        v[..., 1] = np.where(up, x[..., 1] - 0.5, 0.0)
        dv = np.zeros(x.shape[:-1] + (2, 2))
        dv[..., 1, 1] = np.where(up, 1.0, 0.0)
        return v, dv

    # -- mapping and Jacobian --------------------------------------------------------

    def map_point(self, x, y) -> np.ndarray:
        x = _as_points(x)
        e = self.displacement(x, y)
        if self.variant == "upper-half-stretch":
            out = x.copy()
            up = x[..., 1] > 0.5
            stretched = (x[..., 1] - 0.5) * (1.0 + self.c * e) + 0.5
            out[..., 1] = np.where(up, stretched, x[..., 1])
            return out
        v, _ = self._direction(x)
        return x + (self.c * e)[..., None] * v

    def jacobian(self, x, y, check: bool = True) -> np.ndarray:
        x = _as_points(x)
        e = self.displacement(x, y)
        ge = self.displacement_gradient(x, y)
        J = np.zeros(x.shape[:-1] + (2, 2))
        if self.variant == "upper-half-stretch":
            up = x[..., 1] > 0.5
            h = x[..., 1] - 0.5
            J[..., 0, 0] = 1.0
            J[..., 1, 0] = np.where(up, self.c * h * ge[..., 0], 0.0)
            J[..., 1, 1] = np.where(up, 1.0 + self.c * e + self.c * h * ge[..., 1], 1.0)
        else:
            v, dv = self._direction(x)
            J[...] = np.eye(2)
            J += self.c * (e[..., None, None] * dv + v[..., :, None] * ge[..., None, :])
        if check:
            det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
            if np.any(~np.isfinite(det)) or np.any(det <= self.det_tol):
                raise InadmissibleDeformation(
                    f"Jacobian determinant {float(np.nanmin(det)):.3e} <= {self.det_tol:g}; deformation too large"
                )
        return J

    def mode_matrix(self, l: int, x) -> np.ndarray:
        """``B_l(x) = c * (b_l dv + v grad(b_l)^T)`` for 1 <= l <= N."""
        if not 1 <= l <= self.N:
            raise DeformationError(f"mode index {l} out of range 1..{self.N}")
        x = _as_points(x)
        mode = self.modes[l - 1]
        v, dv = self._direction(x)
        b = np.asarray(mode.profile(x), dtype=float) * np.ones(x.shape[:-1])
        gb = np.asarray(mode.gradient(x), dtype=float) * np.ones(x.shape)
        return self.c * (b[..., None, None] * dv + v[..., :, None] * gb[..., None, :])

    def jacobian_det_weight(self, x, y) -> np.ndarray:
        J = self.jacobian(x, y)
        return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]

    def diffusion_matrix(self, x, y, a: Optional[Callable] = None) -> np.ndarray:
        """``G = (a o F) det(J) J^{-1} J^{-T}`` at points ``x`` (shape (..., 2, 2)).

        ``a`` is evaluated at the mapped points; ``None`` means ``a = 1``.
        """
        x = _as_points(x)
        J = self.jacobian(x, y)
        return diffusion_from_jacobian(J, None if a is None else a(self.map_point(x, y)))

    def truncate(self, n_s: int) -> "DeformationModel":
        if not 1 <= n_s <= self.N:
            raise DeformationError(f"N_s = {n_s} outside 1..{self.N}")
        return replace(self, modes=self.modes[:n_s])

    def tail_bound(self, n_s: int) -> float:
        """``B_T = sum_{l > n_s} sqrt(lambda_l) * sup ||B_l||_2`` (zero when n_s = N).

        Uses the nominal coefficients ``amplitude / support_scale``, the same
        normalization as ``delta_tilde``.
        """
        if not 0 <= n_s <= self.N:
            raise DeformationError(f"N_s = {n_s} outside 0..{self.N}")
        return float(math.fsum(m.amplitude / self.support_scale * m.mode_matrix_sup for m in self.modes[n_s:]))


def diffusion_from_jacobian(J: np.ndarray, a_values=None) -> np.ndarray:
    """Matrix coefficient ``a det(J) J^{-1} J^{-T}`` from stacked 2x2 Jacobians.

    Uses the adjugate so the result is symmetric bit for bit.
    """
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    adj = np.empty_like(J)
    adj[..., 0, 0] = J[..., 1, 1]
    adj[..., 0, 1] = -J[..., 0, 1]
    adj[..., 1, 0] = -J[..., 1, 0]
    adj[..., 1, 1] = J[..., 0, 0]
    G = np.empty_like(J)
    for i in range(2):
        for j in range(i, 2):
            G[..., i, j] = adj[..., i, 0] * adj[..., j, 0] + adj[..., i, 1] * adj[..., j, 1]
            G[..., j, i] = G[..., i, j]
    scale = 1.0 / det
    if a_values is not None:
        scale = scale * np.asarray(a_values, dtype=float)
    return G * scale[..., None, None]


def sample_points(n: int = 129) -> np.ndarray:
    """Lattice vertices of an n x n mesh of the unit square plus triangle barycenters."""
    t = np.linspace(0.0, 1.0, n)
    X1, X2 = np.meshgrid(t, t)
    verts = np.column_stack([X1.ravel(), X2.ravel()])
    h = 1.0 / (n - 1)
    c = t[:-1]
    C1, C2 = np.meshgrid(c, c)
    lower = np.column_stack([(C1 + 2 * h / 3).ravel(), (C2 + h / 3).ravel()])
    upper = np.column_stack([(C1 + h / 3).ravel(), (C2 + 2 * h / 3).ravel()])
    return np.vstack([verts, lower, upper])


def with_sup_estimates(model: DeformationModel, points=None) -> DeformationModel:
    """Fill ``profile_sup`` and ``mode_matrix_sup`` of every mode by sampling."""
    pts = sample_points() if points is None else _as_points(points)
    modes = []
    for l, mode in enumerate(model.modes, start=1):
        b = np.asarray(mode.profile(pts), dtype=float) * np.ones(len(pts))
        B = model.mode_matrix(l, pts)
        norms = np.linalg.norm(B, ord=2, axis=(-2, -1))
        modes.append(replace(mode, profile_sup=float(np.max(np.abs(b))), mode_matrix_sup=float(np.max(norms))))
    return replace(model, modes=tuple(modes))


# -- the reference experiment ------------------------------------------------------


def _constant_mode():
    def profile(x):
        return np.ones(np.shape(x)[:-1])

    def gradient(x):
        return np.zeros(np.shape(x))

    return profile, gradient


def _trig_mode(n: int, period: float):
    k = (n // 2) * math.pi / period
    if n % 2 == 0:

        def profile(x):
            return np.sin(k * x[..., 0]) / n

        def gradient(x):
            g = np.zeros(np.shape(x))
            g[..., 0] = k * np.cos(k * x[..., 0]) / n
            return g

    else:

        def profile(x):
            return np.cos(k * x[..., 0]) / n

        def gradient(x):
            g = np.zeros(np.shape(x))
            g[..., 0] = -k * np.sin(k * x[..., 0]) / n
            return g

    return profile, gradient


def experiment_amplitudes(N: int, L: float = 19 / 50, decay: float = 1.0, first_mode: str = "sqrt") -> list[float]:
    """Nominal mode coefficients ``sqrt(lambda_n)`` of the square-stretch experiment.

    For ``n >= 2`` the coefficient decays as ``(sqrt(pi) L)^(1/2) / n**decay``.
    The constant first mode has coefficient ``(sqrt(pi) L / 2)^(1/2)``
    (``first_mode="sqrt"``) or ``sqrt(pi) L / 2`` (``first_mode="literal"``).
    """
    if first_mode not in ("sqrt", "literal"):
        raise DeformationError(f"first_mode must be 'sqrt' or 'literal', got {first_mode!r}")
    a1 = math.sqrt(math.pi) * L / 2
    if first_mode == "sqrt":
        a1 = math.sqrt(a1)
    base = math.sqrt(math.sqrt(math.pi) * L)
    return [a1] + [base / n**decay for n in range(2, N + 1)]


def experiment_model(
    N: int = 15,
    L: float = 19 / 50,
    L_p: float = 1.0,
    c: float = 1 / 2.175,
    decay: float = 1.0,
    support_scale: float = math.sqrt(3.0),
    sample_n: int = 129,
    first_mode: str = "sqrt",
) -> DeformationModel:
    """Upper-half-stretch model with N sin/cos modes along ``x1``.

    Mode 1 is constant; mode ``n >= 2`` has profile
    ``sin(floor(n/2) pi x1 / L_p) / n`` for even ``n`` and the cosine for odd
    ``n``.  ``support_scale`` is the half-width of the interval the
    stochastic variables are uniform on; it is absorbed into the amplitudes.
    """
    if N < 1:
        raise DeformationError("N must be >= 1")
    modes = []
    for n, amp in enumerate(experiment_amplitudes(N, L, decay, first_mode), start=1):
        prof, grad = _constant_mode() if n == 1 else _trig_mode(n, L_p)
        modes.append(DeformationMode(index=n, amplitude=support_scale * amp, profile=prof, gradient=grad))
    model = DeformationModel(
        modes=tuple(modes),
        variant="upper-half-stretch",
        c=c,
        support_scale=support_scale,
        label=f"stretch(N={N},L={L!r},L_p={L_p!r},c={c!r},decay={decay!r},scale={support_scale!r},first={first_mode})",
    )
    return with_sup_estimates(model, sample_points(sample_n))
