"""Computable constants describing the analyticity region of a deformation model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .deformation import DeformationModel, InadmissibleDeformation

SECTOR = 1.0 / math.tan(math.pi / 8)


@dataclass(frozen=True)
class RegionDiagnostics:
    delta_tilde: float
    gamma: float
    beta_max: float
    tau: float
    sigma_hat: float
    B_tilde: float
    D_tilde: float
    C_tilde: float
    epsilon: float
    alpha: float
    d: int
    a_min: float
    a_max: float
    mode_sum: float
    profile_sum: float
    delta_tilde_support: float

    def as_dict(self) -> dict:
        return asdict(self)


def gamma_of(delta_tilde: float, d: int) -> float:
    g = SECTOR * (2.0 - delta_tilde) ** d
    return g / (delta_tilde**d + g)


def beta_candidates(delta_tilde: float, d: int) -> tuple[float, float]:
    lg = math.log(2.0 - gamma_of(delta_tilde, d))
    return delta_tilde * lg / (d + lg), math.sqrt(1.0 + delta_tilde**2 / 2.0) - 1.0


def beta_max(delta_tilde: float, d: int) -> float:
    return min(beta_candidates(delta_tilde, d))


def sigma_hat_of(tau: float) -> float:
    """Polyellipse rate ``log(sqrt(tau^2 + 1) + tau)``."""
    if math.isinf(tau):
        return math.inf
    return math.log(math.sqrt(tau * tau + 1.0) + tau)


def region_constants(delta_tilde, d, a_min, a_max, alpha, beta=None) -> dict:
    """Region size, rate and the real-valued bound constants for a given delta_tilde.

    ``beta`` defaults to the admissibility limit ``beta_max``.
    """
    if not 0.0 < delta_tilde <= 1.0:
        raise InadmissibleDeformation(f"delta_tilde = {delta_tilde:.6g} is not in (0, 1]")
    if not 0.0 < a_min <= a_max:
        raise ValueError("need 0 < a_min <= a_max")
    c = SECTOR
    gamma = gamma_of(delta_tilde, d)
    bmax = beta_max(delta_tilde, d)
    beta = bmax if beta is None else beta
    tau = math.inf if delta_tilde == 1.0 else beta / (1.0 - delta_tilde)
    dd = delta_tilde**d
    td = (2.0 - delta_tilde) ** d
    B = (
        a_min * (c * c - 1.0) * delta_tilde * (delta_tilde - 2.0 * beta) * (dd * alpha - td * (2.0 - alpha))
    ) / (((1.0 + c) * a_max + a_min) ** 2 * td**2 * (2.0 - alpha) ** 2)
    pref = (1.0 + c) / (a_min * c * dd * alpha)
    D = pref * ((2.0 - delta_tilde + beta) ** 2 + 2.0 * beta * (2.0 + (beta - delta_tilde)))
    C = pref * (2.0 * beta - delta_tilde + 2.0) ** 2
    # limit of the formula as B -> 0
    eps = 0.0 if B == 0.0 else 1.0 / ((1.0 + (C / B) ** 2) * D)
    return dict(
        delta_tilde=delta_tilde,
        gamma=gamma,
        beta_max=bmax,
        tau=tau,
        sigma_hat=sigma_hat_of(tau),
        B_tilde=B,
        D_tilde=D,
        C_tilde=C,
        epsilon=eps,
    )


def region_diagnostics(
    model: DeformationModel,
    d: int = 2,
    a_min: float = 1.0,
    a_max: float = 1.0,
    alpha: float = 1.0,
) -> RegionDiagnostics:
    """Diagnostics of the analyticity region for ``model``.

    ``delta_tilde = 1 - sum_l sqrt(lambda_l) sup_x ||B_l(x)||_2`` with the
    nominal coefficients ``sqrt(lambda_l) = amplitude_l / support_scale``.
    The value on the model's own [-1, 1] parameterization (amplitudes as
    stored) is reported as ``delta_tilde_support``; it is smaller whenever
    the stochastic support was rescaled.
    """
    mode_sum = math.fsum(m.amplitude / model.support_scale * m.mode_matrix_sup for m in model.modes)
    support_sum = math.fsum(m.amplitude * m.mode_matrix_sup for m in model.modes)
    profile_sum = math.fsum(m.amplitude / model.support_scale * m.profile_sup for m in model.modes)
    if math.isnan(mode_sum):
        raise ValueError("mode sup estimates missing; build the model with with_sup_estimates")
    dt = 1.0 - mode_sum
    if dt <= 0.0:
        raise InadmissibleDeformation(
            f"delta_tilde = {dt:.6g} <= 0: sum of mode gradient bounds {mode_sum:.6g} >= 1"
        )
    k = region_constants(dt, d, a_min, a_max, alpha)
    return RegionDiagnostics(
        alpha=alpha,
        d=d,
        a_min=a_min,
        a_max=a_max,
        mode_sum=mode_sum,
        profile_sum=profile_sum,
        delta_tilde_support=1.0 - support_sum,
        **k,
    )
