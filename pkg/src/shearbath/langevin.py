"""Limiting SDE coefficients and integrators.

Coefficients of the nonequilibrium Langevin dynamics

    dQ = V dt,   M dV = -gamma (V - AQ) dt + sigma dW,

derived from the bath parameters, the laminar-limit coefficient sets, and
splitting integrators for the dynamics and its transport variant
M dV = M A V dt - gamma (V - AQ) dt + sigma dW. Steppers take the noise
vector as an explicit argument so they stay deterministic and couplable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flows import StrainRate, flow_propagator, moment_phi, sphere_area

__all__ = [
    "NeldCoefficients",
    "LaminarCoefficients",
    "SdeState",
    "coefficients_from_bath",
    "fdr_check",
    "ou_background_step",
    "ou_exact_step",
    "step_neld",
    "step_neld_A",
    "step_neld_euler",
    "gsllod_roundtrip",
    "laminar_limit_coefficients",
    "run_sde",
    "run_sde_ensemble",
]


@dataclass(frozen=True)
class NeldCoefficients:
    """Friction gamma, noise amplitude sigma, and the geometry they came from.

    sigma is stored independently of gamma rather than forced to
    sqrt(2 gamma / beta), so coefficient sets that break the standard
    fluctuation-dissipation relation remain representable.
    """

    gamma: float
    sigma: float
    M: float
    R: float
    A: StrainRate
    dim: int

    def __post_init__(self):
        if self.gamma < 0 or self.sigma < 0:
            raise ValueError("gamma and sigma must be nonnegative")
        if self.M <= 0 or self.R <= 0:
            raise ValueError("M and R must be positive")
        if self.A.dim != self.dim:
            raise ValueError("strain dimension differs from dim")


@dataclass(frozen=True)
class LaminarCoefficients:
    """Anisotropic friction/noise matrices of a laminar-flow limit.

    flow_factor is the fraction of the background velocity AQ the drift
    relaxes toward: 1 for a single laminar bath, 1/2 for the superposition
    of the three axis-aligned laminar baths.
    """

    gamma_matrix: np.ndarray
    sigma_matrix: np.ndarray
    flow_factor: float


@dataclass
class SdeState:
    """Position, velocity, and time of one SDE path."""

    Q: np.ndarray
    V: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        if self.Q.shape != self.V.shape:
            raise ValueError("Q and V must have the same shape")
        if not (np.all(np.isfinite(self.Q)) and np.all(np.isfinite(self.V))):
            raise ValueError("state entries must be finite")


def coefficients_from_bath(lam, law, R, M, A, method="closed_form"):
    """Limiting coefficients from the bath parameters.

    gamma = 4 lambda R^{d-1} S_{d-1} Phi_1 / d and
    sigma = (4 lambda R^{d-1} S_{d-1} Phi_3 / d)^{1/2}, with Phi_i the
    absolute half-moments of the velocity law. ``method`` is forwarded to the
    moment evaluation ("closed_form" or "quadrature").
    """
    if lam <= 0 or R <= 0 or M <= 0:
        raise ValueError("lambda, R, M must be positive")
    d = law.dim
    if isinstance(A, StrainRate):
        if A.dim != d:
            raise ValueError("strain dimension differs from law dimension")
    else:
        A = StrainRate(A)
    base = 4.0 * lam * R ** (d - 1) * sphere_area(d) / d
    gamma = base * moment_phi(law, 1, method=method)
    sigma = math.sqrt(base * moment_phi(law, 3, method=method))
    return NeldCoefficients(gamma=gamma, sigma=sigma, M=float(M), R=float(R), A=A, dim=d)


def fdr_check(c, beta):
    """Relative deviation |gamma - sigma^2 beta / 2| / gamma from fluctuation-dissipation."""
    return abs(c.gamma - 0.5 * c.sigma ** 2 * beta) / c.gamma


def ou_exact_step(V, AQ, gamma, sigma, M, dt, noise):
    """Exact weak update of M dV = -gamma (V - AQ) dt + sigma dW at frozen AQ.

    V' = alpha V + (1 - alpha) AQ + sigma sqrt((1 - alpha^2)/(2 gamma M)) G
    with alpha = exp(-gamma dt / M); the gamma -> 0 limit is pure diffusion.
    """
    x = gamma * dt / M
    if x < 1e-12:
        # Diffusive limit: drift vanishes, variance sigma^2 dt / M^2.
        return V + (sigma * math.sqrt(dt) / M) * noise
    alpha = math.exp(-x)
    amp = sigma * math.sqrt((1.0 - alpha * alpha) / (2.0 * gamma * M))
    return alpha * V + (1.0 - alpha) * AQ + amp * noise


def ou_background_step(V, AQ, gamma, M, beta, dt, noise):
    """Exact OU update with fluctuation-dissipation noise, sigma^2 = 2 gamma / beta."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    sigma = math.sqrt(2.0 * gamma / beta)
    return ou_exact_step(np.asarray(V, dtype=float), np.asarray(AQ, dtype=float),
                         gamma, sigma, M, dt, np.asarray(noise, dtype=float))


def _step_neld_arrays(Q, V, c, dt, noise):
    """Strang step (half drift, exact OU at midpoint Q, half drift) on raw arrays."""
    Q = Q + 0.5 * dt * V
    V = ou_exact_step(V, Q @ c.A.entries.T, c.gamma, c.sigma, c.M, dt, noise)
    Q = Q + 0.5 * dt * V
    return Q, V


def _step_neld_A_arrays(Q, V, c, dt, noise):
    """Strang step of the transport variant in the relative frame W = V - AQ.

    The transport sub-flow (dQ = (AQ + W) dt at constant W) is integrated
    exactly with the flow propagators; the OU sub-step acts on W alone.
    """
    A = c.A
    E, J = flow_propagator(A, 0.5 * dt)
    W = V - Q @ A.entries.T
    Q = Q @ E.T + W @ J.T
    W = ou_exact_step(W, 0.0, c.gamma, c.sigma, c.M, dt, noise)
    Q = Q @ E.T + W @ J.T
    V = W + Q @ A.entries.T
    return Q, V


def _step_neld_euler_arrays(Q, V, c, dt, noise):
    """Euler-Maruyama reference discretization of the same dynamics."""
    W = V - Q @ c.A.entries.T
    V_new = V - (c.gamma / c.M) * W * dt + (c.sigma / c.M) * math.sqrt(dt) * noise
    Q_new = Q + V * dt
    return Q_new, V_new


def _wrap_stepper(kernel):
    def stepper(state, c, dt, noise):
        if dt <= 0:
            raise ValueError("dt must be positive")
        noise = np.asarray(noise, dtype=float)
        Q, V = kernel(state.Q, state.V, c, dt, noise)
        return SdeState(Q=Q, V=V, t=state.t + dt)

    return stepper


step_neld = _wrap_stepper(_step_neld_arrays)
step_neld_A = _wrap_stepper(_step_neld_A_arrays)
step_neld_euler = _wrap_stepper(_step_neld_euler_arrays)
step_neld.__name__ = "step_neld"
step_neld_A.__name__ = "step_neld_A"
step_neld_euler.__name__ = "step_neld_euler"

_KERNELS = {
    "neld": _step_neld_arrays,
    "neld_A": _step_neld_A_arrays,
    "euler": _step_neld_euler_arrays,
}


def gsllod_roundtrip(state, A):
    """Map (Q, V) to the relative frame (Q, V - AQ) and back; exact identity.

    Documents the frame correspondence between the dynamics and its
    transport-frame form: the peculiar velocity W = V - AQ is the quantity
    the thermostat and the stress see.
    """
    A = A if isinstance(A, StrainRate) else StrainRate(A)
    W = state.V - A.apply(state.Q)
    V_back = W + A.apply(state.Q)
    return SdeState(Q=state.Q.copy(), V=V_back, t=state.t)


def laminar_limit_coefficients(variant, lam, R, beta):
    """Closed-form limiting coefficients of the laminar baths (d = 3).

    single: anisotropic gamma = (2 sqrt(2 pi) lam R^2 / sqrt(beta))
    diag(1, 1/2, 1/2) and noise covariance
    (4 sqrt(2 pi) lam R^2 / beta^{3/2}) diag(2/3, 1/6, 1/6), drift toward the
    full background velocity. triple: the superposition of the three
    axis-aligned baths, scalar gamma = 4 sqrt(2 pi) lam R^2 / (3 sqrt(beta))
    with sigma^2 = gamma / beta, drift toward half the background velocity.
    """
    if lam <= 0 or R <= 0 or beta <= 0:
        raise ValueError("parameters must be positive")
    base = lam * R * R * math.sqrt(2.0 * math.pi)
    if variant == "single":
        gamma = (2.0 * base / math.sqrt(beta)) * np.diag([1.0, 0.5, 0.5])
        ss = (4.0 * base / beta ** 1.5) * np.diag([2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0])
        return LaminarCoefficients(
            gamma_matrix=gamma, sigma_matrix=np.sqrt(ss), flow_factor=1.0
        )
    if variant == "triple":
        gamma = 4.0 * base / (3.0 * math.sqrt(beta))
        sigma = math.sqrt(gamma / beta)
        return LaminarCoefficients(
            gamma_matrix=gamma * np.eye(3),
            sigma_matrix=sigma * np.eye(3),
            flow_factor=0.5,
        )
    raise ValueError("unknown laminar variant %r" % (variant,))


def run_sde(c, state0, dt, n_steps, rng, stepper="neld", record_stride=1):
    """Integrate one path, recording every ``record_stride`` steps.

    Returns a CadlagTrajectory over the stacked (Q, V) state.
    """
    from .analysis import CadlagTrajectory

    kernel = _KERNELS[stepper] if isinstance(stepper, str) else stepper
    Q = np.array(state0.Q, dtype=float)
    V = np.array(state0.V, dtype=float)
    t = state0.t
    times = [t]
    rows = [np.concatenate([Q, V])]
    for k in range(1, n_steps + 1):
        noise = rng.standard_normal(Q.shape)
        Q, V = kernel(Q, V, c, dt, noise)
        t = state0.t + k * dt
        if k % record_stride == 0 or k == n_steps:
            times.append(t)
            rows.append(np.concatenate([Q, V]))
    return CadlagTrajectory(np.array(times), np.array(rows))


def run_sde_ensemble(c, state0, dt, n_steps, n_paths, rng, stepper="neld", record_steps=()):
    """Integrate n_paths independent paths in lockstep.

    record_steps are step indices (0 = initial state) at which the full
    ensemble state is stored. Returns a dict step -> (n_paths, 2d) array of
    stacked (Q, V) rows; the final step is always included.
    """
    kernel = _KERNELS[stepper] if isinstance(stepper, str) else stepper
    d = len(state0.Q)
    Q = np.tile(np.asarray(state0.Q, dtype=float), (n_paths, 1))
    V = np.tile(np.asarray(state0.V, dtype=float), (n_paths, 1))
    wanted = set(int(k) for k in record_steps) | {n_steps}
    out = {}
    if 0 in wanted:
        out[0] = np.hstack([Q, V]).copy()
    for k in range(1, n_steps + 1):
        noise = rng.standard_normal((n_paths, d))
        Q, V = kernel(Q, V, c, dt, noise)
        if k in wanted:
            out[k] = np.hstack([Q, V])
    return out
