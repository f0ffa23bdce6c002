"""Background-flow matrices, velocity laws, and free-flight propagators.

Shared kinematics for the bath, jump, Langevin, and MD simulators: traceless
strain-rate matrices A defining the linear flow u(q) = A q, rotationally
invariant velocity laws with their absolute half-moments, and the exact
propagators (e^{At}, int_0^t e^{As} ds) of the flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.linalg import expm
from scipy.stats import chi2

__all__ = [
    "StrainRate",
    "VelocityLaw",
    "Moments",
    "moment_phi",
    "sphere_area",
    "flow_propagator",
    "region_exit_time",
    "region_exit_times",
    "random_unit_vectors",
]

# Absolute tolerance for the traceless check, relative to the entry scale.
TRACE_TOL = 1e-12


class StrainRate:
    """Traceless d x d strain-rate matrix of the background flow u(q) = A q."""

    def __init__(self, entries):
        A = np.array(entries, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("strain rate must be a square matrix")
        d = A.shape[0]
        if d not in (2, 3):
            raise ValueError("strain rate dimension must be 2 or 3, got %d" % d)
        scale = max(1.0, float(np.abs(A).max()))
        if abs(np.trace(A)) > TRACE_TOL * scale:
            raise ValueError("strain rate must be traceless, got trace %g" % np.trace(A))
        self.entries = A
        self.dim = d
        self.norm = float(np.linalg.norm(A, 2))  # spectral norm
        # A^2 = 0 holds for planar shear; free flight is then exactly quadratic.
        self.nilpotent = bool(np.allclose(A @ A, 0.0, atol=TRACE_TOL * scale * scale))

    @classmethod
    def shear(cls, s, dim=3):
        """Planar shear u = (s q_2, 0, ...): A = s e_1 e_2^T."""
        A = np.zeros((dim, dim))
        A[0, 1] = float(s)
        return cls(A)

    @classmethod
    def zero(cls, dim=3):
        """Quiescent background, A = 0."""
        return cls(np.zeros((dim, dim)))

    @property
    def is_zero(self):
        return self.norm == 0.0

    def apply(self, q):
        """A q for a single point or an (n, d) batch of points."""
        return np.asarray(q, dtype=float) @ self.entries.T

    def __repr__(self):
        return "StrainRate(%r)" % (self.entries.tolist(),)


class VelocityLaw:
    """Rotationally invariant single-atom velocity law.

    Only the gaussian family (density proportional to exp(-beta |v|^2 / 2))
    ships; the quadrature fallbacks elsewhere are written against ``pdf`` and
    ``marginal1`` so a new law only needs to supply those.
    """

    def __init__(self, beta, dim=3, kind="gaussian"):
        if kind != "gaussian":
            raise ValueError("unsupported velocity law %r" % (kind,))
        if beta <= 0:
            raise ValueError("beta must be positive")
        if dim not in (2, 3):
            raise ValueError("velocity law dimension must be 2 or 3")
        self.beta = float(beta)
        self.dim = int(dim)
        self.kind = kind

    def pdf(self, v):
        """Density at velocities v of shape (..., dim)."""
        v = np.asarray(v, dtype=float)
        b = self.beta
        norm = (b / (2.0 * math.pi)) ** (self.dim / 2.0)
        return norm * np.exp(-0.5 * b * np.sum(v * v, axis=-1))

    def marginal1(self, x):
        """First-coordinate marginal f1(x) = int f(x e_1 + v_perp) dv_perp."""
        x = np.asarray(x, dtype=float)
        b = self.beta
        return np.sqrt(b / (2.0 * math.pi)) * np.exp(-0.5 * b * x * x)

    def sample(self, rng, size=None):
        """Draw velocities, shape (size, dim), or (dim,) when size is None."""
        shape = (self.dim,) if size is None else (int(size), self.dim)
        return rng.standard_normal(shape) / math.sqrt(self.beta)

    def speed_quantile(self, p):
        """p-quantile of the speed |v| (|v|^2 is chi-squared over beta)."""
        return math.sqrt(chi2.ppf(p, self.dim) / self.beta)

    def __repr__(self):
        return "VelocityLaw(beta=%g, dim=%d)" % (self.beta, self.dim)


def moment_phi(law, i, method="closed_form"):
    """Absolute half-moment Phi_i = 1/2 int |v_1|^i f(v) dv of a velocity law.

    For the gaussian law this is half an absolute normal moment, with
    Phi_1 = 1/sqrt(2 pi beta), Phi_2 = 1/(2 beta),
    Phi_3 = sqrt(2/pi) beta^{-3/2}, Phi_4 = 3/(2 beta^2).
    ``method="quadrature"`` integrates the first-coordinate marginal
    adaptively instead and works for any law exposing ``marginal1``.
    """
    i = int(i)
    if i < 1:
        raise ValueError("moment order must be a positive integer")
    if method == "closed_form":
        if law.kind != "gaussian":
            raise ValueError("no closed form for law %r, use quadrature" % (law.kind,))
        b = law.beta
        # 1/2 E|X|^i for X ~ N(0, 1/beta).
        return float(
            2.0 ** (i / 2.0) * math.gamma((i + 1) / 2.0) / (2.0 * math.sqrt(math.pi)) / b ** (i / 2.0)
        )
    if method == "quadrature":
        # By symmetry of the marginal, Phi_i = int_0^inf x^i f1(x) dx.
        val, abserr = quad(
            lambda x: x ** i * float(law.marginal1(x)), 0.0, np.inf, epsabs=1e-13, epsrel=1e-12
        )
        if abserr > 1e-9 * max(abs(val), 1e-300):
            raise RuntimeError("half-moment quadrature did not converge")
        return float(val)
    raise ValueError("unknown method %r" % (method,))


@dataclass(frozen=True)
class Moments:
    """First four absolute half-moments Phi_1..Phi_4 of a velocity law."""

    phi1: float
    phi2: float
    phi3: float
    phi4: float

    @classmethod
    def of(cls, law, method="closed_form"):
        return cls(*(moment_phi(law, i, method=method) for i in (1, 2, 3, 4)))


def sphere_area(d):
    """Surface area of the unit sphere S^{d-1} in R^d (2 pi, 4 pi for d = 2, 3)."""
    d = int(d)
    if d < 1:
        raise ValueError("dimension must be a positive integer")
    return float(2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0))


def _as_matrix(A):
    if isinstance(A, StrainRate):
        return A.entries, A.nilpotent
    M = np.asarray(A, dtype=float)
    scale = max(1.0, float(np.abs(M).max()))
    return M, bool(np.allclose(M @ M, 0.0, atol=TRACE_TOL * scale * scale))


def flow_propagator(A, t):
    """Exact flow propagators E = e^{At} and J = int_0^t e^{As} ds.

    Free flight in the background flow is q(t0 + t) = E q(t0) + J w with
    w = v - A q constant along the path. For nilpotent A (planar shear)
    E = I + tA and J = tI + (t^2/2) A exactly; otherwise E comes from
    scaling-and-squaring and J from the block exponential
    exp([[A, I], [0, 0]] t) = [[E, J], [0, I]].

    Returns
    -------
    (E, J) : pair of (d, d) arrays
    """
    M, nilpotent = _as_matrix(A)
    d = M.shape[0]
    eye = np.eye(d)
    t = float(t)
    if nilpotent:
        return eye + t * M, t * eye + (0.5 * t * t) * M
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = M
    block[:d, d:] = eye
    full = expm(block * t)
    return np.ascontiguousarray(full[:d, :d]), np.ascontiguousarray(full[:d, d:])


def region_exit_times(A_norm, Q, V, bound):
    """First time ||A|| |Q + t V| + |V| reaches ``bound`` along straight flight.

    Vectorized over an (n, d) batch; returns an (n,) array with np.inf where
    the segment never crosses (the quantity is convex in t, so a crossing is
    a single forward root of a quadratic). A state already at or past the
    bound returns 0.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    speed = np.linalg.norm(V, axis=1)
    out = np.full(len(Q), np.inf)
    g0 = A_norm * np.linalg.norm(Q, axis=1) + speed
    out[g0 >= bound] = 0.0
    if A_norm == 0.0:
        return out
    todo = (out > 0.0) & (speed > 0.0)
    if np.any(todo):
        r = (bound - speed[todo]) / A_norm
        q, v = Q[todo], V[todo]
        qv = np.sum(q * v, axis=1)
        v2 = speed[todo] ** 2
        disc = qv * qv + v2 * (r * r - np.sum(q * q, axis=1))
        # g0 < bound guarantees |Q| < r, so disc > 0 and the root is forward.
        out[todo] = (-qv + np.sqrt(disc)) / v2
    return out


def region_exit_time(A_norm, Q, V, bound):
    """Scalar version of region_exit_times; returns np.inf when no crossing."""
    return float(region_exit_times(A_norm, np.asarray(Q)[None, :], np.asarray(V)[None, :], bound)[0])


def random_unit_vectors(rng, n, d):
    """n independent uniform directions on S^{d-1}, shape (n, d)."""
    g = rng.standard_normal((int(n), int(d)))
    norms = np.linalg.norm(g, axis=1)
    while np.any(norms < 1e-300):  # pragma: no cover (probability zero redraw)
        bad = norms < 1e-300
        g[bad] = rng.standard_normal((int(bad.sum()), int(d)))
        norms = np.linalg.norm(g, axis=1)
    return g / norms[:, None]
