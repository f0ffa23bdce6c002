"""Ensemble statistics, a linear-SDE moment oracle, and trajectory distances.

The moment oracle integrates the first- and second-moment ODEs of the limiting
linear SDEs directly (adaptive RK4, no matrix exponentials), so it stays
independent of the propagator machinery it is used to cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flows import StrainRate

__all__ = [
    "CadlagTrajectory",
    "MomentReport",
    "linear_sde_moments",
    "ensemble_moments",
    "moments_from_samples",
    "loglog_slope",
    "skorokhod_upper",
]


class CadlagTrajectory:
    """Right-continuous piecewise-constant samples of a trajectory.

    ``values[i]`` is the state on ``[times[i], times[i+1])``; evaluation
    between samples returns the most recent sample. Jump times (discontinuous
    updates, as opposed to recorded checkpoints) are flagged in ``jump_mask``.
    """

    def __init__(self, times, values, jump_mask=None):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if times.ndim != 1 or len(times) == 0:
            raise ValueError("times must be a nonempty 1D array")
        if np.any(np.diff(times) <= 0.0):
            raise ValueError("sample times must be strictly increasing")
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != len(times):
            raise ValueError("values and times length mismatch")
        if jump_mask is None:
            jump_mask = np.zeros(len(times), dtype=bool)
        else:
            jump_mask = np.asarray(jump_mask, dtype=bool)
            if jump_mask.shape != times.shape:
                raise ValueError("jump_mask and times length mismatch")
        self.times = times
        self.values = values
        self.jump_mask = jump_mask

    @property
    def t0(self):
        return float(self.times[0])

    @property
    def t_end(self):
        return float(self.times[-1])

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def jump_times(self):
        return self.times[self.jump_mask]

    def value_at(self, t):
        """Right-continuous evaluation at scalar or array t within the span."""
        t = np.asarray(t, dtype=float)
        if np.any(t < self.times[0] - 1e-12) or np.any(t > self.times[-1] + 1e-12):
            raise ValueError("evaluation time outside trajectory span")
        idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1)
        return self.values[idx]

    def __len__(self):
        return len(self.times)

    def __repr__(self):
        return "CadlagTrajectory(%d samples on [%g, %g], %d jumps)" % (
            len(self.times),
            self.t0,
            self.t_end,
            int(self.jump_mask.sum()),
        )


@dataclass
class MomentReport:
    """Sample mean and covariance with Monte-Carlo standard errors."""

    mean: np.ndarray
    cov: np.ndarray
    se_mean: np.ndarray
    se_cov: np.ndarray
    n_samples: int


def moments_from_samples(samples):
    """MomentReport from an (n, k) array of i.i.d. samples."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if n < 2:
        raise ValueError("need at least two samples")
    mean = X.mean(axis=0)
    dX = X - mean
    cov = dX.T @ dX / (n - 1)
    cov = 0.5 * (cov + cov.T)
    se_mean = np.sqrt(np.diag(cov) / n)
    # Gaussian-order error of sample covariance entries:
    # Var(C_ij) ~ (C_ii C_jj + C_ij^2) / (n - 1).
    dcov = np.diag(cov)
    se_cov = np.sqrt((np.outer(dcov, dcov) + cov * cov) / (n - 1))
    return MomentReport(mean=mean, cov=cov, se_mean=se_mean, se_cov=se_cov, n_samples=n)


def ensemble_moments(trajectories, t):
    """Cross-sectional moments of an ensemble at time t.

    Accepts a sequence of CadlagTrajectory (evaluated right-continuously at t)
    or a raw (n, k) sample array.
    """
    if isinstance(trajectories, np.ndarray):
        return moments_from_samples(trajectories)
    if len(trajectories) < 2:
        raise ValueError("need at least two trajectories")
    rows = [traj.value_at(float(t)) for traj in trajectories]
    return moments_from_samples(np.asarray(rows))


def _drift_matrix(gamma, M, A, variant):
    A = A.entries if isinstance(A, StrainRate) else np.asarray(A, dtype=float)
    d = A.shape[0]
    B = np.zeros((2 * d, 2 * d))
    B[:d, d:] = np.eye(d)
    B[d:, :d] = (gamma / M) * A
    if variant == "neld":
        B[d:, d:] = -(gamma / M) * np.eye(d)
    elif variant == "neld_A":
        B[d:, d:] = A - (gamma / M) * np.eye(d)
    else:
        raise ValueError("unknown variant %r" % (variant,))
    return B, d


def linear_sde_moments(gamma, sigma, M, A, t, mean0, cov0=None, variant="neld", rtol=1e-10):
    """Moments of the linear SDE dQ = V dt, M dV = drift dt + sigma dW.

    Integrates m' = Bm and C' = BC + CB^T + S for the 2d state (Q, V) with
    adaptive RK4 (step doubling), where for variant "neld" the velocity drift
    is -(gamma/M)(V - AQ) and variant "neld_A" adds the AV transport term.

    Parameters
    ----------
    t : float or increasing array of evaluation times
    mean0 : initial mean, shape (2d,)
    cov0 : initial covariance, shape (2d, 2d); zero when omitted

    Returns
    -------
    (mean, cov) at scalar t, else (means, covs) stacked along the first axis.
    """
    B, d = _drift_matrix(gamma, M, A, variant)
    n = 2 * d
    S = np.zeros((n, n))
    S[d:, d:] = (sigma / M) ** 2 * np.eye(d)

    mean0 = np.asarray(mean0, dtype=float)
    if mean0.shape != (n,):
        raise ValueError("mean0 must have shape (2d,)")
    C0 = np.zeros((n, n)) if cov0 is None else np.asarray(cov0, dtype=float)

    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0.0) or np.any(np.diff(t_arr) < 0.0):
        raise ValueError("evaluation times must be nonnegative and sorted")

    def rhs(y):
        m = y[:n]
        C = y[n:].reshape(n, n)
        dm = B @ m
        dC = B @ C + C @ B.T + S
        return np.concatenate([dm, dC.ravel()])

    def rk4(y, h):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    y = np.concatenate([mean0, C0.ravel()])
    t_now = 0.0
    scale_time = 1.0 / max(1.0, float(np.abs(B).max()), float(np.abs(S).max()))
    h = 0.05 * scale_time
    means, covs = [], []

    for t_stop in t_arr:
        while t_now < t_stop - 1e-15 * max(1.0, t_stop):
            h = min(h, t_stop - t_now)
            y_one = rk4(y, h)
            y_half = rk4(rk4(y, 0.5 * h), 0.5 * h)
            err = float(np.max(np.abs(y_one - y_half))) / 15.0
            tol = rtol * max(float(np.max(np.abs(y_half))), 1e-12)
            if err <= tol:
                t_now += h
                y = y_half + (y_half - y_one) / 15.0
                # Keep the covariance exactly symmetric along the way.
                C = y[n:].reshape(n, n)
                C = 0.5 * (C + C.T)
                y = np.concatenate([y[:n], C.ravel()])
            grow = 0.9 * (tol / err) ** 0.2 if err > 0 else 2.0
            h *= min(2.0, max(0.2, grow))
            if h < 1e-14 * scale_time:
                raise RuntimeError("moment ODE step size underflow")
        means.append(y[:n].copy())
        covs.append(y[n:].reshape(n, n).copy())

    if np.isscalar(t) or np.asarray(t).ndim == 0:
        return means[0], covs[0]
    return np.array(means), np.array(covs)


def loglog_slope(t, y, window=None):
    """Least-squares slope of log y against log t, with its standard error.

    ``window=(lo, hi)`` restricts the fit to lo <= t <= hi.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if window is not None:
        lo, hi = window
        keep = (t >= lo) & (t <= hi)
        t, y = t[keep], y[keep]
    if len(t) < 3:
        raise ValueError("need at least three points in the fit window")
    if np.any(t <= 0.0) or np.any(y <= 0.0):
        raise ValueError("log-log fit requires positive times and values")
    x = np.log(t)
    z = np.log(y)
    xm = x - x.mean()
    sxx = float(xm @ xm)
    slope = float(xm @ z) / sxx
    resid = z - z.mean() - slope * xm
    dof = len(t) - 2
    stderr = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else 0.0
    return slope, stderr


def _sup_difference(f, g, warp_knots=None):
    """Exact sup_t |f(t) - g(lambda(t))| for step functions and piecewise-linear warps."""
    if warp_knots is None:
        xs = np.union1d(f.times, g.times)
        diff = f.value_at(xs) - g.value_at(xs)
        return float(np.max(np.linalg.norm(diff, axis=-1)))
    kx, ky = warp_knots
    # Breakpoints of f itself plus preimages of g's breakpoints under lambda.
    pts = [f.times]
    for i in range(len(kx) - 1):
        x0, x1 = kx[i], kx[i + 1]
        y0, y1 = ky[i], ky[i + 1]
        slope = (y1 - y0) / (x1 - x0)
        inside = g.times[(g.times >= y0) & (g.times <= y1)]
        pts.append(x0 + (inside - y0) / slope)
    xs = np.union1d(np.concatenate(pts), kx)
    xs = xs[(xs >= kx[0]) & (xs <= kx[-1])]
    lam = np.interp(xs, kx, ky)
    diff = f.value_at(xs) - g.value_at(lam)
    return float(np.max(np.linalg.norm(diff, axis=-1)))


def skorokhod_upper(f, g, window=None):
    """Upper bound on the Skorokhod distance between two cadlag trajectories.

    Takes the minimum of the identity warp (the sup-norm) and piecewise-linear
    time warps that align each jump of f with the nearest unmatched jump of g
    within ``window`` (default: a quarter of the span), scoring each warp by
    max(sup |lambda - id|, sup |f - g o lambda|). The result is always an
    upper bound on the metric and never exceeds the sup-norm.
    """
    if f.width != g.width:
        raise ValueError("trajectories have different value dimensions")
    span = f.t_end - f.t0
    if abs(f.t0 - g.t0) > 1e-9 * max(1.0, span) or abs(f.t_end - g.t_end) > 1e-9 * max(1.0, span):
        raise ValueError("trajectories must share a common time span")

    best = _sup_difference(f, g)

    jf = f.jump_times
    jg = g.jump_times
    jf = jf[(jf > f.t0) & (jf < f.t_end)]
    jg = jg[(jg > g.t0) & (jg < g.t_end)]
    if len(jf) == 0 or len(jg) == 0:
        return best
    if window is None:
        window = 0.25 * span

    # Greedy monotone matching of f's jumps to nearby jumps of g.
    pairs = []
    start = 0
    for tf in jf:
        cand = jg[start:]
        if len(cand) == 0:
            break
        k = int(np.argmin(np.abs(cand - tf)))
        if abs(cand[k] - tf) <= window:
            pairs.append((tf, cand[k]))
            start += k + 1
    if not pairs:
        return best

    kx = np.array([f.t0] + [p[0] for p in pairs] + [f.t_end])
    ky = np.array([f.t0] + [p[1] for p in pairs] + [f.t_end])
    if np.any(np.diff(kx) <= 0.0) or np.any(np.diff(ky) <= 0.0):
        return best
    shift = float(np.max(np.abs(kx - ky)))
    cost = max(shift, _sup_difference(f, g, warp_knots=(kx, ky)))
    return min(best, cost)
