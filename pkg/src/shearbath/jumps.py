"""Poisson jump approximation of the fast-collision dynamics.

The particle flies freely between exponentially distributed jump times and
receives velocity kicks V -> V + V_hat e_n, with (e_n, V_hat) drawn from the
fast-collision rate density. The total intensity is constant on the region
||A|| |Q| + |V| <= c_m / 8 with c_m = m^{-1/5}; leaving that region stops a
run with a flag, mirroring the stopping time of the mechanical process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import dblquad, quad

from .analysis import CadlagTrajectory
from .flows import StrainRate, random_unit_vectors, region_exit_times, sphere_area

__all__ = [
    "RegionExit",
    "JumpLaw",
    "JumpEvent",
    "MarkovRun",
    "jump_rate_density",
    "min_jump_size",
    "jump_intensity",
    "sample_jump",
    "run_markov",
    "run_markov_ensemble",
]

_MAX_REJECTION_ROUNDS = 100_000


class RegionExit(RuntimeError):
    """State left the region where the jump intensity is constant."""


@dataclass(frozen=True)
class JumpLaw:
    """Parameters of the jump process for one atom mass m.

    Derived quantities: c_m = m^{-1/5} (fast threshold), lambda_m = m^{-1/2}
    lambda (atom density), C_m = lambda R^{d-1} ((M+m)/2)^2 (rate prefactor
    in unscaled form), and the constant-intensity region bound c_m / 8.
    """

    lam: float
    m: float
    law: object
    A: StrainRate
    M: float = 1.0
    R: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("atom density lambda must be nonnegative")
        if min(self.m, self.M, self.R) <= 0:
            raise ValueError("m, M, R must be positive")
        if self.A.dim != self.law.dim:
            raise ValueError("strain and velocity-law dimensions differ")
        # The envelope bound and the constant-intensity argument need the
        # background speed at contact to stay under the fast threshold.
        if self.A.norm * self.R > 0.375 * self.c_m:
            raise ValueError(
                "flow speed over the particle radius exceeds the fast-collision "
                "threshold margin at this mass; decrease ||A|| R or m"
            )

    @property
    def dim(self):
        return self.law.dim

    @property
    def c_m(self):
        return self.m ** -0.2

    @property
    def lambda_m(self):
        return self.lam / math.sqrt(self.m)

    @property
    def C_m(self):
        return self.lam * self.R ** (self.dim - 1) * ((self.M + self.m) / 2.0) ** 2

    @property
    def region_bound(self):
        return self.c_m / 8.0

    def marginal1_scaled(self, x):
        """Mass-scaled first marginal f1_m(x) = m^{1/2} f1(m^{1/2} x)."""
        root_m = math.sqrt(self.m)
        return root_m * self.law.marginal1(root_m * np.asarray(x, dtype=float))

    def in_region(self, Q, V):
        return (
            self.A.norm * float(np.linalg.norm(Q)) + float(np.linalg.norm(V))
            <= self.region_bound
        )


@dataclass(frozen=True)
class JumpEvent:
    """One velocity jump: waiting time t since the previous state, direction, magnitude."""

    t: float
    e_n: np.ndarray
    V_hat: float


@dataclass
class MarkovRun:
    """Result of one jump-process path."""

    trajectory: CadlagTrajectory
    n_jumps: int
    stopped: bool
    stop_time: float


def _check_region(jl, Q, V):
    if not jl.in_region(Q, V):
        raise RegionExit(
            "state outside the constant-intensity region ||A|| |Q| + |V| <= c_m/8"
        )


def _contact_background(jl, Q, e_n):
    """Normal background term (A q) . e_n at the contact point q = Q - R e_n."""
    q = np.asarray(Q, dtype=float) - jl.R * np.asarray(e_n, dtype=float)
    return float(jl.A.apply(q) @ np.asarray(e_n, dtype=float))


def min_jump_size(jl, Q, V, e_n):
    """Minimum admissible jump magnitude for direction e_n (zero when the
    relative normal velocity already exceeds the fast threshold)."""
    b = float(np.dot(V, e_n)) - _contact_background(jl, Q, e_n)
    return 2.0 * jl.m / (jl.M + jl.m) * max(jl.c_m - b, 0.0)


def jump_rate_density(jl, V_hat, e_n, Q, V):
    """Fast-collision rate density r_m(V_hat, e_n; Q, V) per (dV_hat, dOmega).

    r_m = lambda_m R^{d-1} kappa^2 H(x - c_m) max(V_hat, 0) f1_m(x) with
    kappa = (M+m)/(2m) and x = kappa V_hat + V.e_n - (Aq).e_n the relative
    normal velocity of the incoming atom at the contact point q = Q - R e_n.
    """
    e_n = np.asarray(e_n, dtype=float)
    if abs(np.linalg.norm(e_n) - 1.0) > 1e-12:
        raise ValueError("e_n must be a unit vector")
    if V_hat <= 0.0:
        return 0.0
    kappa = (jl.M + jl.m) / (2.0 * jl.m)
    x = kappa * V_hat + float(np.dot(V, e_n)) - _contact_background(jl, Q, e_n)
    if x < jl.c_m:
        return 0.0
    return (
        jl.lambda_m
        * jl.R ** (jl.dim - 1)
        * kappa ** 2
        * V_hat
        * float(jl.marginal1_scaled(x))
    )


def _intensity_closed_form(jl):
    # Sphere averages kill the V and Aq terms, leaving the radial tail
    # integral of x f1_m(x); gaussian tail integrates in closed form.
    if jl.law.kind != "gaussian":
        raise ValueError("closed-form intensity requires a gaussian law")
    beta = jl.law.beta
    tail = math.exp(-0.5 * beta * jl.m * jl.c_m ** 2) / math.sqrt(2.0 * math.pi * beta)
    return jl.lam * jl.R ** (jl.dim - 1) * sphere_area(jl.dim) * tail / jl.m


def _intensity_direction(jl, Q, V, e_n):
    """Inner radial integral lambda_m R^{d-1} int_{max(c_m, b)} (x - b) f1_m(x) dx."""
    b = float(np.dot(V, e_n)) - _contact_background(jl, Q, e_n)
    lo = max(jl.c_m, b)
    val, _ = quad(
        lambda x: (x - b) * float(jl.marginal1_scaled(x)),
        lo,
        lo + 60.0 / math.sqrt(jl.law.beta * jl.m),
        epsabs=1e-15,
        epsrel=1e-12,
        limit=200,
    )
    return jl.lambda_m * jl.R ** (jl.dim - 1) * val


def jump_intensity(jl, Q, V, method="closed_form"):
    """Total jump intensity Lambda_m(Q, V), constant inside the region.

    method="quadrature" integrates the rate density over the sphere and the
    radial variable numerically (relative tolerance about 1e-8), as an
    independent route to the gaussian closed form.
    """
    Q = np.asarray(Q, dtype=float)
    V = np.asarray(V, dtype=float)
    _check_region(jl, Q, V)
    if method == "closed_form":
        return _intensity_closed_form(jl)
    if method != "quadrature":
        raise ValueError("unknown method %r" % (method,))
    if jl.dim == 2:
        val, _ = quad(
            lambda th: _intensity_direction(jl, Q, V, np.array([math.cos(th), math.sin(th)])),
            0.0,
            2.0 * math.pi,
            epsabs=1e-12,
            epsrel=1e-11,
            limit=200,
        )
        return val
    val, _ = dblquad(
        lambda th, ph: math.sin(th)
        * _intensity_direction(
            jl,
            Q,
            V,
            np.array(
                [
                    math.sin(th) * math.cos(ph),
                    math.sin(th) * math.sin(ph),
                    math.cos(th),
                ]
            ),
        ),
        0.0,
        2.0 * math.pi,
        0.0,
        math.pi,
        epsabs=1e-10,
        epsrel=1e-9,
    )
    return val


def _draw_jump_batch(jl, Q, V, rng):
    """Vectorized rejection draw of (e_n, V_hat) at the states (Q, V), (k, d) arrays.

    Proposal: e_n uniform on the sphere; x from the linear-tilt gaussian tail
    density ~ x exp(-beta m x^2/2) on [c_m, inf) by inverse CDF
    x = sqrt(c_m^2 + 2 E / (beta m)). Acceptance ratio (x - b)/(x (1 + b_max/c_m))
    with b = V.e_n - (Aq).e_n and b_max = |V| + ||A|| (|Q| + R) >= |b|
    dominates the target exactly since x >= c_m.
    """
    k, d = Q.shape
    beta_m = jl.law.beta * jl.m
    b_max = np.linalg.norm(V, axis=1) + jl.A.norm * (np.linalg.norm(Q, axis=1) + jl.R)
    denom = 1.0 + b_max / jl.c_m
    e_out = np.empty((k, d))
    x_out = np.empty(k)
    todo = np.arange(k)
    for _ in range(_MAX_REJECTION_ROUNDS):
        n = len(todo)
        e = random_unit_vectors(rng, n, d)
        x = np.sqrt(jl.c_m ** 2 + 2.0 * rng.exponential(size=n) / beta_m)
        q = Q[todo] - jl.R * e
        b = np.sum(V[todo] * e, axis=1) - np.sum((q @ jl.A.entries.T) * e, axis=1)
        accept = rng.random(n) * denom[todo] * x <= x - b
        hit = todo[accept]
        e_out[hit] = e[accept]
        x_out[hit] = x[accept]
        todo = todo[~accept]
        if len(todo) == 0:
            break
    else:
        raise RuntimeError("rejection sampler failed to terminate")
    b_fin = np.sum(V * e_out, axis=1) - np.sum(
        ((Q - jl.R * e_out) @ jl.A.entries.T) * e_out, axis=1
    )
    V_hat = 2.0 * jl.m / (jl.M + jl.m) * (x_out - b_fin)
    return e_out, V_hat


def sample_jump(jl, Q, V, rng):
    """Draw the next jump from state (Q, V): waiting time, direction, magnitude.

    The waiting time is exponential with the constant region intensity; the
    (e_n, V_hat) pair comes from the rate density at the state reached by free
    flight over that waiting time (the density couples them through the normal
    velocities there). Only meaningful while the flight stays inside the
    region; a path driver should truncate at the region exit time first.
    """
    Q = np.asarray(Q, dtype=float)
    V = np.asarray(V, dtype=float)
    _check_region(jl, Q, V)
    lam_total = _intensity_closed_form(jl)
    if lam_total == 0.0:
        raise ValueError("no jumps occur at lambda = 0")
    wait = rng.exponential(1.0 / lam_total)
    Qj = Q + wait * V
    e_n, V_hat = _draw_jump_batch(jl, Qj[None, :], V[None, :], rng)
    return JumpEvent(t=wait, e_n=e_n[0], V_hat=float(V_hat[0]))


def run_markov(jl, Q0, V0, T, rng, checkpoints=()):
    """One path of the jump process on [0, T].

    checkpoints are extra recording times; the run stops early (flagged) when
    the state leaves the constant-intensity region, including mid-flight
    through the growth of ||A|| |Q|. The jump draw happens at the post-flight
    state, and only once the flight is known not to be truncated by T or by
    the region exit, so the rejection sampler never runs far outside the
    region.
    """
    Q = np.array(Q0, dtype=float)
    V = np.array(V0, dtype=float)
    _check_region(jl, Q, V)
    lam_total = _intensity_closed_form(jl)
    cps = sorted(float(c) for c in checkpoints if 0.0 < float(c) < T)
    times = [0.0]
    rows = [np.concatenate([Q, V])]
    jumps = [False]
    t = 0.0
    n_jumps = 0
    stopped = False

    def record(tt, jumped):
        # Coinciding times collapse onto one row so the trajectory stays
        # strictly increasing (right-continuous value wins).
        if tt <= times[-1]:
            rows[-1] = np.concatenate([Q, V])
            jumps[-1] = jumps[-1] or jumped
            return
        times.append(tt)
        rows.append(np.concatenate([Q, V]))
        jumps.append(jumped)

    while t < T and not stopped:
        wait = rng.exponential(1.0 / lam_total) if lam_total > 0 else np.inf
        t_seg = min(t + wait, T)
        d_exit = region_exit_times(jl.A.norm, Q[None, :], V[None, :], jl.region_bound)[0]
        exiting = t + d_exit < t_seg
        if exiting:
            t_seg = t + d_exit
        while cps and cps[0] < t_seg:
            c = cps.pop(0)
            Qc = Q + (c - t) * V
            times.append(c)
            rows.append(np.concatenate([Qc, V]))
            jumps.append(False)
        while cps and cps[0] <= t_seg:
            cps.pop(0)  # coincides with the record below
        Q = Q + (t_seg - t) * V
        t = t_seg
        if exiting:
            stopped = True
            record(t, False)
        elif t >= T:
            record(T, False)
        else:
            e_n, V_hat = _draw_jump_batch(jl, Q[None, :], V[None, :], rng)
            V = V + float(V_hat[0]) * e_n[0]
            n_jumps += 1
            record(t, True)
            if not jl.in_region(Q, V):
                stopped = True
    return MarkovRun(
        trajectory=CadlagTrajectory(np.array(times), np.array(rows), np.array(jumps)),
        n_jumps=n_jumps,
        stopped=stopped,
        stop_time=t,
    )


def run_markov_ensemble(jl, Q0, V0, T, n_paths, rng, checkpoints=()):
    """Lockstep ensemble of jump-process paths.

    Returns a dict with the terminal states, per-checkpoint states (NaN rows
    for paths stopped before the checkpoint), the stopped mask, stop times,
    and jump counts. Stopped paths carry their frozen stop state in "final".
    """
    d = jl.dim
    lam_total = _intensity_closed_form(jl)
    Q = np.tile(np.asarray(Q0, dtype=float), (n_paths, 1))
    V = np.tile(np.asarray(V0, dtype=float), (n_paths, 1))
    _check_region(jl, Q[0], V[0])
    t = np.zeros(n_paths)
    stopped = np.zeros(n_paths, dtype=bool)
    done = np.zeros(n_paths, dtype=bool)
    n_jumps = np.zeros(n_paths, dtype=np.int64)
    cps = np.array(sorted(float(c) for c in checkpoints if 0.0 < float(c) <= T))
    cp_vals = np.full((n_paths, len(cps), 2 * d), np.nan)

    while not np.all(done | stopped):
        active = ~(done | stopped)
        idx = np.flatnonzero(active)
        if lam_total > 0:
            wait = rng.exponential(1.0 / lam_total, size=len(idx))
        else:
            wait = np.full(len(idx), np.inf)
        t_next = t[idx] + wait
        d_exit = region_exit_times(jl.A.norm, Q[idx], V[idx], jl.region_bound)
        t_seg = np.minimum(np.minimum(t_next, T), t[idx] + d_exit)
        # Record checkpoints crossed during this flight segment.
        for j, c in enumerate(cps):
            hit = (t[idx] < c) & (t_seg >= c)
            rows = idx[hit]
            if len(rows):
                Qc = Q[rows] + (c - t[rows])[:, None] * V[rows]
                cp_vals[rows, j, :d] = Qc
                cp_vals[rows, j, d:] = V[rows]
        Q[idx] += (t_seg - t[idx])[:, None] * V[idx]
        exiting = t_seg < np.minimum(t_next, T)
        finishing = (~exiting) & (t_next >= T)
        jumping = (~exiting) & (~finishing)
        t[idx] = t_seg
        stopped[idx[exiting]] = True
        done[idx[finishing]] = True
        jrows = idx[jumping]
        if len(jrows):
            e_n, V_hat = _draw_jump_batch(jl, Q[jrows], V[jrows], rng)
            V[jrows] += V_hat[:, None] * e_n
            n_jumps[jrows] += 1
            norms = jl.A.norm * np.linalg.norm(Q[jrows], axis=1) + np.linalg.norm(
                V[jrows], axis=1
            )
            stopped[jrows[norms >= jl.region_bound]] = True

    return {
        "final": np.hstack([Q, V]),
        "t_final": t,
        "checkpoints": cps,
        "checkpoint_values": cp_vals,
        "stopped": stopped,
        "n_jumps": n_jumps,
    }
