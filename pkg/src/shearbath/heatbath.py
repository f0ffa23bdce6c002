"""Event-driven dynamics of one heavy particle in a sheared bath of atoms.

One sphere of mass M and radius R flies ballistically between elastic
collisions with point atoms sampled from a Poisson field. Atoms follow the
background flow: their relative velocity w = v - Aq is constant between
collisions, so positions are quadratic in time for shear (A nilpotent). The
simulation truncates the infinite bath to a ball chosen so the probability
that any omitted atom could have reached the particle is provably small, and
it stops at the first time ||A|| |Q| + |V| reaches c_m / 8.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.stats import chi2

from .analysis import CadlagTrajectory
from .flows import StrainRate, flow_propagator, random_unit_vectors, region_exit_time, sphere_area

log = logging.getLogger(__name__)

__all__ = [
    "EnergyBoundError",
    "RecollisionError",
    "BathConfig",
    "BathAtoms",
    "MechState",
    "CollisionEvent",
    "MechRun",
    "default_domain_radius",
    "escape_probability_bound",
    "sample_bath",
    "next_collision_time",
    "elastic_collision",
    "run_mechanical",
    "slow_collision_share",
]


class EnergyBoundError(RuntimeError):
    """Total kinetic energy exceeded the flow-work growth bound."""


class RecollisionError(RuntimeError):
    """An atom that already had a fast collision collided again."""


@dataclass(frozen=True)
class BathConfig:
    """Bath parameters for one mechanical run.

    The Poisson intensity is lambda_m = m^{-1/2} lambda and atom relative
    velocities are w = m^{-1/2} xi with xi drawn from the base law, so the
    atom speed scale grows like m^{-1/2} as the mass shrinks. domain_radius
    defaults to |Q0| + (v_cut + c_m) T e^{||A|| T} with v_cut the
    (1 - quantile_tail) quantile of |w|; the tail constant is configurable
    and validated against the escape-probability bound at sample time.
    """

    lam: float
    m: float
    law: object
    A: StrainRate
    T: float
    quantile_tail: float = 1e-8
    domain_radius: float | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("atom density lambda must be nonnegative")
        if self.m <= 0 or self.T <= 0:
            raise ValueError("m and T must be positive")
        if not 0.0 < self.quantile_tail < 1e-2:
            raise ValueError("quantile_tail must lie in (0, 1e-2)")
        if self.A.dim != self.law.dim:
            raise ValueError("strain and velocity-law dimensions differ")

    @property
    def dim(self):
        return self.law.dim

    @property
    def lambda_m(self):
        return self.lam / math.sqrt(self.m)

    @property
    def c_m(self):
        return self.m ** -0.2

    @property
    def v_cut(self):
        """(1 - quantile_tail) quantile of the atom relative speed."""
        return self.law.speed_quantile(1.0 - self.quantile_tail) / math.sqrt(self.m)


@dataclass
class BathAtoms:
    """Sampled atoms, kept as arrays: positions, relative velocities, flags.

    q holds positions at the container's reference time (sampling time, or
    the latest event during a run); w is constant between collisions.
    domain_radius and escape_bound record the truncation used at sampling.
    """

    q: np.ndarray
    w: np.ndarray
    alive: np.ndarray
    fast_hit: np.ndarray
    domain_radius: float = math.nan
    escape_bound: float = math.nan

    def __len__(self):
        return len(self.q)


@dataclass
class MechState:
    """Particle state: position, velocity, mass, radius, current time."""

    Q: np.ndarray
    V: np.ndarray
    M: float = 1.0
    R: float = 1.0
    t: float = 0.0

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        if self.Q.shape != self.V.shape or self.Q.ndim != 1:
            raise ValueError("Q and V must be vectors of equal dimension")
        if not (np.all(np.isfinite(self.Q)) and np.all(np.isfinite(self.V))):
            raise ValueError("state must be finite")
        if self.M <= 0 or self.R <= 0:
            raise ValueError("M and R must be positive")


@dataclass(frozen=True)
class CollisionEvent:
    """One elastic collision: time, partner, geometry, normal velocities."""

    t: float
    atom_id: int
    e_n: np.ndarray
    v_n: float
    V_n: float
    fast: bool
    v_n_post: float
    V_n_post: float
    V_post: np.ndarray


@dataclass
class MechRun:
    """Result of one mechanical run."""

    trajectory: CadlagTrajectory
    events: list
    tau_m: float
    stopped: bool
    n_atoms: int
    escape_bound: float
    atoms: BathAtoms
    min_clearance: float = math.nan


def default_domain_radius(cfg, q0_norm):
    """Truncation radius |Q0| + (v_cut + c_m) T e^{||A|| T}."""
    return q0_norm + (cfg.v_cut + cfg.c_m) * cfg.T * math.exp(cfg.A.norm * cfg.T)


def escape_probability_bound(cfg, q0_norm, radius, R):
    """Expected number of atoms beyond the truncation ball that could reach
    the particle's neighborhood within the horizon.

    An atom at distance r needs relative speed at least
    (r - |Q0| - R) / (T e^{||A|| T}) - c_m to close the gap; the bound
    integrates the Poisson intensity against that speed tail.
    """
    d = cfg.dim
    bm = cfg.law.beta * cfg.m
    stretch = cfg.T * math.exp(cfg.A.norm * cfg.T)

    def integrand(r):
        v_req = (r - q0_norm - R) / stretch - cfg.c_m
        if v_req <= 0.0:
            return cfg.lambda_m * sphere_area(d) * r ** (d - 1)
        return cfg.lambda_m * sphere_area(d) * r ** (d - 1) * chi2.sf(bm * v_req * v_req, d)

    upper = q0_norm + R + (cfg.c_m + cfg.v_cut + 60.0 / math.sqrt(bm)) * stretch
    if upper <= radius:
        return 0.0
    val, _ = quad(integrand, radius, upper, epsabs=1e-13, epsrel=1e-8, limit=400)
    return val


def sample_bath(cfg, state, rng):
    """Draw the truncated Poisson bath around the particle.

    Atom count ~ Poisson(lambda_m vol(ball)), positions uniform in the ball
    (centered at the origin), relative velocities m^{-1/2} xi with xi from
    the base law. Atoms overlapping the particle at time zero are deleted.
    Raises when the escape-probability bound exceeds 1e-3.
    """
    d = cfg.dim
    q0_norm = float(np.linalg.norm(state.Q))
    radius = cfg.domain_radius if cfg.domain_radius is not None else default_domain_radius(cfg, q0_norm)
    bound = escape_probability_bound(cfg, q0_norm, radius, state.R)
    if bound > 1e-3:
        raise ValueError(
            "escape-probability bound %.3g exceeds 1e-3; enlarge domain_radius "
            "or decrease quantile_tail" % bound
        )
    log.info("bath truncation radius %.4g, escape bound %.3g", radius, bound)
    vol = sphere_area(d) * radius ** d / d
    n = int(rng.poisson(cfg.lambda_m * vol))
    pos = random_unit_vectors(rng, n, d) * (radius * rng.random(n) ** (1.0 / d))[:, None]
    w = cfg.law.sample(rng, n) / math.sqrt(cfg.m)
    keep = np.linalg.norm(pos - state.Q, axis=1) > state.R
    pos, w = pos[keep], w[keep]
    n = len(pos)
    return BathAtoms(
        q=pos,
        w=w,
        alive=np.ones(n, dtype=bool),
        fast_hit=np.zeros(n, dtype=bool),
        domain_radius=float(radius),
        escape_bound=float(bound),
    )


def elastic_collision(V, v, e_n, M, m):
    """Elastic exchange of normal momentum between particle (M, V) and atom (m, v).

    e_n is the unit normal from the atom toward the particle center; the pair
    must be approaching (v.e_n > V.e_n). Tangential components are unchanged;
    the normal components follow the two-mass elastic rule. Accepts single
    vectors or matching (n, d) batches.
    """
    V = np.asarray(V, dtype=float)
    v = np.asarray(v, dtype=float)
    e_n = np.asarray(e_n, dtype=float)
    single = V.ndim == 1
    Vb, vb, eb = np.atleast_2d(V), np.atleast_2d(v), np.atleast_2d(e_n)
    if np.any(np.abs(np.linalg.norm(eb, axis=1) - 1.0) > 1e-12):
        raise ValueError("e_n must be a unit vector")
    dv = np.sum(vb * eb, axis=1) - np.sum(Vb * eb, axis=1)
    if np.any(dv <= 0.0):
        raise ValueError("pair must be approaching (v_n > V_n)")
    V_out = Vb + (2.0 * m / (M + m)) * dv[:, None] * eb
    v_out = vb - (2.0 * M / (M + m)) * dv[:, None] * eb
    if single:
        return V_out[0], v_out[0]
    return V_out, v_out


def _poly_eval(c0, c1, c2, c3, c4, t):
    p = (((c4 * t + c3) * t + c2) * t + c1) * t + c0
    dp = ((4.0 * c4 * t + 3.0 * c3) * t + 2.0 * c2) * t + c1
    return p, dp


def _select_entering(c0, c1, c2, c3, c4, cand, window, skip_tol):
    """Polish candidate roots of the squared-distance polynomial and keep the
    earliest entering one per row (inf where none). cand is (k, r), NaN-padded."""
    t = cand.copy()
    C = (c0[:, None], c1[:, None], c2[:, None], c3[:, None], c4[:, None])
    with np.errstate(all="ignore"):
        for _ in range(8):
            p, dp = _poly_eval(*C, t)
            step = np.where(np.abs(dp) > 1e-300, p / np.where(dp == 0.0, 1.0, dp), 0.0)
            t = t - step
        p, dp = _poly_eval(*C, t)
    wmax = window
    scale = (
        np.abs(c0)
        + np.abs(c1) * wmax
        + np.abs(c2) * wmax ** 2
        + np.abs(c3) * wmax ** 3
        + np.abs(c4) * wmax ** 4
    )
    ok = (
        (np.abs(p) <= 1e-11 * scale[:, None])
        & (t > skip_tol)
        & (t <= window * (1.0 + 1e-12))
        & (dp < 0.0)
    )
    t_ok = np.where(ok, t, np.inf)
    with np.errstate(invalid="ignore"):
        return np.nanmin(np.where(np.isnan(t_ok), np.inf, t_ok), axis=1)


def _nilpotent_entering_roots(d0, u, a, R, window, skip_tol):
    """Earliest entering contact times for quadratic atom paths (batched).

    |d0 + t u + (t^2/2) a|^2 - R^2 is quartic in t; roots come from the
    companion matrix of the monic quartic (or the quadratic formula where the
    leading coefficient vanishes), then Newton polish.
    """
    k = len(d0)
    c4 = 0.25 * np.sum(a * a, axis=1)
    c3 = np.sum(u * a, axis=1)
    c2 = np.sum(u * u, axis=1) + np.sum(d0 * a, axis=1)
    c1 = 2.0 * np.sum(d0 * u, axis=1)
    c0 = np.sum(d0 * d0, axis=1) - R * R
    cand = np.full((k, 6), np.nan)

    quart = c4 > 1e-300
    if np.any(quart):
        b = np.stack([c3[quart] / c4[quart], c2[quart] / c4[quart], c1[quart] / c4[quart], c0[quart] / c4[quart]], axis=1)
        comp = np.zeros((len(b), 4, 4))
        comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
        comp[:, 0, :] = -b
        roots = np.linalg.eigvals(comp)
        # keep near-real eigenvalues only; genuinely complex pairs (no real
        # crossing) sit far from the axis, while a grazing double root only
        # picks up an imaginary part of order sqrt(eps)
        real_ok = np.abs(roots.imag) <= 0.05 * (1.0 + np.abs(roots.real))
        cand[quart, :4] = np.where(real_ok, roots.real, np.nan)
    # Quadratic candidates where the quartic term is absent or tiny (a ~ 0).
    small = c4 * window ** 4 <= 1e-6 * (np.abs(c2) * window ** 2 + np.abs(c1) * window + np.abs(c0) + 1e-300)
    if np.any(small):
        aa, bb, cc = c2[small], c1[small], c0[small]
        disc = bb * bb - 4.0 * aa * cc
        root_ok = (disc >= 0.0) & (np.abs(aa) > 1e-300)
        sq = np.sqrt(np.maximum(disc, 0.0))
        denom = np.where(np.abs(aa) > 1e-300, 2.0 * aa, 1.0)
        r1 = np.where(root_ok, (-bb - sq) / denom, np.nan)
        r2 = np.where(root_ok, (-bb + sq) / denom, np.nan)
        cand[small, 4] = r1
        cand[small, 5] = r2
    return _select_entering(c0, c1, c2, c3, c4, cand, window, skip_tol)


def _generic_entering_roots(q, w, A, Q, V, R, window, skip_tol):
    """Fallback contact times for non-nilpotent flows: scan the squared
    distance at step R / (4 (|V| + v_max)) and bracket sign changes."""
    k = len(q)
    out = np.full(k, np.inf)
    speed_V = float(np.linalg.norm(V))
    vmax = math.exp(A.norm * window) * float(
        np.max(np.linalg.norm(w + A.apply(q), axis=1), initial=0.0)
    )
    delta = R / (4.0 * (speed_V + vmax + 1e-300))
    n_steps = max(2, min(int(window / delta) + 2, 200_000))
    ts = np.linspace(0.0, window, n_steps)
    props = [flow_propagator(A.entries, t) for t in ts]

    def gap2(i, t):
        E, J = flow_propagator(A.entries, t)
        dvec = E @ q[i] + J @ w[i] - Q - t * V
        return float(dvec @ dvec) - R * R

    for i in range(k):
        vals = np.array(
            [float(np.sum((E @ q[i] + J @ w[i] - Q - t * V) ** 2)) - R * R for (E, J), t in zip(props, ts)]
        )
        sign_change = np.flatnonzero((vals[:-1] > 0.0) & (vals[1:] <= 0.0))
        for j in sign_change:
            root = brentq(lambda t: gap2(i, t), ts[j], ts[j + 1], xtol=1e-14, rtol=1e-14)
            if root > skip_tol:
                out[i] = root
                break
    return out


def _earliest_collision(q, w, A, Q, V, R, window, skip_tol=1e-12):
    """Global earliest collision over all atoms within the window.

    A cheap per-atom lower bound (distance over maximum closing speed)
    selects a small candidate set; the set expands until the best exact root
    provably beats every unexamined atom's bound.
    """
    n = len(q)
    if n == 0 or window <= 0.0:
        return np.inf, []
    v0 = w if A.is_zero else w + A.apply(q)
    d0 = q - Q
    u = v0 - V
    dist = np.linalg.norm(d0, axis=1)
    vmax = math.exp(A.norm * window) * np.linalg.norm(v0, axis=1) + float(np.linalg.norm(V))
    t_lb = np.maximum(dist - R, 0.0) / np.maximum(vmax, 1e-300)
    K = 64
    while True:
        if K >= n:
            thresh = np.inf
            sel = np.arange(n)
        else:
            thresh = np.partition(t_lb, K)[K]
            sel = np.flatnonzero(t_lb <= thresh)
        if A.nilpotent or A.is_zero:
            a = np.zeros_like(u[sel]) if A.is_zero else A.apply(w[sel])
            roots = _nilpotent_entering_roots(d0[sel], u[sel], a, R, window, skip_tol)
        else:
            roots = _generic_entering_roots(q[sel], w[sel], A, Q, V, R, window, skip_tol)
        best = float(np.min(roots, initial=np.inf))
        if best <= thresh or thresh >= window or K >= n:
            if not math.isfinite(best):
                return np.inf, []
            hits = sel[np.flatnonzero(roots <= best + skip_tol)]
            return best, sorted(int(i) for i in hits)
        K *= 8


def next_collision_time(q0, w, A, Q0, V, R, t_max, t0=0.0):
    """Earliest contact time in (t0, t_max] of one atom with the ballistic
    particle segment Q(t) = Q0 + t V; None when there is no collision."""
    if t_max <= t0:
        raise ValueError("t_max must exceed t0")
    q0 = np.asarray(q0, dtype=float)[None, :]
    w = np.asarray(w, dtype=float)[None, :]
    Q0 = np.asarray(Q0, dtype=float)
    V = np.asarray(V, dtype=float)
    best, _ = _earliest_collision(q0, w, A, Q0, V, R, t_max, skip_tol=max(t0, 1e-300))
    return None if not math.isfinite(best) else float(best)


def _fast_next_event(t, t_end, q, w, t_ref, t_safe, A, Q, V, R, horizon, v_particle_max, skip_tol=1e-12):
    """Earliest collision in (t, t_end] using persistent per-atom bounds.

    t_safe[i] is an absolute time before which atom i provably cannot touch
    the particle: it was set from the atom's distance divided by a closing
    speed bound valid for the rest of the run (atom velocity is linear in
    time for nilpotent flows, the particle speed stays below the region
    bound). Only atoms whose bound falls inside the current segment are
    advanced and examined; the exact quartic solve runs on an expanding
    smallest-bound batch until the best root beats every untouched bound.
    Atom positions in q are updated lazily (valid at t_ref[i]).
    """
    cand = np.flatnonzero(t_safe <= t_end)
    if cand.size == 0:
        return np.inf, []
    solved = np.zeros(cand.size, dtype=bool)
    all_sel = []
    all_roots = []
    best = np.inf
    K = 48
    window = t_end - t
    while True:
        exhausted = K >= cand.size
        thresh = np.inf if exhausted else float(np.partition(t_safe[cand], K)[K])
        sel_mask = (t_safe[cand] <= thresh) & ~solved
        sel = cand[sel_mask]
        if sel.size:
            dts = t - t_ref[sel]
            qs = q[sel]
            ws = w[sel]
            if A.is_zero:
                a_s = np.zeros_like(ws)
                v0s = ws.copy()
            else:
                a_s = ws @ A.entries.T
                v0s = ws + qs @ A.entries.T
            qs = qs + dts[:, None] * v0s + (0.5 * dts * dts)[:, None] * a_s
            v0s = v0s + dts[:, None] * a_s
            q[sel] = qs
            t_ref[sel] = t
            d0 = qs - Q
            dist = np.linalg.norm(d0, axis=1)
            vmax = (
                np.linalg.norm(v0s, axis=1)
                + (horizon - t) * np.linalg.norm(a_s, axis=1)
                + v_particle_max
            )
            t_lb = np.maximum(dist - R, 0.0) / np.maximum(vmax, 1e-300)
            t_safe[sel] = t + t_lb
            solved[sel_mask] = True
            # solve in bound order; stop once no remaining row can beat best
            order = np.argsort(t_lb)
            for lo in range(0, len(order), 24):
                chunk = order[lo : lo + 24]
                if t + t_lb[chunk[0]] > min(best + skip_tol, t_end):
                    break
                roots = _nilpotent_entering_roots(
                    d0[chunk], v0s[chunk] - V, a_s[chunk], R, window, skip_tol
                )
                all_sel.append(sel[chunk])
                all_roots.append(roots)
                best = min(best, t + float(np.min(roots, initial=np.inf)))
        if best <= thresh or exhausted:
            break
        K *= 8
    if not math.isfinite(best):
        return np.inf, []
    sel_cat = np.concatenate(all_sel)
    root_cat = np.concatenate(all_roots)
    hits = sel_cat[t + root_cat <= best + skip_tol]
    return best, sorted(int(i) for i in hits)


def _advance_atoms(q, w, A, dt):
    if A.is_zero:
        return q + dt * w
    if A.nilpotent:
        return q + dt * (w + A.apply(q)) + (0.5 * dt * dt) * A.apply(w)
    E, J = flow_propagator(A.entries, dt)
    return q @ E.T + w @ J.T


def _kinetic_energy(M, V, m, q, w, A):
    v = w if A.is_zero else w + A.apply(q)
    return 0.5 * M * float(V @ V) + 0.5 * m * float(np.sum(v * v))


def run_mechanical(cfg, state, rng, flight_check=False):
    """One mechanical run: event-driven elastic collisions until min(T, tau_m).

    The particle flies ballistically between events; atoms follow the flow
    with constant relative velocity. Each event applies the elastic rule,
    refreshes the colliding atom's relative velocity, classifies fast/slow by
    the pre-collision relative normal speed against c_m, and re-solves
    candidate collision times against the new particle segment. Near-equal
    collision times (within 1e-12) are processed in atom-id order with a
    logged warning. Raises EnergyBoundError if kinetic energy beats the
    flow-work bound and RecollisionError if a fast partner collides twice.

    For nilpotent flows, atom positions are advanced lazily and the bath
    kinetic energy is tracked as an exact polynomial in time, so the cost
    per event scans the atom bounds once and touches only nearby atoms.
    flight_check enables the tunneling diagnostic (minimum particle-atom
    clearance at interior points of every flight segment) and forces the
    simple full-refresh path.
    """
    Q = state.Q.astype(float).copy()
    V = state.V.astype(float).copy()
    M, R = state.M, state.R
    A = cfg.A
    m = cfg.m
    region = cfg.c_m / 8.0
    if A.norm * np.linalg.norm(Q) + np.linalg.norm(V) >= region:
        raise ValueError("initial state outside ||A|| |Q| + |V| < c_m / 8")
    atoms = sample_bath(cfg, state, rng)
    q, w = atoms.q, atoms.w
    n = len(q)
    poly_energy = A.nilpotent or A.is_zero
    fast_mode = poly_energy and not flight_check
    t_ref = np.zeros(n)
    t_safe = np.zeros(n)
    # Atom velocities are linear in time for nilpotent flows (v = v0 + t A w),
    # so the bath kinetic sum is an exact quadratic S0 + 2 tau S1 + tau^2 S2.
    if A.is_zero:
        v0_all = w
        a_all = np.zeros_like(w)
    else:
        v0_all = w + q @ A.entries.T
        a_all = w @ A.entries.T
    S0 = float(np.sum(v0_all * v0_all))
    S1 = float(np.sum(v0_all * a_all))
    S2 = float(np.sum(a_all * a_all))
    K0 = 0.5 * M * float(V @ V) + 0.5 * m * S0 if poly_energy else _kinetic_energy(M, V, m, q, w, A)
    del v0_all, a_all
    t = 0.0
    tau_m = cfg.T
    stopped = False
    events = []
    times = [0.0]
    rows = [np.concatenate([Q, V])]
    jumps = [False]
    min_clear = math.inf

    def do_flight_check(dt):
        nonlocal min_clear
        for frac in np.linspace(0.0, 1.0, 12)[1:-1]:
            tt = frac * dt
            qt = _advance_atoms(q, w, A, tt)
            gap = np.linalg.norm(qt - (Q + tt * V), axis=1).min(initial=math.inf)
            min_clear = min(min_clear, gap - R)

    while t < cfg.T:
        remaining = cfg.T - t
        d_exit = region_exit_time(A.norm, Q, V, region)
        t_end = t + min(remaining, d_exit)
        if fast_mode:
            hit_abs, hit_ids = _fast_next_event(
                t, t_end, q, w, t_ref, t_safe, A, Q, V, R, cfg.T, region
            )
            hit_rel = hit_abs - t
        else:
            hit_rel, hit_ids = _earliest_collision(q, w, A, Q, V, R, t_end - t)
        dt = min(hit_rel, t_end - t)
        if flight_check and n:
            do_flight_check(dt)
        if not fast_mode:
            q = _advance_atoms(q, w, A, dt)
            atoms.q = q
        if poly_energy:
            # shift the bath kinetic polynomial to the new reference time
            S0 += 2.0 * dt * S1 + dt * dt * S2
            S1 += dt * S2
        Q = Q + dt * V
        t = t + dt if hit_ids else t_end
        if not hit_ids:
            if d_exit < remaining:
                tau_m = t
                stopped = True
                times.append(t)
                rows.append(np.concatenate([Q, V]))
                jumps.append(False)
            else:
                times.append(cfg.T)
                rows.append(np.concatenate([Q, V]))
                jumps.append(False)
            break
        if len(hit_ids) > 1:
            log.warning(
                "near-simultaneous collisions at t=%.15g for atoms %s; processed in id order",
                t,
                hit_ids,
            )
        if fast_mode:
            # bring the colliding atoms to the event time
            ids = np.array(hit_ids)
            dts = t - t_ref[ids]
            if A.is_zero:
                a_h = np.zeros_like(w[ids])
                v0_h = w[ids]
            else:
                a_h = w[ids] @ A.entries.T
                v0_h = w[ids] + q[ids] @ A.entries.T
            q[ids] = q[ids] + dts[:, None] * v0_h + (0.5 * dts * dts)[:, None] * a_h
            t_ref[ids] = t
            t_safe[ids] = t
        for aid in hit_ids:
            e_vec = Q - q[aid]
            gap = float(np.linalg.norm(e_vec))
            if abs(gap - R) > 1e-9 * R:
                raise RuntimeError("contact separation off by more than 1e-9 R")
            e_n = e_vec / gap
            v_atom = w[aid] + A.apply(q[aid])
            rel_n = float(w[aid] @ e_n)
            fast = rel_n > cfg.c_m
            if atoms.fast_hit[aid]:
                raise RecollisionError(
                    "atom %d collided again after a fast collision" % aid
                )
            v_n = float(v_atom @ e_n)
            V_n = float(V @ e_n)
            V, v_post = elastic_collision(V, v_atom, e_n, M, m)
            a_old = A.apply(w[aid])
            w[aid] = v_post - A.apply(q[aid])
            a_new = A.apply(w[aid])
            if poly_energy:
                S0 += float(v_post @ v_post) - float(v_atom @ v_atom)
                S1 += float(v_post @ a_new) - float(v_atom @ a_old)
                S2 += float(a_new @ a_new) - float(a_old @ a_old)
            atoms.fast_hit[aid] = atoms.fast_hit[aid] or fast
            events.append(
                CollisionEvent(
                    t=t,
                    atom_id=int(aid),
                    e_n=e_n,
                    v_n=v_n,
                    V_n=V_n,
                    fast=bool(fast),
                    v_n_post=float(v_post @ e_n),
                    V_n_post=float(V @ e_n),
                    V_post=V.copy(),
                )
            )
        if poly_energy:
            K = 0.5 * M * float(V @ V) + 0.5 * m * S0
        else:
            K = _kinetic_energy(M, V, m, q, w, A)
        if K > K0 * math.exp(2.0 * A.norm * t) * (1.0 + 1e-9):
            raise EnergyBoundError(
                "kinetic energy %.15g exceeds bound %.15g at t=%.6g"
                % (K, K0 * math.exp(2.0 * A.norm * t), t)
            )
        times.append(t)
        rows.append(np.concatenate([Q, V]))
        jumps.append(True)
        if A.norm * np.linalg.norm(Q) + np.linalg.norm(V) >= region:
            tau_m = t
            stopped = True
            break
    if fast_mode and n:
        # bring all atoms to the final time for the returned container
        dts = t - t_ref
        if A.is_zero:
            q += dts[:, None] * w
        else:
            v0_all = w + q @ A.entries.T
            q += dts[:, None] * v0_all + (0.5 * dts * dts)[:, None] * (w @ A.entries.T)
    atoms.q, atoms.w = q, w
    return MechRun(
        trajectory=CadlagTrajectory(np.array(times), np.array(rows), np.array(jumps)),
        events=events,
        tau_m=tau_m,
        stopped=stopped,
        n_atoms=n,
        escape_bound=atoms.escape_bound,
        atoms=atoms,
        min_clearance=min_clear if flight_check else math.nan,
    )


def slow_collision_share(events):
    """Fraction of total momentum transfer carried by slow collisions."""
    if not events:
        raise ValueError("empty event log")
    total = 0.0
    slow = 0.0
    for ev in events:
        transfer = ev.v_n - ev.V_n
        total += transfer
        if not ev.fast:
            slow += transfer
    return slow / total
