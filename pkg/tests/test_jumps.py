"""Tests for the jump process: rate density, intensity, sampling, path runs.

The statistical oracles here are built independently of the module under
test: tail moments of the 1D gaussian marginal by quadrature, a moment ODE
integrated with solve_ivp, and closed-form tail quantiles for the accepted
relative-speed distribution.
"""

import math

import numpy as np
import pytest
from scipy.integrate import dblquad, quad, solve_ivp
from scipy.stats import chisquare

from shearbath.flows import StrainRate, VelocityLaw, sphere_area
from shearbath.langevin import coefficients_from_bath
from shearbath.jumps import (
    JumpEvent,
    JumpLaw,
    RegionExit,
    jump_intensity,
    jump_rate_density,
    min_jump_size,
    run_markov,
    run_markov_ensemble,
    sample_jump,
)
from shearbath.jumps import _draw_jump_batch


def make_law(m, beta=1.0, lam=0.5, s=0.0, d=2, M=1.0, R=1.0):
    return JumpLaw(
        lam=lam, m=m, law=VelocityLaw(beta=beta, dim=d), A=StrainRate.shear(s, dim=d), M=M, R=R
    )


def gaussian_tail_moments(beta, m, jmax=3):
    """I_j = integral of u^j f1(u) du over [m^{3/10}, inf), by quadrature."""
    a0 = m ** 0.3
    out = []
    for j in range(jmax + 1):
        val, _ = quad(
            lambda u, j=j: u ** j
            * math.sqrt(beta / (2.0 * math.pi))
            * math.exp(-0.5 * beta * u * u),
            a0,
            a0 + 45.0 / math.sqrt(beta),
            epsabs=1e-15,
            epsrel=1e-12,
            limit=200,
        )
        out.append(val)
    return out


def finite_m_drift_diffusion(jl):
    """Exact drift matrix and leading diffusion matrix of the jump process.

    Moments of the rate density over (V_hat, e_n) reduce to gaussian tail
    moments times sphere averages of powers of the normal background; the
    drift is exactly -Gam (V - A Q) inside the constant-intensity region.
    """
    I0, I1, I2, I3 = gaussian_tail_moments(jl.law.beta, jl.m)
    d = jl.dim
    S = sphere_area(d)
    Asym = jl.A.entries + jl.A.entries.T
    Mm = jl.M + jl.m
    pref = 4.0 * jl.lam * jl.R ** (d - 1) * S
    root_m = math.sqrt(jl.m)
    Gam = (pref * I1 / (d * Mm)) * np.eye(d) - (
        pref * jl.R * root_m * I0 / (Mm * d * (d + 2))
    ) * Asym
    Sm = (pref * I3 / (d * Mm ** 2)) * np.eye(d) - (
        3.0 * pref * jl.R * root_m * I2 / (Mm ** 2 * d * (d + 2))
    ) * Asym
    return Gam, Sm


def jump_moment_oracle(jl, mean0, T):
    """Mean and covariance of (Q, V) at time T from the moment ODE."""
    Gam, Sm = finite_m_drift_diffusion(jl)
    d = jl.dim
    B = np.zeros((2 * d, 2 * d))
    B[:d, d:] = np.eye(d)
    B[d:, :d] = Gam @ jl.A.entries
    B[d:, d:] = -Gam
    Sfull = np.zeros((2 * d, 2 * d))
    Sfull[d:, d:] = Sm

    def rhs(t, y):
        mvec = y[: 2 * d]
        C = y[2 * d :].reshape(2 * d, 2 * d)
        return np.concatenate([B @ mvec, (B @ C + C @ B.T + Sfull).ravel()])

    y0 = np.concatenate([np.asarray(mean0, dtype=float), np.zeros(4 * d * d)])
    sol = solve_ivp(rhs, (0.0, T), y0, method="DOP853", rtol=1e-10, atol=1e-13)
    yT = sol.y[:, -1]
    return yT[: 2 * d], yT[2 * d :].reshape(2 * d, 2 * d)


def accepted_speed_quantile(jl, p):
    """Inverse CDF of the accepted relative speed x: tail e^{-beta m (x^2-c^2)/2} times x."""
    a = 0.5 * jl.law.beta * jl.m
    return math.sqrt(jl.c_m ** 2 - math.log(1.0 - p) / a)


class TestJumpLaw:
    def test_derived_quantities(self):
        jl = make_law(1e-2, beta=2.0, lam=0.7, M=1.5, R=2.0)
        assert jl.c_m == pytest.approx(1e-2 ** -0.2)
        assert jl.lambda_m == pytest.approx(0.7 / math.sqrt(1e-2))
        assert jl.C_m == pytest.approx(0.7 * 2.0 * ((1.5 + 1e-2) / 2) ** 2)
        assert jl.region_bound == pytest.approx(jl.c_m / 8.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            make_law(-1e-2)
        with pytest.raises(ValueError):
            JumpLaw(lam=-0.1, m=1e-2, law=VelocityLaw(beta=1.0, dim=2), A=StrainRate.zero(2))
        with pytest.raises(ValueError):
            JumpLaw(
                lam=0.5, m=1e-2, law=VelocityLaw(beta=1.0, dim=3), A=StrainRate.zero(2)
            )
        # Background flow speed at the particle surface above the threshold margin.
        with pytest.raises(ValueError):
            make_law(1e-2, s=2.0)

    def test_lambda_zero_allowed(self):
        jl = make_law(1e-2, lam=0.0)
        assert jump_intensity(jl, np.zeros(2), np.zeros(2)) == 0.0

    def test_in_region(self):
        jl = make_law(1e-2, s=0.2)
        assert jl.in_region(np.zeros(2), np.zeros(2))
        assert not jl.in_region(np.zeros(2), np.array([jl.region_bound * 1.01, 0.0]))


class TestRateDensity:
    def test_below_minimum_size_is_zero(self):
        jl = make_law(1e-2)
        e = np.array([1.0, 0.0])
        vm = min_jump_size(jl, np.zeros(2), np.zeros(2), e)
        assert jump_rate_density(jl, 0.5 * vm, e, np.zeros(2), np.zeros(2)) == 0.0
        assert jump_rate_density(jl, -0.1, e, np.zeros(2), np.zeros(2)) == 0.0
        assert jump_rate_density(jl, 1.0001 * vm, e, np.zeros(2), np.zeros(2)) > 0.0

    def test_minimum_size_at_rest(self):
        jl = make_law(1e-2, M=1.3)
        e = np.array([0.0, 1.0])
        expect = 2.0 * jl.m * jl.c_m / (jl.M + jl.m)
        assert min_jump_size(jl, np.zeros(2), np.zeros(2), e) == pytest.approx(expect, rel=1e-14)

    def test_gaussian_density_formula(self):
        # At rest the density at V_hat = 2 m x0 / (M+m) has an explicit value;
        # the scaled marginal inside it is cross-checked by numerically
        # marginalizing the full velocity density over the orthogonal components.
        m, beta, lam, R, M, d = 0.01, 2.0, 0.7, 1.5, 1.0, 3
        jl = JumpLaw(lam=lam, m=m, law=VelocityLaw(beta=beta, dim=d), A=StrainRate.zero(d), M=M, R=R)
        x0 = 1.2 * jl.c_m
        V_hat = 2.0 * m * x0 / (M + m)
        kappa = (M + m) / (2.0 * m)
        f1 = math.sqrt(beta / (2.0 * math.pi)) * math.exp(-0.5 * beta * m * x0 ** 2)
        expect = (lam / math.sqrt(m)) * R ** (d - 1) * kappa ** 2 * V_hat * math.sqrt(m) * f1
        got = jump_rate_density(jl, V_hat, np.array([1.0, 0.0, 0.0]), np.zeros(d), np.zeros(d))
        assert got == pytest.approx(expect, rel=1e-12)

        # Marginalization oracle for f1 at u = sqrt(m) x0.
        u = math.sqrt(m) * x0
        lim = 40.0 / math.sqrt(beta)
        f1_num, _ = dblquad(
            lambda z, y: (beta / (2.0 * math.pi)) ** 1.5
            * math.exp(-0.5 * beta * (u * u + y * y + z * z)),
            -lim,
            lim,
            -lim,
            lim,
            epsabs=1e-13,
            epsrel=1e-10,
        )
        assert f1 == pytest.approx(f1_num, rel=1e-8)

    def test_non_unit_direction_rejected(self):
        jl = make_law(1e-2)
        with pytest.raises(ValueError):
            jump_rate_density(jl, 0.5, np.array([1.0, 1.0]), np.zeros(2), np.zeros(2))

    def test_integrates_to_direction_intensity(self):
        # Integrating the density over V_hat must equal the per-direction
        # radial integral used by the quadrature intensity (substitution check).
        from shearbath.jumps import _intensity_direction

        jl = make_law(1e-2, s=0.2, lam=0.3)
        Q = np.array([0.4, 0.3])
        V = np.array([0.1, -0.1])
        e = np.array([math.cos(0.7), math.sin(0.7)])
        upper = (jl.c_m + 60.0 / math.sqrt(jl.law.beta * jl.m)) / ((jl.M + jl.m) / (2 * jl.m))
        val, _ = quad(
            lambda vh: jump_rate_density(jl, vh, e, Q, V),
            0.0,
            upper,
            epsabs=1e-13,
            epsrel=1e-10,
            limit=400,
        )
        assert val == pytest.approx(_intensity_direction(jl, Q, V, e), rel=1e-8)


class TestIntensity:
    def test_constant_inside_region(self):
        jl = make_law(1e-2, s=0.2, lam=0.3)
        states = [
            (np.zeros(2), np.zeros(2)),
            (np.array([0.4, 0.3]), np.array([0.1, -0.1])),
        ]
        vals = [jump_intensity(jl, Q, V, method="quadrature") for Q, V in states]
        assert vals[0] == pytest.approx(vals[1], rel=1e-10)

    def test_closed_form_vs_quadrature(self):
        jl = make_law(1e-2, s=0.2, lam=0.3)
        closed = jump_intensity(jl, np.zeros(2), np.zeros(2))
        quadr = jump_intensity(jl, np.zeros(2), np.zeros(2), method="quadrature")
        assert quadr == pytest.approx(closed, rel=1e-8)

    def test_closed_form_vs_quadrature_3d(self):
        jl = make_law(2e-2, beta=0.8, lam=0.4, s=0.1, d=3)
        Q = np.array([0.2, -0.1, 0.15])
        V = np.array([0.05, 0.1, -0.05])
        closed = jump_intensity(jl, Q, V)
        quadr = jump_intensity(jl, Q, V, method="quadrature")
        assert quadr == pytest.approx(closed, rel=1e-6)

    def test_closed_form_value(self):
        jl = make_law(1e-2, beta=2.0, lam=0.3, R=1.5, d=3)
        expect = (
            0.3
            * 1.5 ** 2
            * sphere_area(3)
            * math.exp(-0.5 * 2.0 * 1e-2 * jl.c_m ** 2)
            / (1e-2 * math.sqrt(2.0 * math.pi * 2.0))
        )
        assert jump_intensity(jl, np.zeros(3), np.zeros(3)) == pytest.approx(expect, rel=1e-12)

    def test_linear_in_lambda(self):
        a = jump_intensity(make_law(1e-2, lam=0.3), np.zeros(2), np.zeros(2))
        b = jump_intensity(make_law(1e-2, lam=0.6), np.zeros(2), np.zeros(2))
        assert b == pytest.approx(2.0 * a, rel=1e-14)

    def test_outside_region_raises(self):
        jl = make_law(1e-2)
        V = np.array([jl.region_bound * 1.5, 0.0])
        with pytest.raises(RegionExit):
            jump_intensity(jl, np.zeros(2), V)

    def test_monte_carlo_integral_matches(self):
        # Uniform (e_n, V_hat) proposal Monte-Carlo of the rate density.
        jl = make_law(1e-2, s=0.2, lam=0.3)
        Q = np.array([0.4, 0.3])
        V = np.array([0.1, -0.1])
        rng = np.random.default_rng(2026)
        n = 400_000
        kappa = (jl.M + jl.m) / (2.0 * jl.m)
        vmax = (jl.c_m + 9.0 / math.sqrt(jl.law.beta * jl.m)) / kappa
        th = rng.uniform(0.0, 2.0 * math.pi, size=n)
        e = np.column_stack([np.cos(th), np.sin(th)])
        vh = rng.uniform(0.0, vmax, size=n)
        x = kappa * vh + e @ V - np.sum(((Q[None, :] - jl.R * e) @ jl.A.entries.T) * e, axis=1)
        dens = np.where(
            x >= jl.c_m,
            jl.lambda_m * jl.R * kappa ** 2 * vh * np.ravel(jl.marginal1_scaled(x)),
            0.0,
        )
        vals = 2.0 * math.pi * vmax * dens
        est = vals.mean()
        se = vals.std(ddof=1) / math.sqrt(n)
        assert abs(est - jump_intensity(jl, Q, V)) <= 3.0 * se


class TestSampleJump:
    def test_event_fields(self):
        jl = make_law(1e-2, s=0.1, lam=0.5)
        rng = np.random.default_rng(7)
        ev = sample_jump(jl, np.array([0.1, 0.0]), np.array([0.05, -0.02]), rng)
        assert isinstance(ev, JumpEvent)
        assert ev.t > 0.0
        assert abs(np.linalg.norm(ev.e_n) - 1.0) < 1e-12

    def test_magnitude_at_least_minimum(self):
        jl = make_law(1e-2, s=0.1, lam=0.5)
        rng = np.random.default_rng(11)
        Q0 = np.array([0.1, 0.0])
        V0 = np.array([0.05, -0.02])
        for _ in range(400):
            ev = sample_jump(jl, Q0, V0, rng)
            Qj = Q0 + ev.t * V0
            assert ev.V_hat >= min_jump_size(jl, Qj, V0, ev.e_n) - 1e-12
            assert ev.V_hat > 0.0

    def test_lambda_zero_raises(self):
        jl = make_law(1e-2, lam=0.0)
        with pytest.raises(ValueError):
            sample_jump(jl, np.zeros(2), np.zeros(2), np.random.default_rng(0))

    def test_direction_uniform_at_rest(self):
        # V = 0, A = 0: isotropy. Rayleigh test on the angles.
        jl = make_law(1e-2, lam=0.5)
        rng = np.random.default_rng(21)
        n = 4000
        Q = np.zeros((n, 2))
        V = np.zeros((n, 2))
        e, _ = _draw_jump_batch(jl, Q, V, rng)
        z = n * (e.mean(axis=0) ** 2).sum()
        p = math.exp(-z) * (1.0 + (2.0 * z - z * z) / (4.0 * n))
        assert p > 0.01

    def test_accepted_speed_distribution(self):
        # The relative-speed marginal of accepted draws is the tilted tail
        # density for any in-region state: the direction average of the
        # background is exactly zero for traceless flow. Chi-square against
        # equal-probability bins from the closed-form quantile.
        jl = make_law(1e-2, s=0.3, lam=0.5)
        Q0 = np.array([0.2, 0.0])
        V0 = np.array([0.25, 0.0])
        assert jl.in_region(Q0, V0)
        rng = np.random.default_rng(42)
        n = 100_000
        Q = np.tile(Q0, (n, 1))
        V = np.tile(V0, (n, 1))
        e, V_hat = _draw_jump_batch(jl, Q, V, rng)
        kappa = (jl.M + jl.m) / (2.0 * jl.m)
        b = e @ V0 - np.sum(((Q - jl.R * e) @ jl.A.entries.T) * e, axis=1)
        x = kappa * V_hat + b
        nbins = 20
        edges = [accepted_speed_quantile(jl, p) for p in np.linspace(0.0, 1.0, nbins + 1)[:-1]]
        edges.append(np.inf)
        counts, _ = np.histogram(x, bins=edges)
        stat, p = chisquare(counts)
        assert p > 0.01

    def test_direction_speed_coupling(self):
        # E[e_n] = -(J0 / (d J1)) (V - A Q) with J_j the tail moments of the
        # scaled marginal over [c_m, inf): the linear tilt of the direction
        # marginal. Checked against quadrature.
        jl = make_law(1e-2, s=0.3, lam=0.5)
        Q0 = np.array([0.2, 0.0])
        V0 = np.array([0.25, 0.0])
        rng = np.random.default_rng(33)
        n = 200_000
        e, _ = _draw_jump_batch(jl, np.tile(Q0, (n, 1)), np.tile(V0, (n, 1)), rng)
        J0, _ = quad(
            lambda x: np.ravel(jl.marginal1_scaled(x))[0], jl.c_m, jl.c_m + 700.0, limit=400
        )
        J1, _ = quad(
            lambda x: x * np.ravel(jl.marginal1_scaled(x))[0], jl.c_m, jl.c_m + 700.0, limit=400
        )
        Vp = V0 - jl.A.apply(Q0)
        expect = -(J0 / (2.0 * J1)) * Vp
        se = e.std(axis=0, ddof=1) / math.sqrt(n)
        assert np.all(np.abs(e.mean(axis=0) - expect) <= 4.0 * se)

    def test_mean_magnitude_mass_scaling(self):
        # E[V_hat] at rest has closed form kappa^{-1} (c + erfc-tail); the
        # ratio between m = 1e-2 and 1e-4 is near sqrt(100) = 10.
        rng = np.random.default_rng(5)
        means = {}
        for m in (1e-2, 1e-4):
            jl = make_law(m, lam=0.5)
            n = 200_000
            _, V_hat = _draw_jump_batch(jl, np.zeros((n, 2)), np.zeros((n, 2)), rng)
            a = 0.5 * jl.law.beta * jl.m
            c = jl.c_m
            ex = c + math.sqrt(math.pi / a) * math.erfc(c * math.sqrt(a)) * math.exp(a * c * c) / 2.0
            expect = 2.0 * jl.m / (jl.M + jl.m) * ex
            se = V_hat.std(ddof=1) / math.sqrt(n)
            assert abs(V_hat.mean() - expect) <= 4.0 * se
            means[m] = V_hat.mean()
        assert means[1e-2] / means[1e-4] == pytest.approx(10.0, rel=0.05)


class TestRunMarkov:
    def test_free_flight_without_jumps(self):
        jl = make_law(1e-2, lam=0.0, s=0.1)
        Q0 = np.array([0.05, -0.02])
        V0 = np.array([0.1, 0.05])
        run = run_markov(jl, Q0, V0, 1.0, np.random.default_rng(0), checkpoints=[0.4])
        assert run.n_jumps == 0
        assert not run.stopped
        tr = run.trajectory
        np.testing.assert_allclose(tr.values[-1][:2], Q0 + 1.0 * V0, rtol=1e-14)
        np.testing.assert_allclose(tr.value_at(0.4)[:2], Q0 + 0.4 * V0, rtol=1e-14)
        np.testing.assert_allclose(tr.value_at(0.4)[2:], V0, rtol=0)

    def test_initial_state_outside_region_raises(self):
        jl = make_law(1e-2)
        with pytest.raises(RegionExit):
            run_markov(jl, np.zeros(2), np.array([1.0, 0.0]), 1.0, np.random.default_rng(0))

    def test_trajectory_structure(self):
        jl = make_law(1e-4, lam=0.012, beta=1.0)
        run = run_markov(jl, np.zeros(2), np.zeros(2), 0.05, np.random.default_rng(3))
        tr = run.trajectory
        assert tr.t0 == 0.0
        assert np.all(np.diff(tr.times) > 0)
        assert int(tr.jump_mask.sum()) == run.n_jumps
        # Velocity is piecewise constant: it only changes across jump rows.
        dv = np.diff(tr.values[:, 2:], axis=0)
        moved = np.any(dv != 0.0, axis=1)
        assert np.all(tr.jump_mask[1:][moved])

    def test_region_exit_stops_and_flags(self):
        jl = make_law(1e-2, lam=1e-12, s=0.5)
        Q0 = np.array([0.1, 0.0])
        V0 = np.array([0.0, 0.25])
        run = run_markov(jl, Q0, V0, 50.0, np.random.default_rng(1))
        assert run.stopped
        assert run.stop_time < 50.0
        Qf, Vf = run.trajectory.values[-1][:2], run.trajectory.values[-1][2:]
        g = jl.A.norm * np.linalg.norm(Qf) + np.linalg.norm(Vf)
        assert g == pytest.approx(jl.region_bound, abs=1e-9)

    def test_jump_count_poisson(self):
        jl = make_law(1e-4, lam=0.012)
        lam_total = jump_intensity(jl, np.zeros(2), np.zeros(2))
        T = 6.0 / lam_total
        rng = np.random.default_rng(17)
        res = run_markov_ensemble(jl, np.zeros(2), np.zeros(2), T, 2000, rng)
        assert not res["stopped"].any()
        counts = res["n_jumps"]
        mean = counts.mean()
        disp = counts.var(ddof=1) / mean
        assert abs(mean - 6.0) <= 3.0 * math.sqrt(6.0 / 2000)
        assert abs(disp - 1.0) <= 3.0 * math.sqrt(2.0 / 2000)

    def test_scalar_and_vector_runs_agree(self):
        # Same process, two implementations: compare terminal moments and
        # jump counts, including paths that hit the region boundary.
        jl = make_law(1e-2, beta=16.0, lam=0.5, s=0.05)
        Q0 = np.array([0.05, 0.02])
        V0 = np.array([0.04, -0.03])
        T = 0.25
        rng = np.random.default_rng(29)
        n_s = 1500
        V_fin = np.empty((n_s, 2))
        stops = 0
        jumps = np.empty(n_s)
        for i in range(n_s):
            run = run_markov(jl, Q0, V0, T, rng)
            V_fin[i] = run.trajectory.values[-1][2:]
            stops += int(run.stopped)
            jumps[i] = run.n_jumps
        res = run_markov_ensemble(jl, Q0, V0, T, 6000, rng)
        V_vec = res["final"][:, 2:]
        for k in range(2):
            se = math.hypot(
                V_fin[:, k].std(ddof=1) / math.sqrt(n_s),
                V_vec[:, k].std(ddof=1) / math.sqrt(len(V_vec)),
            )
            assert abs(V_fin[:, k].mean() - V_vec[:, k].mean()) <= 4.0 * se
        se_j = math.hypot(
            jumps.std(ddof=1) / math.sqrt(n_s),
            res["n_jumps"].std(ddof=1) / math.sqrt(6000),
        )
        assert abs(jumps.mean() - res["n_jumps"].mean()) <= 4.0 * se_j
        # Both must see a comparable share of flagged stops.
        p1 = stops / n_s
        p2 = res["stopped"].mean()
        se_p = math.hypot(
            math.sqrt(max(p1 * (1 - p1), 1e-9) / n_s),
            math.sqrt(max(p2 * (1 - p2), 1e-9) / 6000),
        )
        assert abs(p1 - p2) <= 4.0 * se_p

    def test_checkpoint_recording(self):
        jl = make_law(1e-2, beta=16.0, lam=0.5, s=0.05)
        Q0 = np.array([0.05, 0.02])
        V0 = np.array([0.04, -0.03])
        rng = np.random.default_rng(8)
        res = run_markov_ensemble(jl, Q0, V0, 0.25, 400, rng, checkpoints=[0.1, 0.2])
        ok = ~res["stopped"]
        assert np.all(np.isfinite(res["checkpoint_values"][ok]))
        run = run_markov(jl, Q0, V0, 0.25, rng, checkpoints=[0.1, 0.2])
        if not run.stopped:
            v = run.trajectory.value_at(0.1)
            assert v.shape == (4,)

    def test_moments_match_moment_oracle(self):
        # d = 2, shear s = 0.1, m = 1e-3: terminal mean and covariance over
        # 5000 paths against the moment ODE with the exact finite-m drift.
        jl = make_law(1e-3, beta=128.0, lam=4.0, s=0.1)
        Q0 = np.array([0.3, -0.2])
        V0 = np.array([0.2, 0.1])
        assert jl.in_region(Q0, V0)
        rng = np.random.default_rng(101)
        n = 5000
        res = run_markov_ensemble(jl, Q0, V0, 1.0, n, rng)
        keep = ~res["stopped"]
        assert keep.mean() > 0.99
        samp = res["final"][keep]
        mean_o, cov_o = jump_moment_oracle(jl, np.concatenate([Q0, V0]), 1.0)
        nk = keep.sum()
        mean_s = samp.mean(axis=0)
        cov_s = np.cov(samp.T)
        se_mean = samp.std(axis=0, ddof=1) / math.sqrt(nk)
        assert np.all(np.abs(mean_s - mean_o) <= 3.0 * se_mean)
        se_cov = np.sqrt(
            (np.outer(np.diag(cov_s), np.diag(cov_s)) + cov_s ** 2) / (nk - 1)
        )
        assert np.all(np.abs(cov_s - cov_o) <= 3.0 * se_cov)

    def test_drift_and_diffusion_estimates(self):
        # Generator consistency at m = 1e-4, h = 1e-2: one-step increments
        # from a fixed state reproduce the drift -(gamma/M)(V - A Q) and the
        # diffusion (sigma/M)^2 I of the limiting background dynamics.
        m = 1e-4
        lam, beta, R, M = 0.5, 4.0, 1.0, 1.0
        law = VelocityLaw(beta=beta, dim=2)
        jl = JumpLaw(lam=lam, m=m, law=law, A=StrainRate.zero(2), M=M, R=R)
        coeffs = coefficients_from_bath(lam, law, R=R, M=M, A=StrainRate.zero(2))
        V0 = np.array([0.3, -0.2])
        h = 1e-2
        n = 20_000
        rng = np.random.default_rng(55)
        res = run_markov_ensemble(jl, np.zeros(2), V0, h, n, rng)
        assert not res["stopped"].any()
        dV = res["final"][:, 2:] - V0
        drift_est = dV.mean(axis=0) / h
        drift_ref = -(coeffs.gamma / M) * V0
        se = dV.std(axis=0, ddof=1) / math.sqrt(n) / h
        assert np.all(np.abs(drift_est - drift_ref) <= 3.0 * se)
        cov_est = np.cov(dV.T) / h
        diff_ref = (coeffs.sigma / M) ** 2
        se_cov = diff_ref * math.sqrt(2.0 / n) + 2.0 * coeffs.gamma * h * diff_ref
        assert np.all(np.abs(cov_est - diff_ref * np.eye(2)) <= 3.0 * se_cov)
