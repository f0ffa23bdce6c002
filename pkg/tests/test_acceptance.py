"""Acceptance gate: one test per release criterion, in order.

Each test prints a single line with the measured quantity and its tolerance,
then asserts it. Criterion 11's full-scale viscosity sweep runs for hours
and is gated behind the SHEARBATH_LONG_TESTS environment variable; its
always-on desk surrogate runs here.
"""

import math
import os
import time

import numpy as np
import pytest

from shearbath import analysis, heatbath, jumps, langevin, md
from shearbath.cli import main as cli_main
from shearbath.flows import StrainRate, VelocityLaw, random_unit_vectors

LONG_TESTS = os.environ.get("SHEARBATH_LONG_TESTS", "") not in ("", "0")

# shared desk-scale Rayleigh bath: d = 2, shear 0.1, gaussian atoms at
# beta = 32, density 1/2, unit radii and tracer mass
BETA = 32.0
LAW2 = VelocityLaw(BETA, dim=2)
SHEAR2 = StrainRate.shear(0.1, dim=2)
Q0 = np.array([0.0, 0.5])
V0 = np.array([0.15, 0.0])


def _line(num, text):
    print("criterion %02d: %s" % (num, text))


@pytest.fixture(scope="module")
def oracle_moments():
    """V-block mean and covariance of the limiting SDE at t = 1."""
    c = langevin.coefficients_from_bath(0.5, LAW2, 1.0, 1.0, SHEAR2)
    mean, cov = analysis.linear_sde_moments(
        c.gamma, c.sigma, 1.0, SHEAR2, 1.0, np.concatenate([Q0, V0]))
    return mean[2:], cov[2:, 2:]


@pytest.fixture(scope="module")
def desk_run():
    """The criterion 9/10 shear experiment: N=216, T=100, defaults otherwise."""
    cfg = md.MdConfig(N=216, s=0.05, T=100.0, seed=2)
    return cfg, md.run_shear_experiment(cfg, record_every=10)


def test_criterion_01_fdr_identity():
    worst = 0.0
    for beta in (0.5, 1.0, 4.0):
        law = VelocityLaw(beta, dim=3)
        c = langevin.coefficients_from_bath(0.25, law, 1.0, 1.0, StrainRate.zero(3))
        worst = max(worst, langevin.fdr_check(c, beta))
    _line(1, "FDR residual max %.3g (tol 1e-10) -> %s"
          % (worst, "PASS" if worst <= 1e-10 else "FAIL"))
    assert worst <= 1e-10


def test_criterion_02_coefficients_match_quadrature():
    worst = 0.0
    for d in (2, 3):
        for beta in (1.0, 32.0):
            law = VelocityLaw(beta, dim=d)
            a = langevin.coefficients_from_bath(0.5, law, 1.2, 1.0,
                                                StrainRate.zero(d))
            b = langevin.coefficients_from_bath(0.5, law, 1.2, 1.0,
                                                StrainRate.zero(d),
                                                method="quadrature")
            worst = max(worst, abs(a.gamma - b.gamma) / a.gamma,
                        abs(a.sigma - b.sigma) / a.sigma)
    _line(2, "closed form vs quadrature rel diff %.3g (tol 1e-8) -> %s"
          % (worst, "PASS" if worst <= 1e-8 else "FAIL"))
    assert worst <= 1e-8


def test_criterion_03_laminar_anisotropy():
    target = np.diag([2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])
    worst = 0.0
    for lam, R, beta in ((0.0625, 2.0, 1.0), (0.5, 1.0, 4.0)):
        lc = langevin.laminar_limit_coefficients("single", lam, R, beta)
        ss = lc.sigma_matrix @ lc.sigma_matrix.T
        lhs = 0.5 * beta * np.linalg.inv(lc.gamma_matrix) @ ss
        worst = max(worst, float(np.abs(lhs - target).max()))
    _line(3, "(beta/2) gamma^-1 sigma sigma^T vs diag(2/3,1/3,1/3): "
             "max dev %.3g (tol 1e-12) -> %s"
          % (worst, "PASS" if worst <= 1e-12 else "FAIL"))
    assert worst <= 1e-12


def test_criterion_04_collision_conservation():
    rng = np.random.default_rng(401)
    worst = 0.0
    t0 = time.perf_counter()
    for M, m in ((1.0, 1e-3), (2.0, 1.0), (1.0, 1e-6), (3.0, 0.5)):
        n = 250_000
        V = rng.normal(size=(n, 3))
        v = 5.0 * rng.normal(size=(n, 3))
        e = random_unit_vectors(rng, n, 3)
        # flip normals so every pair is approaching
        flip = np.sum(v * e, axis=1) <= np.sum(V * e, axis=1)
        e[flip] *= -1.0
        V2, v2 = heatbath.elastic_collision(V, v, e, M, m)
        p0 = M * V + m * v
        p2 = M * V2 + m * v2
        e0 = 0.5 * M * np.sum(V * V, 1) + 0.5 * m * np.sum(v * v, 1)
        e2 = 0.5 * M * np.sum(V2 * V2, 1) + 0.5 * m * np.sum(v2 * v2, 1)
        worst = max(worst,
                    float((np.abs(p2 - p0).max(1) / np.linalg.norm(p0, axis=1)).max()),
                    float((np.abs(e2 - e0) / e0).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 5.0
    _line(4, "1e6 elastic collisions: rel conservation error %.3g "
             "(tol 1e-12), %.2f s (limit 5 s) -> %s"
          % (worst, elapsed, "PASS" if ok else "FAIL"))
    assert worst <= 1e-12
    assert elapsed < 5.0


def test_criterion_05_no_recollision_and_energy_bound():
    cfg = heatbath.BathConfig(lam=0.5, m=1e-3, law=LAW2, A=SHEAR2, T=1.0)
    violations = 0
    for k in range(200):
        try:
            heatbath.run_mechanical(cfg, heatbath.MechState(Q=Q0, V=V0),
                                    np.random.default_rng((500, k)))
        except (heatbath.RecollisionError, heatbath.EnergyBoundError):
            violations += 1
    _line(5, "recollision / energy-bound violations %d of 200 runs "
             "(tol 0) -> %s" % (violations, "PASS" if violations == 0 else "FAIL"))
    assert violations == 0


def test_criterion_06_markov_moments_and_convergence(oracle_moments, tmp_path):
    mean_v, cov_v = oracle_moments
    jl = jumps.JumpLaw(lam=0.5, m=1e-4, law=LAW2, A=SHEAR2)
    ens = jumps.run_markov_ensemble(jl, Q0, V0, 1.0, 5000,
                                    np.random.default_rng((601, 3)))
    ok = ~ens["stopped"]
    rep = analysis.moments_from_samples(ens["final"][ok, 2:])
    mean_dev = float(np.max(np.abs(rep.mean - mean_v) / rep.se_mean))
    cov_dev = float(np.max(np.abs(rep.cov - cov_v) / rep.se_cov))

    conf = tmp_path / "conv.ini"
    conf.write_text(
        "[converge]\nmasses = 1e-2, 1e-3, 1e-4\nsimulator = markov\n"
        "n_paths = 20000\nlam = 0.5\nbeta = 32.0\nd = 2\ns = 0.1\nT = 1.0\n"
        "Q0 = 0.0, 0.5\nV0 = 0.15, 0.0\nn_sk = 3\n")
    assert cli_main(["converge", "--config", str(conf),
                     "--out", str(tmp_path), "--seed", "5"]) == 0
    rows = (tmp_path / "converge.csv").read_text().strip().splitlines()[1:]
    errs = [float(r.split(",")[6]) for r in rows]
    monotone = errs[0] > errs[1] > errs[2]
    ok = mean_dev <= 3.0 and cov_dev <= 3.0 and monotone
    _line(6, "markov m=1e-4: mean dev %.2f SE, cov dev %.2f SE (tol 3); "
             "converge errors %s decreasing=%s -> %s"
          % (mean_dev, cov_dev, ["%.4f" % e for e in errs], monotone,
             "PASS" if ok else "FAIL"))
    assert mean_dev <= 3.0
    assert cov_dev <= 3.0
    assert monotone


def test_criterion_07_mechanical_moment_convergence(oracle_moments):
    mean_v, cov_v = oracle_moments
    errs = {}
    for m, n in ((1e-2, 3000), (1e-3, 1200)):
        cfg = heatbath.BathConfig(lam=0.5, m=m, law=LAW2, A=SHEAR2, T=1.0)
        samples = []
        for k in range(n):
            run = heatbath.run_mechanical(
                cfg, heatbath.MechState(Q=Q0, V=V0),
                np.random.default_rng((701, round(1.0 / m), k)))
            if not run.stopped:
                samples.append(run.trajectory.values[-1][2:])
        rep = analysis.moments_from_samples(np.array(samples))
        errs[m] = (float(np.linalg.norm(rep.mean - mean_v))
                   + float(np.linalg.norm(rep.cov - cov_v)))
    ok = errs[1e-3] < errs[1e-2]
    _line(7, "mechanical moment error m=1e-2: %.4f, m=1e-3: %.4f, "
             "decreasing -> %s" % (errs[1e-2], errs[1e-3], "PASS" if ok else "FAIL"))
    assert ok


def test_criterion_08_relative_velocity_stationarity():
    c = langevin.NeldCoefficients(gamma=0.4431134627263791,
                                  sigma=0.16641692047504872,
                                  M=1.0, R=1.0, A=SHEAR2, dim=2)
    t0 = time.perf_counter()
    n_paths = 2000
    out = langevin.run_sde_ensemble(c, langevin.SdeState(np.zeros(2), np.zeros(2)),
                                    0.01, 800, n_paths,
                                    np.random.default_rng(801), stepper="neld_A")
    X = out[800]
    W = X[:, 2:] - X[:, :2] @ SHEAR2.entries.T
    want = 1.0 / (BETA * c.M)
    band = 3.0 * want * math.sqrt(2.0 / n_paths)
    devs = np.abs(W.var(axis=0) - want)
    elapsed = time.perf_counter() - t0
    ok = float(devs.max()) <= band and elapsed < 60.0
    _line(8, "var(V - AQ) dev %.3g (3-SE band %.3g), %.1f s (limit 60 s) -> %s"
          % (devs.max(), band, elapsed, "PASS" if ok else "FAIL"))
    assert float(devs.max()) <= band
    assert elapsed < 60.0


def test_criterion_09_md_shear_profile(desk_run):
    cfg, run = desk_run
    filled = run.slices.counts > 0
    centers = run.slices.centers[filled]
    mean = run.slices.mean_profile()[filled]
    slope = np.polyfit(centers, mean[:, 0], 1)[0]
    slope_err = abs(slope - cfg.s) / cfg.s

    weights = run.slices.counts[filled].astype(float)
    varp = run.slices.variance_profile()[filled]
    pooled = weights @ varp / weights.sum()
    var_err = float(np.max(np.abs(pooled - 1.0 / cfg.beta) * cfg.beta))
    ok = slope_err <= 0.10 and var_err <= 0.05
    _line(9, "velocity slope err %.1f%% (tol 10%%), variance dev %.1f%% "
             "(tol 5%%) -> %s"
          % (100 * slope_err, 100 * var_err, "PASS" if ok else "FAIL"))
    assert slope_err <= 0.10
    assert var_err <= 0.05


def test_criterion_10_dist_decay_slope(desk_run):
    cfg, run = desk_run
    slope, _ = analysis.loglog_slope(run.dist_times, run.dist_values,
                                     window=(10.0, cfg.T))
    ok = abs(slope + 0.5) <= 0.15
    _line(10, "dist(t) log-log slope %.3f (want -0.5 +- 0.15) -> %s"
          % (slope, "PASS" if ok else "FAIL"))
    assert ok


def _surrogate_eta(gamma):
    svals, sigs = [], []
    for s in (0.0, 0.04, 0.08):
        for rep in range(3):
            cfg = md.MdConfig(N=216, s=s, gamma=gamma, T=100.0)
            rng = np.random.default_rng((int(gamma * 10), int(s * 100), rep))
            run = md.run_shear_experiment(cfg, rng, record_every=20)
            svals.append(s)
            sigs.append(run.stress.sigma12)
    return md.estimate_viscosity(svals, sigs)


def test_criterion_11_viscosity_desk_surrogate():
    eta_low, se_low = _surrogate_eta(0.1)
    eta_high, se_high = _surrogate_eta(10.0)
    gap = eta_high - eta_low
    band = 2.0 * math.sqrt(se_low ** 2 + se_high ** 2)
    in_range = 0.9 <= eta_low <= 1.6
    separated = gap > band
    _line(11, "desk surrogate eta(0.1) = %.3f +- %.3f (want [0.9, 1.6]), "
              "eta(10) - eta(0.1) = %.3f vs 2-SE %.3f -> %s"
          % (eta_low, se_low, gap, band,
             "PASS" if in_range and separated else "FAIL"))
    assert in_range
    assert separated


@pytest.mark.skipif(not LONG_TESTS,
                    reason="full-scale viscosity sweep runs for hours; "
                           "set SHEARBATH_LONG_TESTS=1 to enable")
def test_criterion_11_viscosity_full_scale():
    for gamma, target, tol in ((0.1, 1.2175, 0.05), (10.0, 1.9518, 0.15)):
        svals, sigs = [], []
        for s in np.arange(0.0, 0.0701, 0.01):
            for rep in range(10):
                cfg = md.MdConfig(N=1000, s=float(s), gamma=gamma, T=500.0)
                rng = np.random.default_rng(
                    (1100, int(gamma * 10), int(round(s * 100)), rep))
                run = md.run_shear_experiment(cfg, rng, record_every=100)
                svals.append(float(s))
                sigs.append(run.stress.sigma12)
        eta, se = md.estimate_viscosity(svals, sigs)
        ok = abs(eta - target) <= tol + 3.0 * se
        _line(11, "full scale gamma=%g: eta %.4f +- %.4f vs %.4f "
                  "(tol %.2f + 3 SE) -> %s"
              % (gamma, eta, se, target, tol, "PASS" if ok else "FAIL"))
        assert ok


def test_criterion_12_min_image_matches_brute_force():
    L = 5.0
    rng = np.random.default_rng(1201)
    worst = 0.0
    for _ in range(10_000):
        dQ = rng.uniform(-L, L, 3)
        offset = rng.uniform(0.0, L)
        got = md.lees_edwards_min_image(dQ, L, offset)
        off = offset - L * np.round(offset / L)
        best, cost = None, np.inf
        for mm in (-1, 0, 1):
            for nn in (-1, 0, 1):
                for kk in (-1, 0, 1):
                    c = dQ - np.array([mm * L + nn * off, nn * L, kk * L])
                    v = c @ c
                    if v < cost:
                        cost, best = v, c
        worst = max(worst, float(np.abs(got - best).max()))
    ok = worst <= 1e-12
    _line(12, "min image vs 27-image brute force: max dev %.3g over 1e4 "
              "cases (tol 1e-12) -> %s" % (worst, "PASS" if ok else "FAIL"))
    assert ok
