"""Batch front end: config parsing, seeded runs, CSV emission.

Subcommands mirror the library layers. ``coeffs`` prints the limiting
Langevin coefficients with a fluctuation-dissipation residual, ``sde-run``,
``bath-run`` and ``markov-run`` write single-path trajectory CSVs (the bath
run also writes its collision event log), ``md-run`` writes the slice,
stress and distance tables of one sheared Lennard-Jones run, and
``converge`` sweeps an atom-mass grid comparing simulated moments against
the linear-SDE oracle.

Configuration is a flat sectioned key-value file, one section per
subcommand. Unknown keys, missing keys and ill-typed values exit with
code 2 and a message naming the key; numeric blowups exit with code 3.
One root seed expands into named per-component streams so each subsystem
(bath sampling, jump draws, thermostat noise) can be re-run in isolation.
Identical (config, seed) reruns produce byte-identical CSV files.
"""

import argparse
import configparser
import csv
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, heatbath, jumps, langevin, md
from .flows import StrainRate, VelocityLaw

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BLOWUP = 3

# named stream ids of the splittable seeding scheme: the root seed plus a
# stream id (plus replica / grid / path counters) feeds one SeedSequence
STREAMS = {
    "init": 0,
    "bath": 1,
    "collisions": 2,
    "thermostat": 3,
    "sde": 4,
    "markov": 5,
}


def stream_rng(seed, name, *ids):
    """Generator for one named component stream under the root seed."""
    entropy = (int(seed), STREAMS[name]) + tuple(int(i) for i in ids)
    return np.random.default_rng(entropy)


class ConfigError(ValueError):
    """A config file problem: the message names the offending key."""


REQUIRED = object()


def _bool(text):
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError("expected a boolean, got %r" % text)


def _floats(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    return [float(p) for p in parts]


def _choice(*allowed):
    def convert(text):
        t = text.strip()
        if t not in allowed:
            raise ValueError("expected one of %s, got %r" % (", ".join(allowed), t))
        return t

    return convert


_COMMON = {
    "seed": (int, 0),
    "out": (str, "."),
}

SCHEMAS = {
    "coeffs": {
        "lam": (float, REQUIRED),
        "beta": (float, REQUIRED),
        "R": (float, 1.0),
        "M": (float, 1.0),
        "d": (int, 3),
        "s": (float, 0.0),
    },
    "sde-run": {
        "gamma": (float, REQUIRED),
        "sigma": (float, None),
        "beta": (float, None),
        "M": (float, 1.0),
        "R": (float, 1.0),
        "d": (int, 3),
        "s": (float, 0.0),
        "Q0": (_floats, REQUIRED),
        "V0": (_floats, REQUIRED),
        "dt": (float, REQUIRED),
        "T": (float, REQUIRED),
        "stepper": (_choice("neld", "neld_A", "euler"), "neld"),
        "record_stride": (int, 1),
    },
    "bath-run": {
        "lam": (float, REQUIRED),
        "m": (float, REQUIRED),
        "beta": (float, REQUIRED),
        "M": (float, 1.0),
        "R": (float, 1.0),
        "d": (int, 3),
        "s": (float, 0.0),
        "T": (float, REQUIRED),
        "Q0": (_floats, REQUIRED),
        "V0": (_floats, REQUIRED),
        "quantile_tail": (float, 1e-8),
        "domain_radius": (float, None),
        "flight_check": (_bool, False),
    },
    "markov-run": {
        "lam": (float, REQUIRED),
        "m": (float, REQUIRED),
        "beta": (float, REQUIRED),
        "M": (float, 1.0),
        "R": (float, 1.0),
        "d": (int, 3),
        "s": (float, 0.0),
        "T": (float, REQUIRED),
        "Q0": (_floats, REQUIRED),
        "V0": (_floats, REQUIRED),
        "checkpoints": (_floats, ()),
    },
    "md-run": {
        "N": (int, 1000),
        "eps": (float, 1.0),
        "beta": (float, 1.0),
        "s": (float, 0.05),
        "M": (float, 1.0),
        "a": (float, 0.7 ** (-1.0 / 3.0)),
        "r_cut": (float, 2.6),
        "gamma": (float, 1.0),
        "sigma": (float, None),
        "dt": (float, 0.005),
        "T": (float, 500.0),
        "K": (int, 100),
        "burn_in": (float, 0.0),
        "record_every": (int, 1),
        "method": (_choice("auto", "brute", "cells"), "auto"),
    },
    "converge": {
        "masses": (_floats, REQUIRED),
        "simulator": (_choice("markov", "mechanical", "both"), "both"),
        "n_paths": (int, REQUIRED),
        "lam": (float, REQUIRED),
        "beta": (float, REQUIRED),
        "M": (float, 1.0),
        "R": (float, 1.0),
        "d": (int, 3),
        "s": (float, 0.0),
        "T": (float, REQUIRED),
        "Q0": (_floats, REQUIRED),
        "V0": (_floats, REQUIRED),
        "quantile_tail": (float, 1e-8),
        "domain_radius": (float, None),
        "n_sk": (int, 5),
    },
}


def load_config(path, section):
    """Parse and validate one section of a flat key-value config file."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        read = parser.read([path])
    except configparser.Error as exc:
        raise ConfigError("cannot parse %s: %s" % (path, exc))
    if not read:
        raise ConfigError("config file %r not found" % str(path))
    if not parser.has_section(section):
        raise ConfigError("missing section [%s] in %s" % (section, path))
    schema = dict(SCHEMAS[section])
    schema.update(_COMMON)
    raw = dict(parser.items(section))
    for key in raw:
        if key not in schema:
            raise ConfigError("unknown key %r in section [%s]" % (key, section))
    out = {}
    for key, (convert, default) in schema.items():
        if key in raw:
            try:
                out[key] = convert(raw[key])
            except ValueError as exc:
                raise ConfigError("invalid value for key %r: %s" % (key, exc))
        elif default is REQUIRED:
            raise ConfigError("missing required key %r in section [%s]" % (key, section))
        else:
            out[key] = default
    return out


def _fmt(x):
    return "%.17g" % float(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    log.info("wrote %s", path)


def _state_vectors(cfg):
    d = cfg["d"]
    Q0 = np.asarray(cfg["Q0"], dtype=float)
    V0 = np.asarray(cfg["V0"], dtype=float)
    if Q0.shape != (d,):
        raise ConfigError("key 'Q0' must have %d entries, got %d" % (d, Q0.size))
    if V0.shape != (d,):
        raise ConfigError("key 'V0' must have %d entries, got %d" % (d, V0.size))
    return Q0, V0


def write_trajectory(path, traj, d):
    """Trajectory CSV: t, Q components, V components, jump flag."""
    header = (["t"] + ["Q%d" % i for i in range(1, d + 1)]
              + ["V%d" % i for i in range(1, d + 1)] + ["jump"])
    rows = ([_fmt(t)] + [_fmt(x) for x in row] + ["%d" % flag]
            for t, row, flag in zip(traj.times, traj.values, traj.jump_mask))
    _write_csv(path, header, rows)


def write_events(path, events, d):
    """Collision event log CSV matching the heatbath event fields."""
    header = (["t", "atom_id"] + ["en%d" % i for i in range(1, d + 1)]
              + ["v_n", "V_n", "fast"]
              + ["Vpost%d" % i for i in range(1, d + 1)])
    rows = ([_fmt(ev.t), "%d" % ev.atom_id] + [_fmt(x) for x in ev.e_n]
            + [_fmt(ev.v_n), _fmt(ev.V_n), "%d" % int(ev.fast)]
            + [_fmt(x) for x in ev.V_post]
            for ev in events)
    _write_csv(path, header, rows)


def _print_matrix(name, mat):
    for i, row in enumerate(np.atleast_2d(mat)):
        print("%s row%d  %s" % (name, i + 1, "  ".join(_fmt(x) for x in row)))


def cmd_coeffs(cfg, seed, out_dir, replica, suffix):
    law = VelocityLaw(cfg["beta"], dim=cfg["d"])
    A = StrainRate.shear(cfg["s"], dim=cfg["d"])
    c = langevin.coefficients_from_bath(cfg["lam"], law, cfg["R"], cfg["M"], A)
    print("gamma  %s" % _fmt(c.gamma))
    print("sigma  %s" % _fmt(c.sigma))
    print("fdr_residual  %.3g" % langevin.fdr_check(c, cfg["beta"]))
    if cfg["d"] == 3:
        for variant in ("single", "triple"):
            lc = langevin.laminar_limit_coefficients(variant, cfg["lam"], cfg["R"], cfg["beta"])
            print("laminar_%s flow_factor  %s" % (variant, _fmt(lc.flow_factor)))
            _print_matrix("laminar_%s gamma" % variant, lc.gamma_matrix)
            _print_matrix("laminar_%s sigma" % variant, lc.sigma_matrix)


def cmd_sde_run(cfg, seed, out_dir, replica, suffix):
    d = cfg["d"]
    Q0, V0 = _state_vectors(cfg)
    sigma = cfg["sigma"]
    if sigma is None:
        if cfg["beta"] is None:
            raise ConfigError("key 'sigma' or key 'beta' must be given")
        sigma = math.sqrt(2.0 * cfg["gamma"] / cfg["beta"])
    c = langevin.NeldCoefficients(gamma=cfg["gamma"], sigma=sigma, M=cfg["M"],
                                  R=cfg["R"], A=StrainRate.shear(cfg["s"], d), dim=d)
    n_steps = int(round(cfg["T"] / cfg["dt"]))
    traj = langevin.run_sde(c, langevin.SdeState(Q0, V0), cfg["dt"], n_steps,
                            stream_rng(seed, "sde", replica),
                            stepper=cfg["stepper"], record_stride=cfg["record_stride"])
    write_trajectory(out_dir / ("trajectory%s.csv" % suffix), traj, d)


def cmd_bath_run(cfg, seed, out_dir, replica, suffix):
    d = cfg["d"]
    Q0, V0 = _state_vectors(cfg)
    law = VelocityLaw(cfg["beta"], dim=d)
    bc = heatbath.BathConfig(lam=cfg["lam"], m=cfg["m"], law=law,
                             A=StrainRate.shear(cfg["s"], d), T=cfg["T"],
                             quantile_tail=cfg["quantile_tail"],
                             domain_radius=cfg["domain_radius"])
    state = heatbath.MechState(Q=Q0, V=V0, M=cfg["M"], R=cfg["R"])
    run = heatbath.run_mechanical(bc, state, stream_rng(seed, "bath", replica),
                                  flight_check=cfg["flight_check"])
    if run.stopped:
        log.warning("run stopped at tau_m = %.6g before T", run.tau_m)
    write_trajectory(out_dir / ("trajectory%s.csv" % suffix), run.trajectory, d)
    write_events(out_dir / ("events%s.csv" % suffix), run.events, d)


def cmd_markov_run(cfg, seed, out_dir, replica, suffix):
    d = cfg["d"]
    Q0, V0 = _state_vectors(cfg)
    law = VelocityLaw(cfg["beta"], dim=d)
    jl = jumps.JumpLaw(lam=cfg["lam"], m=cfg["m"], law=law,
                       A=StrainRate.shear(cfg["s"], d), M=cfg["M"], R=cfg["R"])
    run = jumps.run_markov(jl, Q0, V0, cfg["T"], stream_rng(seed, "markov", replica),
                           checkpoints=cfg["checkpoints"])
    if run.stopped:
        log.warning("path left the constant-intensity region at t = %.6g",
                    run.stop_time)
    write_trajectory(out_dir / ("trajectory%s.csv" % suffix), run.trajectory, d)


def cmd_md_run(cfg, seed, out_dir, replica, suffix):
    mcfg = md.MdConfig(N=cfg["N"], eps=cfg["eps"], beta=cfg["beta"], s=cfg["s"],
                       M=cfg["M"], a=cfg["a"], r_cut=cfg["r_cut"],
                       gamma=cfg["gamma"], sigma=cfg["sigma"], dt=cfg["dt"],
                       T=cfg["T"], K=cfg["K"])
    run = md.run_shear_experiment(mcfg, stream_rng(seed, "thermostat", replica),
                                  record_every=cfg["record_every"],
                                  burn_in=cfg["burn_in"], method=cfg["method"])

    centers = run.slices.centers
    mean = run.slices.mean_profile()
    var = run.slices.variance_profile()
    per = run.slices.dist_per_slice(mcfg.s)
    rows = (["%d" % k, _fmt(centers[k])] + [_fmt(x) for x in mean[k]]
            + [_fmt(x) for x in var[k]] + [_fmt(per[k])]
            for k in range(mcfg.K))
    _write_csv(out_dir / ("slices%s.csv" % suffix),
               ["slice_index", "Q2_center", "meanV1", "meanV2", "meanV3",
                "varV1", "varV2", "varV3", "dist"], rows)

    sig_header = ["t"] + ["sigma%d%d" % (i, j)
                          for i in (1, 2, 3) for j in (1, 2, 3)]
    rows = ([_fmt(t)] + [_fmt(x) for x in sig.ravel()]
            for t, sig in zip(run.stress_times, run.stress_series))
    _write_csv(out_dir / ("stress%s.csv" % suffix), sig_header, rows)

    rows = ([_fmt(t), _fmt(v)] for t, v in zip(run.dist_times, run.dist_values))
    _write_csv(out_dir / ("dist%s.csv" % suffix), ["t", "dist"], rows)

    report = run.stress
    print("sigma12  %s   eta  %s   stderr  %s"
          % (_fmt(report.sigma12), _fmt(report.eta), _fmt(report.stderr)))


def continuity_gap(traj):
    """Skorokhod-bound distance from a jump path to its jump-smoothed twin.

    The twin replaces each post-jump value by the jump midpoint, so the gap
    is at most half the largest jump and shrinks with the jump sizes: a
    pathwise proxy for closeness to a continuous limit.
    """
    mask = traj.jump_mask.copy()
    mask[0] = False
    if not mask.any():
        return 0.0
    values = traj.values.copy()
    where = np.flatnonzero(mask)
    values[where] = 0.5 * (values[where] + values[where - 1])
    twin = analysis.CadlagTrajectory(traj.times, values)
    return analysis.skorokhod_upper(traj, twin)


def cmd_converge(cfg, seed, out_dir, replica, suffix):
    d = cfg["d"]
    Q0, V0 = _state_vectors(cfg)
    law = VelocityLaw(cfg["beta"], dim=d)
    A = StrainRate.shear(cfg["s"], d)
    sims = {"both": ("markov", "mechanical"), "markov": ("markov",),
            "mechanical": ("mechanical",)}[cfg["simulator"]]
    n_paths, n_sk, T = cfg["n_paths"], cfg["n_sk"], cfg["T"]

    c = langevin.coefficients_from_bath(cfg["lam"], law, cfg["R"], cfg["M"], A)
    mean_o, cov_o = analysis.linear_sde_moments(
        c.gamma, c.sigma, cfg["M"], A, T, np.concatenate([Q0, V0]))
    mean_v, cov_v = mean_o[d:], cov_o[d:, d:]

    out_rows = []
    for mi, m in enumerate(cfg["masses"]):
        for sim in sims:
            gaps = []
            if sim == "markov":
                jl = jumps.JumpLaw(lam=cfg["lam"], m=m, law=law, A=A,
                                   M=cfg["M"], R=cfg["R"])
                ens = jumps.run_markov_ensemble(
                    jl, Q0, V0, T, n_paths,
                    stream_rng(seed, "markov", replica, mi))
                ok = ~ens["stopped"]
                VT = ens["final"][ok, d:]
                for k in range(n_sk):
                    run = jumps.run_markov(
                        jl, Q0, V0, T, stream_rng(seed, "markov", replica, mi, k))
                    if not run.stopped:
                        gaps.append(continuity_gap(run.trajectory))
            else:
                bc = heatbath.BathConfig(lam=cfg["lam"], m=m, law=law, A=A, T=T,
                                         quantile_tail=cfg["quantile_tail"],
                                         domain_radius=cfg["domain_radius"])
                samples = []
                for k in range(n_paths):
                    run = heatbath.run_mechanical(
                        bc, heatbath.MechState(Q=Q0, V=V0, M=cfg["M"], R=cfg["R"]),
                        stream_rng(seed, "bath", replica, mi, k))
                    if run.stopped:
                        continue
                    samples.append(run.trajectory.values[-1][d:])
                    if len(gaps) < n_sk:
                        gaps.append(continuity_gap(run.trajectory))
                VT = np.asarray(samples).reshape(-1, d)
            n_used = len(VT)
            if n_used >= 2:
                rep = analysis.moments_from_samples(VT)
                err_mean = float(np.linalg.norm(rep.mean - mean_v))
                err_cov = float(np.linalg.norm(rep.cov - cov_v))
            else:
                log.warning("mass %.3g %s: only %d usable paths", m, sim, n_used)
                err_mean = err_cov = math.nan
            sk = float(np.median(gaps)) if gaps else math.nan
            out_rows.append([_fmt(m), sim, "%d" % n_paths, "%d" % n_used,
                             _fmt(err_mean), _fmt(err_cov),
                             _fmt(err_mean + err_cov), _fmt(sk)])
    _write_csv(out_dir / ("converge%s.csv" % suffix),
               ["m", "simulator", "n_paths", "n_used",
                "err_mean", "err_cov", "err_total", "sk_upper"], out_rows)


RUNNERS = {
    "coeffs": cmd_coeffs,
    "sde-run": cmd_sde_run,
    "bath-run": cmd_bath_run,
    "markov-run": cmd_markov_run,
    "md-run": cmd_md_run,
    "converge": cmd_converge,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="shearbath",
        description="Seeded batch runs of the shear-flow heat-bath models.")
    parser.add_argument("subcommand", choices=sorted(RUNNERS))
    parser.add_argument("--config", required=True, help="key-value config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="root seed (overrides the config)")
    parser.add_argument("--out", default=None,
                        help="output directory (overrides the config)")
    parser.add_argument("--deterministic", type=_bool, default=True,
                        metavar="BOOL",
                        help="run replicas sequentially (default true)")
    parser.add_argument("--replicas", type=int, default=1, metavar="N",
                        help="independent repetitions with per-replica streams")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.subcommand)
        if args.replicas < 1:
            raise ConfigError("--replicas must be at least 1")
        seed = cfg["seed"] if args.seed is None else args.seed
        if seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        out_dir = Path(cfg["out"] if args.out is None else args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        runner = RUNNERS[args.subcommand]
        tasks = [(r, "_r%d" % r if args.replicas > 1 else "")
                 for r in range(args.replicas)]
        if args.deterministic or len(tasks) == 1:
            for r, sfx in tasks:
                runner(cfg, seed, out_dir, r, sfx)
        else:
            # replica fan-out; each output file has a single writer
            workers = min(len(tasks), os.cpu_count() or 1)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(lambda t: runner(cfg, seed, out_dir, *t), tasks))
    except (md.IntegrationBlowupError, heatbath.EnergyBoundError,
            heatbath.RecollisionError) as exc:
        print("numeric blowup: %s" % exc, file=sys.stderr)
        return EXIT_BLOWUP
    except jumps.RegionExit as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
