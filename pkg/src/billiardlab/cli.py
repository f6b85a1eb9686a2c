"""Command-line experiment driver.

Every command writes its data files into ``--out`` together with a
``manifest.json`` listing each file with its sha256. Data files depend
only on the arguments and the seed; timing and versions live in the
manifest alone.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 the
no-eclipse condition fails, 4 numerical failure (``diagnostic.json``).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .cocycle import CocycleProduct, grassmann_distance, map_derivative, singular_spectrum
from .coding import build_window_table, log_expansion_bound, sequence_data
from .dynamics import boundary_layer_fraction, find_orbit_for_word, format_word, orbit_rows, orbits_for_words, parse_word
from .errors import BilliardError, InvalidConfiguration, NonAdmissibleWord, PreconditionError
from .fronts import EXPANSION_HEADER, expansion_along_trajectory, finite_difference_expansion
from .geometry import ObstacleConfiguration, reference_configuration
from .statistics import (TAIL_HEADER, BilliardSampler, PesinParameters, calibrate_pesin_threshold, exponent_tail,
                         hyperbolicity_estimates, pesin_tail, reference_exponents, semicontinuity_probe,
                         tempering_violation_rate, regularity_profile)
from .symbolic import GibbsChain, Potential, Shift, max_entropy_chain, stationary_chain

EXIT_OK, EXIT_INVALID, EXIT_NO_ECLIPSE, EXIT_NUMERICAL = 0, 2, 3, 4


class ConditionViolated(Exception):
    pass


# ---------------------------------------------------------------------------
# output helpers


class Outputs:
    """Collects the files written by one command."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: List[str] = []
        self.summary: Dict[str, object] = {}

    def _add(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.root / name

    def csv(self, name: str, header, rows) -> None:
        with open(self._add(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])

    def json(self, name: str, data) -> None:
        self._add(name).write_text(json.dumps(_plain(data), indent=1, sort_keys=True) + "\n")

    def dat(self, name: str, x, y, comment: str = "") -> None:
        """Two-column data for gnuplot."""
        lines = [f"# {comment}"] if comment else []
        lines += [f"{_fmt(a)} {_fmt(b)}" for a, b in zip(x, y)]
        self._add(name).write_text("\n".join(lines) + "\n")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Outputs, args, config_hash: str, started: float, status: int) -> None:
    import mpmath
    import scipy
    manifest = {
        "command": args.command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")},
        "seed": args.seed,
        "config_sha256": config_hash,
        "exit_status": status,
        "summary": out.summary,
        "versions": {"package": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "mpmath": mpmath.__version__},
        "wall_time_s": round(time.time() - started, 3),
        "files": {name: sha256_file(out.root / name) for name in sorted(out.files)},
    }
    (out.root / "manifest.json").write_text(json.dumps(_plain(manifest), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared inputs


def load_config(path: Optional[str]):
    """(configuration, sha256 of its canonical JSON)."""
    cfg = reference_configuration() if path is None else ObstacleConfiguration.load(path)
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return cfg, hashlib.sha256(blob).hexdigest()


def require_no_eclipse(cfg: ObstacleConfiguration) -> None:
    if not cfg.no_eclipse:
        raise ConditionViolated(f"no-eclipse condition fails for triple {cfg.eclipse_witness}")


def load_measure(spec: str, k0: int) -> GibbsChain:
    if spec == "max-entropy":
        return max_entropy_chain(k0)
    if not os.path.exists(spec):
        raise InvalidConfiguration(f"potential file {spec} not found")
    return stationary_chain(Potential.load(spec, k0))


def n_grid(args) -> List[int]:
    if args.nmin < 1 or args.nmax < args.nmin or args.nstep < 1:
        raise PreconditionError("need 1 <= nmin <= nmax and nstep >= 1")
    return list(range(args.nmin, args.nmax + 1, args.nstep))


def _sampler(args, cfg) -> BilliardSampler:
    require_no_eclipse(cfg)
    chain = load_measure(args.measure, cfg.k0)
    return BilliardSampler(build_window_table(cfg, args.radius), chain)


# ---------------------------------------------------------------------------
# commands


def cmd_geometry_check(args, cfg, out: Outputs) -> int:
    words = [tuple(w) for L in range(2, args.max_period + 1) for w in Shift(cfg.k0).words(L) if w[0] != w[-1]]
    min_cos = float("nan")
    if cfg.no_eclipse:
        min_cos = min(float(np.min(t.cos_angles)) for t in orbits_for_words(words, cfg))
    out.json("geometry.json", {
        "k0": cfg.k0, "d0": cfg.d0, "no_eclipse": cfg.no_eclipse,
        "eclipse_witness": cfg.eclipse_witness,
        "pair_distances": {f"{i},{j}": d for (i, j), d in sorted(cfg.pair_distances.items())},
        "min_cos_phi_periodic": min_cos, "periodic_words_checked": len(words) if cfg.no_eclipse else 0,
    })
    out.summary.update({"d0": cfg.d0, "no_eclipse": cfg.no_eclipse})
    return EXIT_OK if cfg.no_eclipse else EXIT_NO_ECLIPSE


def cmd_orbit(args, cfg, out: Outputs) -> int:
    require_no_eclipse(cfg)
    word = parse_word(args.word)
    traj = find_orbit_for_word(word, cfg, periodic=not args.segment)
    out.csv("orbit.csv", ("j", "obstacle", "q_x", "q_y", "t_j", "d_j", "phi_j"), orbit_rows(traj))
    eps = cfg.d0 / 10 if args.boundary_eps is None else args.boundary_eps
    layer = {repr(e): boundary_layer_fraction(traj, cfg, e) for e in (eps / 2, eps, 2 * eps)}
    out.json("orbit.json", {"word": format_word(traj.word), "periodic": not args.segment, "length": traj.length,
                            "reflections": len(traj.reflections), "boundary_eps": eps,
                            "boundary_layer_fraction": layer})
    return EXIT_OK


def cmd_front_verify(args, cfg, out: Outputs) -> int:
    require_no_eclipse(cfg)
    word = parse_word(args.word)
    traj = find_orbit_for_word(word, cfg)
    fd = finite_difference_expansion(traj, cfg, args.bounces)
    res = expansion_along_trajectory(fd.base, cfg, None, m=args.bounces, tail=fd.tail)
    rel = abs(fd.expansion * res.product - 1.0)
    out.csv("expansion.csv", EXPANSION_HEADER, res.rows())
    out.json("front_verify.json", {"word": format_word(traj.word), "bounces": args.bounces,
                                   "product_expansion": res.expansion, "fd_expansion": fd.expansion,
                                   "relative_error": rel, "tolerance": args.tol, "pass": rel <= args.tol})
    print(f"front-verify {format_word(traj.word)} x{args.bounces}: relative error {rel:.3e}")
    return EXIT_OK


def cmd_lyapunov(args, cfg, out: Outputs) -> int:
    sampler = _sampler(args, cfg)
    run = reference_exponents(sampler, args.n, args.seed)
    # spectrum history along one sampled orbit
    rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(1, 0)))
    tau, K, c = sequence_data(sampler.table, sampler.sequences(rng, 1, args.n_spectrum))
    mats = map_derivative(tau[0], K[0, :-1], K[0, 1:], c[0, :-1], c[0, 1:])
    windows = sorted({int(round(x)) for x in np.geomspace(1, args.n_spectrum, args.windows)})
    prod = CocycleProduct(2)
    rows, prev = [], None
    for j, A in enumerate(mats, start=1):
        prod.push(A)
        if j in windows:
            sp = singular_spectrum(prod)
            gaps = [float("nan")] * 2 if prev is None else [grassmann_distance(sp.frame[:, [i]], prev.frame[:, [i]])
                                                            for i in range(2)]
            rows.append((j, *sp.exponents, *gaps))
            prev = sp
    out.csv("spectrum.csv", ("n", "lambda_1_n", "lambda_2_n", "gap_diag_1", "gap_diag_2"), rows)
    mft = run.mean_free_path
    out.json("lyapunov.json", {
        "exponents_per_collision": run.exponents, "n": run.n, "cauchy": run.cauchy, "mean_free_time": mft,
        "exponents_per_unit_time": run.exponents / mft, "exponent_sum": float(run.exponents.sum()),
        "exponent_sum_bound": 2 * log_expansion_bound(sampler.table) / run.n, "measure": args.measure,
        "chain": sampler.chain.summary(), "seed": args.seed,
    })
    print(f"lambda per collision {run.exponents[0]:.6f}, per unit time {run.exponents[0] / mft:.6f}")
    return EXIT_OK


def cmd_tails(args, cfg, out: Outputs) -> int:
    sampler = _sampler(args, cfg)
    run = reference_exponents(sampler, args.reference_n, args.seed)
    lam = float(run.exponents[args.i - 1])
    eps = args.eps_rel * abs(lam)
    grid = n_grid(args)
    upper, lower = exponent_tail(sampler, args.i, eps, grid, args.samples, args.seed, lam, args.threads)
    for curve in (upper, lower):
        out.csv(f"tail_{curve.side}.csv", TAIL_HEADER, curve.rows())
        out.dat(f"tail_{curve.side}.dat", curve.n, curve.p, "n p_n")
        fit = curve.fit_json(args.seed)
        fit.update({"lambda": lam, "cauchy": run.cauchy, "cauchy_ok": run.cauchy <= eps / 10})
        out.json(f"fit_{curve.side}.json", fit)
        print(f"{curve.side}: exceedances {curve.exceedances.tolist()} fit {fit['c']}")
    return EXIT_OK


def cmd_pesin(args, cfg, out: Outputs) -> int:
    sampler = _sampler(args, cfg)
    run = reference_exponents(sampler, args.reference_n, args.seed)
    lam = float(run.exponents[0])
    eps = args.eps_rel * lam
    C_P = args.cp if args.cp is not None else calibrate_pesin_threshold(
        sampler, lam, eps, args.window, args.calibration_samples, args.seed, args.quantile)
    params = PesinParameters(eps, C_P, args.delta, args.window)
    curve = pesin_tail(sampler, params, n_grid(args), args.samples, args.seed, lam, args.threads)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(2, 0)))
    raw, tempered, _ = regularity_profile(sampler.matrices(rng, 1, 2000), lam, eps, args.window)
    out.csv("pesin_tail.csv", TAIL_HEADER, curve.rows())
    out.dat("pesin_tail.dat", curve.n, curve.p, "n p_n")
    fit = curve.fit_json(args.seed)
    fit.update({"lambda": lam, "C_P": C_P, "delta": args.delta, "window": args.window,
                "raw_tempering_violation_rate": tempering_violation_rate(raw[:, args.window:-args.window], eps)})
    out.json("pesin_fit.json", fit)
    print(f"pesin: C_P {C_P:.6g}, exceedances {curve.exceedances.tolist()} fit {fit['c']}")
    return EXIT_OK


def cmd_semicontinuity(args, cfg, out: Outputs) -> int:
    require_no_eclipse(cfg)
    chain = load_measure(args.measure, cfg.k0)
    depths = range(args.dmin, args.dmax + 1)
    probe = semicontinuity_probe(cfg, chain, depths, args.targets, args.samples, args.seed)
    rows = [(int(n), float(m), float(np.median(probe.distances[:, a].max(axis=1))))
            for a, (n, m) in enumerate(zip(probe.depths, probe.median_g))]
    out.csv("semicontinuity.csv", ("n", "median_gap", "median_distance"), rows)
    out.dat("semicontinuity.dat", probe.depths, probe.median_g, "n median g_n")
    hyp = hyperbolicity_estimates(probe)
    out.json("semicontinuity.json", {"slope": probe.slope, "r2": probe.r2, "rho": hyp.rho, "alpha": hyp.alpha,
                                     "rho_r2": hyp.rho_r2, "strictly_decreasing":
                                     bool(np.all(np.diff(probe.median_g) < 0)), "seed": args.seed})
    print(f"semicontinuity: slope {probe.slope:.4f}, rho {hyp.rho:.4f}, alpha {hyp.alpha:.4f}")
    return EXIT_OK


def cmd_report(args, cfg, out: Outputs) -> int:
    """Collect the JSON results found under --inputs into one summary."""
    found: Dict[str, dict] = {}
    for d in args.inputs:
        for p in sorted(Path(d).glob("*.json")):
            if p.name != "manifest.json":
                found[f"{Path(d).name}/{p.name}"] = json.loads(p.read_text())
    out.json("report.json", found)
    lines = ["# Experiment report", ""]
    for key, data in found.items():
        lines.append(f"## {key}")
        lines += [f"- {k}: {v}" for k, v in data.items() if not isinstance(v, (dict, list))]
        lines.append("")
    (out._add("report.md")).write_text("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(p):
    p.add_argument("--config", default=None, help="obstacle configuration JSON (default: reference three discs)")
    p.add_argument("--seed", type=int, default=0, help="master seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
    p.add_argument("--out", default="out", help="output directory")


def _measured(p):
    p.add_argument("--measure", default="max-entropy", help="'max-entropy' or a potential JSON file")
    p.add_argument("--radius", type=int, default=6, help="symbol window radius of the collision table")


def _grid(p, nmin, nmax, nstep, samples):
    p.add_argument("--nmin", type=int, default=nmin)
    p.add_argument("--nmax", type=int, default=nmax)
    p.add_argument("--nstep", type=int, default=nstep)
    p.add_argument("--samples", type=int, default=samples, help="samples per n")
    p.add_argument("--reference-n", type=int, default=100_000, help="length of the reference run")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="billiardlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("geometry-check", help="separation and no-eclipse verdict")
    _common(p)
    p.add_argument("--max-period", type=int, default=6, help="longest periodic word for the angle survey")
    p.set_defaults(func=cmd_geometry_check)

    p = sub.add_parser("orbit", help="orbit coded by a word")
    _common(p)
    p.add_argument("--word", required=True, help="comma-separated symbols")
    p.add_argument("--segment", action="store_true", help="open segment instead of the closed orbit")
    p.add_argument("--boundary-eps", type=float, default=None,
                   help="boundary-layer width for the time-fraction report (default d0/10); eps/2 and 2 eps are "
                        "reported too")
    p.set_defaults(func=cmd_orbit)

    p = sub.add_parser("front-verify", help="front product against finite differences")
    _common(p)
    p.add_argument("--word", required=True)
    p.add_argument("--bounces", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_front_verify)

    p = sub.add_parser("lyapunov", help="exponents from a long sampled orbit")
    _common(p)
    _measured(p)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--n-spectrum", type=int, default=10_000, help="orbit length of the spectrum dump")
    p.add_argument("--windows", type=int, default=40, help="number of geometric windows in the dump")
    p.set_defaults(func=cmd_lyapunov)

    p = sub.add_parser("tails", help="large-deviation tails of a finite-time exponent")
    _common(p)
    _measured(p)
    _grid(p, 10, 100, 10, 100_000)
    p.add_argument("--i", type=int, default=1, help="exponent index")
    p.add_argument("--eps-rel", type=float, default=0.1, help="epsilon relative to |lambda_i|")
    p.set_defaults(func=cmd_tails)

    p = sub.add_parser("pesin", help="excursion tails from a regularity-defined Pesin set")
    _common(p)
    _measured(p)
    _grid(p, 10, 100, 10, 20_000)
    p.add_argument("--eps-rel", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=0.2)
    p.add_argument("--window", type=int, default=50, help="regularity truncation depth N")
    p.add_argument("--cp", type=float, default=None, help="fixed threshold C_P (default: calibrated)")
    p.add_argument("--quantile", type=float, default=0.9)
    p.add_argument("--calibration-samples", type=int, default=20_000)
    p.set_defaults(func=cmd_pesin)

    p = sub.add_parser("semicontinuity", help="subspace gaps on shrinking cylinders")
    _common(p)
    p.add_argument("--measure", default="max-entropy")
    p.add_argument("--dmin", type=int, default=2)
    p.add_argument("--dmax", type=int, default=20)
    p.add_argument("--targets", type=int, default=5)
    p.add_argument("--samples", type=int, default=4)
    p.set_defaults(func=cmd_semicontinuity)

    p = sub.add_parser("report", help="summarize earlier outputs")
    _common(p)
    p.add_argument("inputs", nargs="+", help="output directories of earlier runs")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    out = Outputs(Path(args.out))
    config_hash = ""
    try:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise PreconditionError("seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise PreconditionError("--threads must be positive")
        cfg, config_hash = load_config(args.config)
        status = args.func(args, cfg, out)
    except (InvalidConfiguration, PreconditionError, NonAdmissibleWord) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_INVALID
    except ConditionViolated as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_NO_ECLIPSE
    except (BilliardError, FloatingPointError, np.linalg.LinAlgError) as exc:
        out.json("diagnostic.json", {"error": type(exc).__name__, "message": str(exc)})
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        status = EXIT_NUMERICAL
    write_manifest(out, args, config_hash, started, status)
    return status


if __name__ == "__main__":
    sys.exit(main())
