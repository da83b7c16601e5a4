"""Command line front end.

One TOML config describes the model; subcommands run the analyses and drop
fixed-name output files plus a manifest into --out-dir. Exit codes are a
stable contract: 0 success, 1 domain or hypothesis failure, 2 input error,
3 numerical failure.
"""

import argparse
import hashlib
import math
import os
import sys
from datetime import datetime, timezone

try:
    import tomllib
except ModuleNotFoundError:                      # 3.10
    import tomli as tomllib

import numpy as np

from . import __version__
from ._util import dumps_json, resolve_threads, write_csv, write_json
from .errors import (
    CapacityError,
    DomainError,
    HypothesisError,
    NumericalError,
    StabilityError,
    StructuralError,
    UnavailableError,
)
from .model import (
    ModelParams,
    atlas_g_rank,
    is_skew_symmetric,
    linear_sigma_sq,
    validate,
)
from .ranks import EXACT_ENUM_CAP, enumerate_permutations
from .invariant import (
    chamber_weights,
    chamber_weights_mcmc,
    equilibrium_residual,
    lambda_vector,
    occupation_matrix,
    top_chambers,
)
from .sde import SimConfig, gap_trajectory, growth_rates, occupation_estimate, simulate
from .capcurve import convexity_criterion, expected_curve_mc, expected_slope
from .portfolio import compare_strategies
from .ranks import Permutation

__all__ = [
    "main",
    "cmd_validate",
    "cmd_invariant",
    "cmd_simulate",
    "cmd_capcurve",
    "cmd_portfolio",
]

_DOMAIN_EXIT = 1
_INPUT_EXIT = 2
_NUMERIC_EXIT = 3

_MODEL_KEYS = {
    "n", "gamma", "gamma_name", "g_rank", "atlas", "sigma_rank", "sigma_sq",
    "sigma_linear", "rho", "y0",
}


def _load_config(path):
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except OSError as exc:
        raise StructuralError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise StructuralError(f"config parse error in {path}: {exc}") from exc


def _model_from_config(cfg):
    if "model" not in cfg:
        raise StructuralError("config needs a [model] section")
    m = cfg["model"]
    unknown = set(m) - _MODEL_KEYS
    if unknown:
        raise StructuralError(f"unknown [model] keys: {sorted(unknown)}")
    if "n" not in m:
        raise StructuralError("[model] needs n")
    n = m["n"]
    if not isinstance(n, int) or n < 2:
        raise StructuralError(f"n must be an integer >= 2, got {n!r}")

    if ("g_rank" in m) == ("atlas" in m):
        raise StructuralError("give exactly one of g_rank or atlas in [model]")
    if "atlas" in m:
        spec = m["atlas"]
        if not isinstance(spec, dict) or set(spec) != {"g"}:
            raise StructuralError('atlas shorthand must be {g = <positive real>}')
        g_rank = atlas_g_rank(n, float(spec["g"]))
    else:
        g_rank = m["g_rank"]

    sig_keys = [k for k in ("sigma_rank", "sigma_sq", "sigma_linear") if k in m]
    if len(sig_keys) != 1:
        raise StructuralError(
            "give exactly one of sigma_rank, sigma_sq or sigma_linear in [model]"
        )
    if sig_keys[0] == "sigma_rank":
        sigma_rank = np.asarray(m["sigma_rank"], dtype=np.float64)
    elif sig_keys[0] == "sigma_sq":
        sq = np.asarray(m["sigma_sq"], dtype=np.float64)
        if np.any(sq <= 0):
            raise StructuralError("sigma_sq entries must be positive")
        sigma_rank = np.sqrt(sq)
    else:
        spec = m["sigma_linear"]
        if not isinstance(spec, dict) or set(spec) != {"base", "slope"}:
            raise StructuralError(
                "sigma_linear shorthand must be {base = ..., slope = ...}"
            )
        sigma_rank = np.sqrt(linear_sigma_sq(n, float(spec["base"]), float(spec["slope"])))

    rho = m.get("rho", "zero")
    if isinstance(rho, str):
        if rho != "zero":
            raise StructuralError(f'rho must be "zero" or an n x n table, got {rho!r}')
        rho = None
    return ModelParams(
        n=n,
        gamma=float(m.get("gamma", 0.0)),
        gamma_name=np.asarray(m.get("gamma_name", np.zeros(n)), dtype=np.float64),
        g_rank=np.asarray(g_rank, dtype=np.float64),
        sigma_rank=sigma_rank,
        rho=None if rho is None else np.asarray(rho, dtype=np.float64),
        y0=None if "y0" not in m else np.asarray(m["y0"], dtype=np.float64),
    )


def _section(cfg, name):
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise StructuralError(f"[{name}] must be a table")
    return sec


def _setting(args, flag, section, key, default):
    v = getattr(args, flag, None)
    if v is not None:
        return v
    return section.get(key, default)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest(dict):
    """What a run was and what it produced, hashed for reproducibility.

    Rerunning the same config with the same settings reproduces every
    inventoried output byte-for-byte; the manifest itself differs only in
    the written_at wall-clock stamp.
    """

    @classmethod
    def collect(cls, command, config_path, params, settings, out_dir, files):
        stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        return cls(
            command=command,
            version=__version__,
            written_at=stamp,
            config_sha256=_sha256(config_path),
            params=params.to_dict(),
            settings=settings,
            outputs={name: _sha256(os.path.join(out_dir, name)) for name in files},
        )


def _write_manifest(out_dir, command, config_path, params, settings, files):
    manifest = RunManifest.collect(
        command, config_path, params, settings, out_dir, files
    )
    write_json(os.path.join(out_dir, "manifest.json"), manifest)


def _out_dir(args):
    d = args.out_dir or "."
    os.makedirs(d, exist_ok=True)
    return d


def cmd_validate(args):
    params = _model_from_config(_load_config(args.config))
    report = validate(params)
    print(f"drift sums to zero: {report.drift_sum_ok} (sum = {report.drift_sum:.3e})")
    print(f"volatilities positive: {report.sigma_positive_ok}")
    print(
        f"stability margin negative: {report.stability_ok}"
        f" (margin = {report.stability_margin:.6g})"
    )
    print(
        f"diffusion positive-definite: {report.definiteness_ok}"
        f" (min eigenvalue = {report.min_eigenvalue:.6g}, {report.definiteness_mode})"
    )
    print(dumps_json(report.to_dict()))
    return 0 if report.stable else _DOMAIN_EXIT


def cmd_invariant(args):
    cfg = _load_config(args.config)
    params = _model_from_config(cfg)
    ana = _section(cfg, "analysis")
    mode = _setting(args, "mode", ana, "mode", "exact")
    if mode not in ("exact", "mcmc"):
        raise StructuralError(f"mode must be exact or mcmc, got {mode!r}")
    seed = int(_setting(args, "seed", ana, "seed", 0))
    iters = int(_setting(args, "iters", ana, "iters", 1_000_000))
    out_dir = _out_dir(args)
    files = []

    if mode == "exact":
        measure = chamber_weights(params, threads=resolve_threads(args.threads))
    else:
        measure = chamber_weights_mcmc(params, iters=iters, seed=seed)
    occ = occupation_matrix(measure)

    theta_path = os.path.join(out_dir, "theta_matrix.csv")
    if occ.stderr is None:
        occ.to_csv(theta_path)
    else:
        header = (["rank"] + [f"name_{i}" for i in range(1, params.n + 1)]
                  + [f"se_name_{i}" for i in range(1, params.n + 1)])
        rows = [[k + 1, *occ.theta[k], *occ.stderr[k]] for k in range(params.n)]
        write_csv(theta_path, header, rows)
    files.append("theta_matrix.csv")

    if mode == "exact":
        if params.n <= 7:
            entries = [
                (p, measure.theta_of(p)) for p in enumerate_permutations(params.n)
            ]
            entries.sort(key=lambda e: -e[1])
            truncated = False
        else:
            entries = top_chambers(measure, 1000)
            truncated = True
        write_json(
            os.path.join(out_dir, "chamber_weights.json"),
            {
                "n": params.n,
                "log_norm": measure.log_norm,
                "truncated": truncated,
                "entries": [
                    {"ranks_to_names": list(p.rank_to_name), "theta": w}
                    for p, w in entries
                ],
            },
        )
        files.append("chamber_weights.json")

    ident = lambda_vector(params, Permutation.identity(params.n))
    lam_summary = {"identity_lambda": ident}
    if mode == "exact":
        lam_summary["gap_means"] = measure.gap_means
        lam_summary["slopes"] = [
            expected_slope(measure, k) for k in range(1, params.n)
        ]
    write_json(os.path.join(out_dir, "lambda_summary.json"), lam_summary)
    files.append("lambda_summary.json")

    resid = equilibrium_residual(params, occ)
    write_json(
        os.path.join(out_dir, "equilibrium_residual.json"),
        {"per_name": resid, "max_abs": float(np.abs(resid).max())},
    )
    files.append("equilibrium_residual.json")

    settings = {"mode": mode, "seed": seed}
    if mode == "mcmc":
        settings["iters"] = iters
        settings["acceptance_rate"] = measure.acceptance_rate
    _write_manifest(out_dir, "invariant", args.config, params, settings, files)
    for name in files + ["manifest.json"]:
        print(f"wrote {os.path.join(out_dir, name)}")
    return 0


def cmd_simulate(args):
    cfg = _load_config(args.config)
    params = _model_from_config(cfg)
    sim = _section(cfg, "sim")
    report = validate(params)
    if not report.stable:
        print(
            f"warning: config is not stable ({'; '.join(report.failures())}); "
            "simulating anyway",
            file=sys.stderr,
        )
    sc = SimConfig(
        horizon=float(_setting(args, "T", sim, "T", 100.0)),
        dt=float(_setting(args, "dt", sim, "dt", 1e-3)),
        paths=int(_setting(args, "paths", sim, "paths", 1)),
        seed=int(_setting(args, "seed", sim, "seed", 0)),
        thin_stride=int(_setting(args, "thin_stride", sim, "thin_stride", 1)),
        store_paths=bool(_setting(args, "store_paths", sim, "store_paths", True)),
    )
    out = simulate(params, sc)
    out_dir = _out_dir(args)
    files = []

    occupation_estimate(out).to_csv(os.path.join(out_dir, "occupation_estimate.csv"))
    files.append("occupation_estimate.csv")
    write_json(
        os.path.join(out_dir, "growth_rates.json"),
        growth_rates(out).to_json_dict(),
    )
    files.append("growth_rates.json")
    if sc.store_paths:
        times, xi = gap_trajectory(out, 0)
        header = ["t"] + [f"gap_{k}" for k in range(1, params.n)]
        write_csv(
            os.path.join(out_dir, "gaps.csv"),
            header,
            [[t, *row] for t, row in zip(times, xi)],
        )
        files.append("gaps.csv")

    settings = {
        "T": sc.horizon, "dt": sc.dt, "paths": sc.paths, "seed": sc.seed,
        "thin_stride": sc.thin_stride, "store_paths": sc.store_paths,
    }
    _write_manifest(out_dir, "simulate", args.config, params, settings, files)
    for name in files + ["manifest.json"]:
        print(f"wrote {os.path.join(out_dir, name)}")
    return 0


def cmd_capcurve(args):
    cfg = _load_config(args.config)
    params = _model_from_config(cfg)
    ana = _section(cfg, "analysis")
    samples = int(_setting(args, "samples", ana, "samples", 100_000))
    seed = int(_setting(args, "seed", ana, "seed", 0))
    out_dir = _out_dir(args)

    measure = chamber_weights(params, threads=resolve_threads(args.threads))
    report = expected_curve_mc(measure, samples, seed)
    files = []
    report.to_csv(os.path.join(out_dir, "curve.csv"))
    files.append("curve.csv")
    report.to_gnuplot(os.path.join(out_dir, "curve.dat"))
    files.append("curve.dat")
    write_csv(
        os.path.join(out_dir, "slopes.csv"),
        ["k", "chord_log_rank", "expected_slope"],
        [[k, math.log1p(1.0 / k), report.slopes[k - 1]] for k in range(1, params.n)],
    )
    files.append("slopes.csv")
    write_json(
        os.path.join(out_dir, "convexity.json"), report.convexity.to_json_dict()
    )
    files.append("convexity.json")

    _write_manifest(
        out_dir, "capcurve", args.config, params,
        {"samples": samples, "seed": seed}, files,
    )
    for name in files + ["manifest.json"]:
        print(f"wrote {os.path.join(out_dir, name)}")
    return 0


def cmd_portfolio(args):
    cfg = _load_config(args.config)
    params = _model_from_config(cfg)
    sim = _section(cfg, "sim")
    ana = _section(cfg, "analysis")
    sc = SimConfig(
        horizon=float(_setting(args, "T", sim, "T", 100.0)),
        dt=float(_setting(args, "dt", sim, "dt", 1e-3)),
        paths=int(_setting(args, "paths", sim, "paths", 1)),
        seed=int(_setting(args, "seed", sim, "seed", 0)),
        thin_stride=int(_setting(args, "thin_stride", sim, "thin_stride", 1)),
        store_paths=True,
    )
    mc_simplex = int(_setting(args, "mc_simplex", ana, "mc_simplex", 4096))
    out = simulate(params, sc)

    measure = None
    if params.n <= EXACT_ENUM_CAP and is_skew_symmetric(params).ok and validate(params).stable:
        measure = chamber_weights(params, threads=resolve_threads(args.threads))
    report, tracks = compare_strategies(
        params, out, measure, mc_simplex=mc_simplex, seed=sc.seed
    )
    out_dir = _out_dir(args)
    files = []
    for name, track in tracks.items():
        fname = f"wealth_{name}.csv"
        track.to_csv(os.path.join(out_dir, fname))
        files.append(fname)
    write_json(os.path.join(out_dir, "comparison.json"), report.to_json_dict())
    files.append("comparison.json")

    settings = {
        "T": sc.horizon, "dt": sc.dt, "paths": sc.paths, "seed": sc.seed,
        "thin_stride": sc.thin_stride, "mc_simplex": mc_simplex,
    }
    _write_manifest(out_dir, "portfolio", args.config, params, settings, files)
    for name in files + ["manifest.json"]:
        print(f"wrote {os.path.join(out_dir, name)}")
    for notice in report.notices:
        print(f"notice: {notice}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="atlas-lab",
        description="Simulation and stationary analytics for rank/name hybrid equity market models.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="TOML model configuration")
        p.add_argument("--out-dir", default=None, help="output directory (default .)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (default: ATLAS_LAB_THREADS or cpu count)")

    p = sub.add_parser("validate", help="check drift, stability and definiteness")
    common(p)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("invariant", help="stationary occupation analytics")
    common(p)
    p.add_argument("--mode", choices=("exact", "mcmc"), default=None)
    p.add_argument("--iters", type=int, default=None, help="mcmc iterations")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_invariant)

    p = sub.add_parser("simulate", help="Euler Monte Carlo of the market")
    common(p)
    p.add_argument("--T", type=float, default=None, help="horizon")
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--paths", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--thin-stride", dest="thin_stride", type=int, default=None)
    p.add_argument("--store-paths", dest="store_paths", action="store_true",
                   default=None)
    p.add_argument("--no-store-paths", dest="store_paths", action="store_false")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("capcurve", help="expected capital distribution curve")
    common(p)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_capcurve)

    p = sub.add_parser("portfolio", help="strategy wealth comparison")
    common(p)
    p.add_argument("--T", type=float, default=None)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--paths", type=int, default=None)
    p.add_argument("--mc-simplex", dest="mc_simplex", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--thin-stride", dest="thin_stride", type=int, default=None)
    p.set_defaults(fn=cmd_portfolio)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StructuralError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _INPUT_EXIT
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return _NUMERIC_EXIT
    except (DomainError, StabilityError, HypothesisError, CapacityError,
            UnavailableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _DOMAIN_EXIT


if __name__ == "__main__":
    sys.exit(main())
