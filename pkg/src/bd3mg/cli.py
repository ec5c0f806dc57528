"""Command-line harness: phantom / degrade / restore / ablate / speedup.

Configuration is a flat key=value text file (one pair per line, ``#`` starts
a comment); ``--override key=value`` entries are applied on top.  Unknown
keys are rejected, missing required keys are reported by name.  Exit codes:
0 success, 1 configuration error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import blur, runtime, scheduler
from .objective import Objective, RegParams
from .volume import (Dims3, FormatError, add_gaussian_noise, init_uniform,
                     phantom, read_volume, snr_db, write_volume, _as_stream)


class ConfigError(Exception):
    pass


# key -> (type tag, required, default); types: i=int, f=float, s=string
_REG_KEYS = {
    "lambda": ("f", False, 0.1),
    "eta": ("f", False, 1.0),
    "kappa": ("f", False, 0.05),
    "delta": ("f", False, 0.05),
    "x_min": ("f", False, 0.0),
    "x_max": ("f", False, 1.0),
}
_RUN_KEYS = {
    "block_height": ("i", False, 1),
    "tol": ("f", False, 1e-6),
    "engine": ("s", False, "simulated"),
    "init_seed": ("i", False, 0),
    "run_seed": ("i", False, 0),
    "cg_tol": ("f", False, 1e-8),
    "cg_maxit": ("i", False, 200),
}
_SCHEMAS = {
    "phantom": {
        "nx": ("i", True, None), "ny": ("i", True, None), "nz": ("i", True, None),
        "seed": ("i", True, None), "out": ("s", True, None),
    },
    "degrade": {
        "truth": ("s", True, None),
        "out_observed": ("s", True, None),
        "out_psf": ("s", True, None),
        "kx": ("i", True, None), "ky": ("i", True, None), "kz": ("i", True, None),
        "noise_sigma": ("f", True, None),
        "psf_seed": ("i", False, 0),
        "noise_seed": ("i", False, 0),
        "psf_mode": ("s", False, "gaussian"),
        "sigma1_lo": ("f", False, 0.8), "sigma1_hi": ("f", False, 2.5),
        "sigma2_lo": ("f", False, 0.8), "sigma2_hi": ("f", False, 2.5),
        "sigma3_lo": ("f", False, 0.8), "sigma3_hi": ("f", False, 2.5),
        "phi_lo": ("f", False, 0.0), "phi_hi": ("f", False, math.pi),
        "theta_lo": ("f", False, 0.0), "theta_hi": ("f", False, math.pi),
    },
    "restore": {
        "observed": ("s", True, None), "psf": ("s", True, None),
        "out": ("s", True, None),
        "method": ("s", True, None), "workers": ("i", True, None),
        "truth": ("s", False, None),
        "log_out": ("s", False, None), "trace_out": ("s", False, None),
        "max_updates": ("i", False, None),
        **_RUN_KEYS, **_REG_KEYS,
    },
    "ablate": {
        "observed": ("s", True, None), "psf": ("s", True, None),
        "out_csv": ("s", True, None),
        "workers": ("i", True, None), "max_sweeps": ("i", True, None),
        "truth": ("s", False, None),
        "ref_factor": ("i", False, 10),
        **_RUN_KEYS, **_REG_KEYS,
    },
    "speedup": {
        "observed": ("s", True, None), "psf": ("s", True, None),
        "out_csv": ("s", True, None),
        "workers_list": ("s", True, None),
        "max_updates": ("i", False, None),
        **_RUN_KEYS, **_REG_KEYS,
    },
}


def _parse_pairs(lines, where) -> dict[str, str]:
    pairs = {}
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{ln}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{where}:{ln}: empty key")
        pairs[key] = value
    return pairs


def load_config(path: str, overrides: list[str], command: str) -> dict:
    try:
        with open(path) as fh:
            pairs = _parse_pairs(fh, path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    pairs.update(_parse_pairs(overrides, "--override"))
    schema = _SCHEMAS[command]
    cfg = {}
    for key, value in pairs.items():
        if key not in schema:
            raise ConfigError(f"unknown config key: {key}")
        kind = schema[key][0]
        try:
            if kind == "i":
                cfg[key] = int(value)
            elif kind == "f":
                cfg[key] = float(value)
            else:
                cfg[key] = value
        except ValueError as exc:
            raise ConfigError(f"key {key}: cannot parse {value!r} as "
                              f"{'integer' if kind == 'i' else 'number'}") from exc
    for key, (_, required, default) in schema.items():
        if key in cfg:
            continue
        if required:
            raise ConfigError(f"missing required key: {key}")
        cfg[key] = default
    return cfg


def _reg_params(cfg) -> RegParams:
    return RegParams(lam=cfg["lambda"], eta=cfg["eta"], kappa=cfg["kappa"],
                     delta=cfg["delta"], x_min=cfg["x_min"], x_max=cfg["x_max"])


def _load_problem(cfg) -> Objective:
    y = read_volume(cfg["observed"])
    psf = blur.read_psf(cfg["psf"])
    return Objective(psf, y, _reg_params(cfg))


def _init_x0(y, seed) -> np.ndarray:
    from .volume import dims_of

    upper = max(0.0, float(y.max()))
    return init_uniform(dims_of(y), upper, seed)


def cmd_phantom(cfg) -> int:
    vol = phantom(Dims3(cfg["nx"], cfg["ny"], cfg["nz"]), cfg["seed"])
    write_volume(vol, cfg["out"])
    print(f"wrote phantom {cfg['nx']}x{cfg['ny']}x{cfg['nz']} to {cfg['out']}")
    return 0


def cmd_degrade(cfg) -> int:
    truth = read_volume(cfg["truth"])
    from .volume import dims_of

    dims = dims_of(truth)
    kdims = blur.KernelDims(cfg["kx"], cfg["ky"], cfg["kz"])
    if cfg["psf_mode"] == "dirac":
        psf = blur.dirac_stack(dims, kdims)
    elif cfg["psf_mode"] == "gaussian":
        ranges = blur.ParamRanges(
            sigma1=(cfg["sigma1_lo"], cfg["sigma1_hi"]),
            sigma2=(cfg["sigma2_lo"], cfg["sigma2_hi"]),
            sigma3=(cfg["sigma3_lo"], cfg["sigma3_hi"]),
            phi=(cfg["phi_lo"], cfg["phi_hi"]),
            theta=(cfg["theta_lo"], cfg["theta_hi"]))
        psf = blur.generate_psf_stack(dims, kdims, ranges, cfg["psf_seed"])
    else:
        raise ConfigError(f"key psf_mode: expected gaussian or dirac, "
                          f"got {cfg['psf_mode']!r}")
    observed = add_gaussian_noise(blur.apply_H(psf, truth),
                                  cfg["noise_sigma"], cfg["noise_seed"])
    write_volume(observed, cfg["out_observed"])
    blur.write_psf(psf, cfg["out_psf"])
    print(f"input snr_db = {snr_db(truth, observed):.4f}")
    return 0


def _run_config(cfg, method, workers, max_updates, seed) -> runtime.RunConfig:
    return runtime.RunConfig(
        method=method, workers=workers, block_height=cfg["block_height"],
        tol=cfg["tol"], max_updates=max_updates, seed=seed,
        cg_tol=cfg["cg_tol"], cg_maxit=cfg["cg_maxit"], engine=cfg["engine"])


def cmd_restore(cfg) -> int:
    obj = _load_problem(cfg)
    truth = read_volume(cfg["truth"]) if cfg["truth"] else None
    x0 = _init_x0(obj.y, cfg["init_seed"])
    run_cfg = _run_config(cfg, cfg["method"], cfg["workers"],
                          cfg["max_updates"], cfg["run_seed"])
    result = runtime.run(obj, x0, run_cfg, truth=truth)
    write_volume(result.x_final, cfg["out"])
    if cfg["log_out"]:
        runtime.write_log_csv(result.log, cfg["log_out"])
    if cfg["trace_out"]:
        scheduler.write_trace_csv(result.trace, cfg["trace_out"])
    print(f"final f = {result.log[-1].f_value:.10g}")
    if truth is not None:
        print(f"restored snr_db = {snr_db(truth, result.x_final):.4f}")
    print(f"tau_hat = {result.tau_hat}")
    print(f"stop_reason = {result.stop_reason}")
    return 0


def cmd_ablate(cfg) -> int:
    obj = _load_problem(cfg)
    truth = read_volume(cfg["truth"]) if cfg["truth"] else None
    x0 = _init_x0(obj.y, cfg["init_seed"])
    blocks = len(scheduler.partition_blocks(obj.dims.nz, cfg["block_height"]))
    budget = cfg["max_sweeps"] * blocks

    # long reference run for the distance-to-solution column
    ref_cfg = runtime.RunConfig(
        method="bd3mg", workers=cfg["workers"], block_height=cfg["block_height"],
        tol=1e-12, max_updates=cfg["ref_factor"] * budget, seed=cfg["run_seed"],
        cg_tol=cfg["cg_tol"], cg_maxit=cfg["cg_maxit"], engine="simulated")
    x_star = runtime.run(obj, x0, ref_cfg, truth=truth).x_final

    rows = []
    for method in runtime.METHODS:
        run_cfg = _run_config(cfg, method, cfg["workers"], budget,
                              cfg["run_seed"])
        try:
            result = runtime.run(obj, x0, run_cfg, truth=truth, x_star=x_star)
        except Exception as exc:
            print(f"method {method} failed: {exc}", file=sys.stderr)
            continue
        for e in result.log:
            rows.append([method, e.k, repr(e.wall_seconds), repr(e.f_value),
                         "" if e.snr_db is None else repr(e.snr_db),
                         "" if e.rel_dist is None else repr(e.rel_dist),
                         e.max_staleness])
    with _as_stream(cfg["out_csv"], "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "k", "wall_seconds", "f", "snr_db",
                         "rel_dist", "max_staleness"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {cfg['out_csv']}")
    return 0


def cmd_speedup(cfg) -> int:
    obj = _load_problem(cfg)
    x0 = _init_x0(obj.y, cfg["init_seed"])
    try:
        workers_list = sorted({int(tok) for tok in
                               cfg["workers_list"].split(",") if tok.strip()})
    except ValueError as exc:
        raise ConfigError(f"key workers_list: {exc}") from exc
    if not workers_list or workers_list[0] < 1:
        raise ConfigError("key workers_list: need a comma-separated list of "
                          "positive worker counts")
    available = os.cpu_count() or 1
    rows = []
    base: dict[str, float] = {}
    for c in workers_list:
        if c > available:
            print(f"skipping C={c}: only {available} cores available",
                  file=sys.stderr)
            continue
        for method in ("bd3mg", "bp3mg"):
            run_cfg = runtime.RunConfig(
                method=method, workers=c, block_height=cfg["block_height"],
                tol=cfg["tol"], max_updates=cfg["max_updates"],
                seed=cfg["run_seed"], cg_tol=cfg["cg_tol"],
                cg_maxit=cfg["cg_maxit"], engine="live")
            wall = runtime.run(obj, x0, run_cfg).wall_seconds
            base.setdefault(method, wall)
            rows.append([method, c, repr(wall), repr(base[method] / wall)])
            print(f"{method} C={c}: {wall:.3f}s "
                  f"(ratio {base[method] / wall:.3f})")
    with _as_stream(cfg["out_csv"], "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "C", "wall_seconds", "ratio_vs_smallest_C"])
        writer.writerows(rows)
    return 0


_COMMANDS = {
    "phantom": cmd_phantom,
    "degrade": cmd_degrade,
    "restore": cmd_restore,
    "ablate": cmd_ablate,
    "speedup": cmd_speedup,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are configuration errors
        raise ConfigError(message)


def main(argv=None) -> int:
    parser = _Parser(prog="bd3mg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE")
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config, args.override, args.command)
        return _COMMANDS[args.command](cfg)
    except (ConfigError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
