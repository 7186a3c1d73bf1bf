"""``adaptive-stab`` command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numerical failure (a
``diagnostic.json`` is written to the output directory).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import experiments
from .adaptive import write_run_artifacts
from .config import ConfigError, load_config
from .core import BlowUpError
from .library import LibraryBuildError, UnknownParameter, load_library, save_library
from .riccati import NonConvergence, NotStabilizable

log = logging.getLogger("adaptive_stab")

NUMERICAL = (BlowUpError, NonConvergence, NotStabilizable, LibraryBuildError, np.linalg.LinAlgError, FloatingPointError)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptive-stab", description="Offline-online adaptive stabilization experiments")
    p.add_argument("command", choices=["offline", "online", "robust-compare", "rank-check"])
    p.add_argument("--config", required=True, help="YAML experiment configuration")
    p.add_argument("--library", help="library file (default <out>/library.bin)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, help="override the configured 64-bit seed")
    p.add_argument("--jobs", type=int, help="worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _library_path(args, out: Path) -> Path:
    return Path(args.library) if args.library else out / "library.bin"


def cmd_offline(cfg, args, out: Path) -> dict:
    t0 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    lib = experiments.build_offline(cfg, jobs=cfg.jobs)
    path = save_library(lib, _library_path(args, out))
    print(f"library: {len(lib.training)} parameters, gain shape {lib.gain_shape}, {time.perf_counter() - t0:.1f} s -> {path}")
    return {"library": str(path), "parameters": len(lib.training)}


def cmd_online(cfg, args, out: Path) -> dict:
    path = _library_path(args, out)
    out.mkdir(parents=True, exist_ok=True)
    lib = load_library(path) if path.exists() else None
    if lib is None:
        log.info("no library at %s; building it", path)
        lib = experiments.build_offline(cfg, jobs=cfg.jobs)
        save_library(lib, path)
    res = experiments.run_online(cfg, lib, jobs=cfg.jobs)
    write_run_artifacts(res, out, cfg.to_dict(), cfg.seed, cfg.norm_every)
    print(f"final estimate {res.final_estimate.tolist()}, |y(0)| {res.norm[0]:.4g}, |y(T)| {res.norm[-1]:.4g}, cost {res.cost:.6g}")
    return {"final_estimate": res.final_estimate.tolist()}


def cmd_robust_compare(cfg, args, out: Path) -> dict:
    path = Path(args.library) if args.library else None
    lib = load_library(path) if path is not None else None
    res = experiments.robust_compare(cfg, lib, jobs=cfg.jobs)
    costs = {k: res[k] for k in ("optimal", "adaptive", "robust")}
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "costs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feedback", "cost"])
        for k, v in costs.items():
            w.writerow([k, f"{v:.15g}"])
    (out / "costs.json").write_text(json.dumps({"costs": costs, "seed": cfg.seed, "config": cfg.to_dict()}, indent=2))
    for k, v in costs.items():
        print(f"{k:>9s}  {v:.6g}")
    return costs


def cmd_rank_check(cfg, args, out: Path) -> dict:
    report = []
    np.set_printoptions(precision=6, suppress=True, linewidth=140)
    for qb, qc in experiments.rank_check(cfg):
        for name, cert in (("Q_B", qb), ("Q_C", qc)):
            print(f"{name}(t={cert.time:g}): rank {cert.rank}/{cert.matrix.shape[0]}, sigma_min {cert.sigma_min:.6g}")
            print(cert.matrix)
            report.append({
                "name": name, "time": cert.time, "rank": cert.rank, "sigma_min": cert.sigma_min,
                "full_rank": cert.full_rank, "matrix": cert.matrix.tolist(),
            })
    out.mkdir(parents=True, exist_ok=True)
    (out / "rank_check.json").write_text(json.dumps({"certificates": report, "config": cfg.to_dict()}, indent=2))
    return {"full_rank": all(r["full_rank"] for r in report)}


COMMANDS = {
    "offline": cmd_offline,
    "online": cmd_online,
    "robust-compare": cmd_robust_compare,
    "rank-check": cmd_rank_check,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = load_config(args.config)
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.jobs is not None:
            changes["jobs"] = args.jobs
        if changes:
            cfg = cfg.replace(**changes)
        if args.library and args.command == "online" and not Path(args.library).exists():
            raise ConfigError(f"library file {args.library} does not exist")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    try:
        COMMANDS[args.command](cfg, args, out)
    except (ConfigError, UnknownParameter, ValueError) as exc:
        if isinstance(exc, np.linalg.LinAlgError):
            return _numerical(exc, args, cfg, out)
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL as exc:
        return _numerical(exc, args, cfg, out)
    return 0


def _numerical(exc, args, cfg, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    diag = {
        "command": args.command,
        "error": type(exc).__name__,
        "message": str(exc),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "traceback": traceback.format_exc(),
    }
    if isinstance(exc, BlowUpError):
        diag["time"] = exc.time
        diag["norm"] = exc.norm
    (out / "diagnostic.json").write_text(json.dumps(diag, indent=2, default=str))
    print(f"numerical failure: {type(exc).__name__}: {exc} (see {out / 'diagnostic.json'})", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
