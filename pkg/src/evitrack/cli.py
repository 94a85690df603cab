"""Command-line entry point: ``evitrack {gen-data,run,verify,summarize}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig
from .exact_filter import ExhaustedAttempts, generate_dataset, load_dataset, save_dataset
from .harness import (
    EXPERIMENTS,
    Runner,
    code_version,
    eval_settings,
    experiment_spec,
    summarize_dir,
    write_result,
)
from .oracles import CHECKS, format_table, run_checks

log = logging.getLogger("evitrack")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _default_jobs() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evitrack", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-c", "--config", help="TOML run configuration (defaults: the fixed experimental setup)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="simulate and DD-bin the evaluation dataset")
    g.add_argument("--per-bin", type=int, help="trajectories per DD bin (overrides config)")
    g.add_argument("--out", help="dataset directory (default: <output.dir>/dataset)")
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    r = sub.add_parser("run", help="run an experiment on a generated dataset")
    r.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    r.add_argument("--seeds", type=int, nargs="+", help="inference seeds (overrides config)")
    r.add_argument("--jobs", type=int, default=_default_jobs())
    r.add_argument("--dataset", help="dataset directory (default: <output.dir>/dataset)")
    r.add_argument("--out", help="results directory (default: <output.dir>)")

    v = sub.add_parser("verify", help="run the built-in oracle checks")
    v.add_argument("--check", action="append", choices=sorted(CHECKS),
                   help="run only this family (repeatable)")

    s = sub.add_parser("summarize", help="re-aggregate the record files of an experiment directory")
    s.add_argument("directory")
    return p


def _dataset_dir(cfg: RunConfig, arg) -> Path:
    return Path(arg) if arg else cfg.output_dir / "dataset"


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _dataset_dir(cfg, args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ValidationError(f"{out} already exists; pass --force to overwrite")
        shutil.rmtree(out)
    ds_cfg = cfg.raw["dataset"]
    per_bin = args.per_bin if args.per_bin is not None else ds_cfg["per_bin"]
    if per_bin < 1:
        raise ValidationError("--per-bin must be >= 1")
    t0 = time.time()
    try:
        ds = generate_dataset(cfg.params, cfg.bins, per_bin, int(ds_cfg["root_seed"]), float(ds_cfg["tau"]),
                              cfg.grid, int(ds_cfg["max_attempts"]), int(ds_cfg["batch_size"]))
    except ExhaustedAttempts as exc:
        print(f"dataset generation failed: {exc}", file=sys.stderr)
        print(json.dumps(exc.stats, indent=2), file=sys.stderr)
        return EXIT_RUNTIME
    save_dataset(ds, out)
    (out / "config.toml").write_text(cfg.to_toml())
    counts = {b: len(ds.by_bin(b)) for b in cfg.bins.labels}
    print(f"wrote {len(ds.trajectories)} trajectories to {out} {counts} "
          f"(simulated {ds.stats['simulated']}, rejected {ds.stats['rejected_fraction']:.3f}) "
          f"in {time.time() - t0:.1f}s")
    return EXIT_OK


def cmd_run(cfg: RunConfig, args) -> int:
    ds_dir = _dataset_dir(cfg, args.dataset)
    if not (ds_dir / "manifest.json").exists():
        print(f"no dataset at {ds_dir}; run gen-data first", file=sys.stderr)
        return EXIT_RUNTIME
    if args.jobs < 1:
        raise ValidationError("--jobs must be >= 1")
    seeds = args.seeds if args.seeds else cfg.seeds
    if len(set(seeds)) != len(seeds):
        raise ValidationError("--seeds must be distinct")
    dataset = load_dataset(ds_dir)
    if dataset.params != cfg.params:
        raise ValidationError(f"dataset at {ds_dir} was generated with different world-model parameters")
    spec = experiment_spec(args.experiment, cfg)
    t0 = time.time()
    result = Runner(dataset, seeds, eval_settings(cfg), args.jobs).run(spec)
    manifest = {
        "config": cfg.resolved(),
        "config_source": cfg.source,
        "seeds": list(seeds),
        "dataset": str(ds_dir),
        "n_trajectories": len(dataset.trajectories),
        "code_version": code_version(),
    }
    out = write_result(result, Path(args.out) if args.out else cfg.output_dir, manifest)
    print(f"{args.experiment}: {len(spec.configs)} result sets, "
          f"{len(seeds) * len(dataset.trajectories)} runs each, {time.time() - t0:.1f}s -> {out}")
    _print_headline(result)
    return EXIT_OK


def _print_headline(result) -> None:
    rows = [s for s in result.summaries if s.bin == "all" and s.metric in ("ba_filt", "pll_h1")]
    for s in rows:
        print(f"  {s.method:<28} {s.metric:<8} pre {s.pre_mean:9.3f} +- {s.pre_std:6.3f}   "
              f"post {s.post_mean:9.3f} +- {s.post_std:6.3f}")


def cmd_verify(cfg: RunConfig, args) -> int:
    results = run_checks(args.check, params=cfg.params, sigma_bg=cfg.sigma_bg,
                         root_seed=int(cfg.raw["dataset"]["root_seed"]))
    print(format_table(results))
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_summarize(cfg: RunConfig, args) -> int:
    d = Path(args.directory)
    if not (d / "manifest.json").exists():
        print(f"{d} has no manifest.json", file=sys.stderr)
        return EXIT_RUNTIME
    result = summarize_dir(d)
    print(f"re-aggregated {len(result.records)} record files in {d}")
    _print_headline(result)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "run": cmd_run, "verify": cmd_verify, "summarize": cmd_summarize}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](cfg, args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failures map to a stable exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
