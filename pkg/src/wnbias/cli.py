"""``wnbias`` command line: run, analyze, prune, presets."""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

from .checks import CheckError, analyze_run, find_runs, prune_run, write_report
from .config import ConfigError, ExperimentConfig
from .runner import run_experiment, variant_dir
from .training import DivergenceError

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


def preset_names() -> list[str]:
    root = resources.files("wnbias") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> ExperimentConfig:
    path = resources.files("wnbias") / "presets" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return ExperimentConfig.from_yaml(path.read_text())


def _resolve_config(args) -> ExperimentConfig:
    if bool(args.config) == bool(args.preset):
        raise ConfigError("give exactly one of --config or --preset")
    cfg = ExperimentConfig.load(args.config) if args.config else load_preset(args.preset)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
        if cfg.sweep and "seed" in cfg.sweep:
            sweep = dict(cfg.sweep)
            del sweep["seed"]
            changes["sweep"] = sweep or None
    if args.max_steps is not None:
        changes["stop.max_steps"] = args.max_steps
    return cfg.with_overrides(**changes) if changes else cfg


def _run_one(job):
    cfg_yaml, run_dir, resume = job
    cfg = ExperimentConfig.from_yaml(cfg_yaml)
    try:
        out = run_experiment(cfg, run_dir, resume=resume)
    except DivergenceError as exc:
        return cfg.name, "diverged", str(exc)
    return cfg.name, "ok", f"{out.stopped} after {out.steps} steps, log-loss {out.final_log_loss:.4g}"


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    root = Path(args.out or cfg.output or Path("runs") / cfg.name)
    jobs = [(v.to_yaml(), str(variant_dir(root, cfg, v)), not args.no_resume) for v in cfg.expand()]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    diverged = False
    for name, status, msg in results:
        print(f"{name}: {status}: {msg}")
        diverged |= status == "diverged"
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_analyze(args) -> int:
    failed = False
    for run in find_runs(args.run_dir):
        report = analyze_run(run, args.check, args.expect_survivors)
        write_report(run / "analysis.json", report)
        for name, res in report.items():
            print(f"{run}: {name}: {'pass' if res['pass'] else 'FAIL'}")
            failed |= not res["pass"]
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_prune(args) -> int:
    fractions = [float(f) for f in args.fractions.split(",")]
    for run in find_runs(args.run_dir):
        print(prune_run(run, fractions))
    return EXIT_OK


def cmd_presets(args) -> int:
    if args.action == "list":
        for name in preset_names():
            print(f"{name:14s} {load_preset(name).description}")
    else:
        if not args.name:
            raise ConfigError("presets show needs a preset name")
        print(load_preset(args.name).to_yaml(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wnbias", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one config (or every variant of a sweep)")
    r.add_argument("--config", help="YAML experiment config")
    r.add_argument("--preset", help="name of a bundled preset")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--out", help="output directory")
    r.add_argument("--jobs", type=int, default=1, help="parallel workers for sweeps")
    r.add_argument("--max-steps", type=int, help="override the step budget")
    r.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="evaluate checks on a run directory")
    a.add_argument("run_dir")
    a.add_argument("--check", action="append", required=True,
                   help="direction, margin, a5, theorem2, sparsity, prop2, corollary1, rate")
    a.add_argument("--expect-survivors", type=int, help="exact survivor count for 'sparsity'")
    a.set_defaults(func=cmd_analyze)

    q = sub.add_parser("prune", help="norm-growth pruning curve of a trained run")
    q.add_argument("run_dir")
    q.add_argument("--fractions", default="0,0.25,0.5,0.75,0.9,1")
    q.set_defaults(func=cmd_prune)

    s = sub.add_parser("presets", help="list or show bundled presets")
    s.add_argument("action", choices=["list", "show"])
    s.add_argument("name", nargs="?")
    s.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, CheckError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
