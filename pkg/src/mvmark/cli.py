"""Command-line interface.

Subcommands mirror the pipeline stages: individual stages run against the
same output directory and manifest as the full `run` command, so a pipeline
can be driven stage by stage or end to end.

The environment variable MVMARK_CACHE sets the cache directory for
downloaded datasets (the builtin sets need no download).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import yaml

from .config import ExperimentConfig, example_config, load_config
from .errors import MvmarkError
from .multiview import TransferConfig, run_transfer_experiment, transfer_rate_grid
from .pipeline import PipelineError, RunManifest, emit_report, run_pipeline

CACHE_ENV = "MVMARK_CACHE"


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "mvmark"))


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if overrides:
        import dataclasses
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _run_stages(cfg: ExperimentConfig, upto: str | None):
    """Run the pipeline; `upto` limits work by truncating later stages."""
    import dataclasses
    if upto == "trigger":
        cfg = dataclasses.replace(cfg, attacks=())
    elif upto in ("source", "benign"):
        cfg = dataclasses.replace(cfg, attacks=())
    return run_pipeline(cfg)


def cmd_run(args) -> int:
    manifest = run_pipeline(_load(args))
    print(f"run complete: {manifest.dir / 'results.tsv'}")
    return 0


def cmd_stage(stage: str):
    def run(args) -> int:
        cfg = _load(args)
        import dataclasses
        if stage in ("select-trigger", "train-source", "train-benign"):
            cfg = dataclasses.replace(cfg, attacks=())
        manifest = run_pipeline(cfg)
        print(f"stage artifacts recorded in {manifest.path}")
        return 0
    return run


def cmd_attack(args) -> int:
    cfg = _load(args)
    if args.only:
        import dataclasses
        keep = tuple(a for a in cfg.attacks if a.name in set(args.only))
        if not keep:
            print(f"no configured attack named {args.only}", file=sys.stderr)
            return 2
        cfg = dataclasses.replace(cfg, attacks=keep)
    manifest = run_pipeline(cfg)
    print(f"attack artifacts recorded in {manifest.path}")
    return 0


def cmd_verify(args) -> int:
    manifest = run_pipeline(_load(args))
    for name, info in sorted(manifest.doc["stages"].items()):
        if name.startswith("verify:"):
            print(f"{name[7:]}: trigger_acc={info['trigger_acc']:.4f} "
                  f"p={info['p_value']:.3g} owned={info['owned']}")
    return 0


def cmd_report(args) -> int:
    cfg = _load(args)
    manifest = RunManifest(cfg.output_dir, cfg)
    emit_report(manifest, cfg)
    print((manifest.dir / "summary.txt").read_text(), end="")
    return 0


def cmd_simulate_multiview(args) -> int:
    out = Path(args.out or "runs/multiview")
    out.mkdir(parents=True, exist_ok=True)
    base = TransferConfig(n_seeds=args.seeds, seed=args.seed or 0)
    if args.grid:
        rates = transfer_rate_grid(base)
        path = out / "transfer_grid.tsv"
        with open(path, "w", encoding="utf-8") as f:
            f.write("w0\ttransfer_rate\n")
            for w0, rate in sorted(rates.items()):
                f.write(f"{w0}\t{rate}\n")
                print(f"w0={w0}: transfer rate {rate:.2f}")
        print(f"wrote {path}")
    else:
        import dataclasses
        cfg = dataclasses.replace(base, trigger_weights=(args.w0, 1.0 - args.w0))
        report = run_transfer_experiment(cfg)
        path = out / f"transfer_w0_{args.w0}.tsv"
        report.write(path)
        print(f"trigger weights {cfg.trigger_weights}: "
              f"transfer rate {report.transfer_rate:.2f} "
              f"over {cfg.n_seeds} seeds; wrote {path}")
    return 0


def cmd_init_config(args) -> int:
    doc = example_config(seed=args.seed or 0)
    text = yaml.safe_dump(doc, sort_keys=False)
    if args.config:
        Path(args.config).write_text(text)
        print(f"wrote {args.config}")
    else:
        print(text, end="")
    return 0


def _add_common(p):
    p.add_argument("--config", help="experiment config (YAML)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the config output_dir")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvmark", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    for name, helptext, fn in [
        ("run", "run the full pipeline", cmd_run),
        ("select-trigger", "train the selector and build the trigger set",
         cmd_stage("select-trigger")),
        ("train-source", "train the watermarked source model",
         cmd_stage("train-source")),
        ("train-benign", "train the benign reference model",
         cmd_stage("train-benign")),
        ("verify", "verify ownership of all attacked models", cmd_verify),
    ]:
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.set_defaults(fn=fn, needs_config=True)

    p = sub.add_parser("attack", help="run configured attacks against the source")
    _add_common(p)
    p.add_argument("--only", nargs="*", help="attack names to run (default: all)")
    p.set_defaults(fn=cmd_attack, needs_config=True)

    p = sub.add_parser("report", help="emit results table/summary from a manifest")
    _add_common(p)
    p.set_defaults(fn=cmd_report, needs_config=True)

    p = sub.add_parser("simulate-multiview",
                       help="linear multi-view transfer experiment")
    p.add_argument("--w0", type=float, default=0.8,
                   help="class-0 trigger weight (w1 = 1 - w0)")
    p.add_argument("--grid", action="store_true",
                   help="sweep w0 over {0, 0.2, 0.5, 0.8, 1.0}")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_simulate_multiview, needs_config=False)

    p = sub.add_parser("init-config", help="print or write an example config")
    p.add_argument("--config", help="path to write (default: stdout)")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_init_config, needs_config=False)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "needs_config", False) and not args.config:
        print("error: --config is required for this command", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except PipelineError as e:
        print(f"error in stage {e.stage!r}: {e.cause}", file=sys.stderr)
        return 1
    except MvmarkError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
