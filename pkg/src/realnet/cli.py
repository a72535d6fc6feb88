"""Command-line entry point: one subcommand per pipeline stage plus an end-to-end benchmark."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import pipeline as pl
from .config import ConfigError, load_config, parse_set
from .engine import set_deterministic
from .metrics import UndefinedMetricError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("realnet")


def _per_group(cfg, fn):
    out = []
    for cats in pl.groups(cfg):
        out.append(fn(cfg, pl.load_train(cfg, cats)))
    return out


def cmd_train_diffusion(cfg, args):
    for d in _per_group(cfg, pl.stage_train_diffusion):
        print(f"diffusion checkpoint: {d / 'model.params'}")


def cmd_synth(cfg, args):
    for d in _per_group(cfg, pl.stage_synth):
        print(f"donor pool: {d}")


def cmd_afs(cfg, args):
    for d in _per_group(cfg, pl.stage_afs):
        print(f"AFS cache: {d / 'afs_cache.json'}")


def cmd_train(cfg, args):
    for d in _per_group(cfg, pl.stage_train):
        print(f"checkpoint: {d / 'head.params'}")


def cmd_eval(cfg, args):
    reports = []
    for cats in pl.groups(cfg):
        report, out = pl.stage_eval(cfg, pl.load_train(cfg, cats))
        print(f"report: {out / 'report.json'}")
        reports.append(report)
    print(pl.merge_reports(reports, cfg).table())


def cmd_benchmark(cfg, args):
    from .toydata import write_benchmark

    root = Path(cfg.dataset_root)
    for cat in cfg.categories:
        if not (root / cat / "train").is_dir():
            if not args.generate:
                raise pl.DataError(f"dataset not found: {root / cat} (pass --generate for the toy benchmark)")
            write_benchmark(root, seed=args.data_seed, size=cfg.image_size, category=cat)
            print(f"generated toy benchmark at {root / cat}")
    t0 = time.time()
    report = pl.run_all(cfg)
    Path(cfg.work_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.work_dir) / "benchmark_report.json").write_text(report.to_json())
    print(report.table())
    print(f"total time {time.time() - t0:.1f}s")


COMMANDS = {
    "train-diffusion": (cmd_train_diffusion, "train the diffusion model on normal images"),
    "synth": (cmd_synth, "sample the anomaly donor pool with strength-controlled diffusion"),
    "afs": (cmd_afs, "rank feature channels and write the selection cache"),
    "train": (cmd_train, "train reconstructors and discriminator jointly"),
    "eval": (cmd_eval, "score the test split and export metrics and maps"),
    "benchmark": (cmd_benchmark, "run every stage end to end"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="realnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON configuration file")
        p.add_argument("--seed", type=int, help="override the pipeline seed")
        p.add_argument("--workers", type=int, help="loader threads (results do not depend on it)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration field; repeatable")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "benchmark":
            p.add_argument("--generate", action="store_true", help="write the toy benchmark if it is missing")
            p.add_argument("--data-seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        overrides = parse_set(args.overrides)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.workers is not None:
            overrides["workers"] = args.workers
        cfg = load_config(args.config, overrides)
        set_deterministic(cfg.threads)
        COMMANDS[args.command][0](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (pl.MissingArtifactError, FileNotFoundError) as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (pl.DataError, UndefinedMetricError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
