"""Command-line entry point: ``python3 -m leopard <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .harness import (ConfigError, ExperimentConfig, build_streams, diagnose, label_proportion_sweep,
                      run_baseline_ae_kmeans, run_experiment)
from .learner import Ablation
from .numerics import NumericError
from .stream import generate_synthetic_streams, write_stream_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--out", help="output directory")
    common.add_argument("--ablation", choices=sorted(Ablation.PRESETS), help="ablation preset")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="leopard", description="Streaming cross-domain classification")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write synthetic stream CSVs")
    sub.add_parser("run", parents=[common], help="prequential LEOPARD experiment")
    sub.add_parser("baseline", parents=[common], help="AE+KMeans baseline")
    sw = sub.add_parser("sweep", parents=[common], help="label-proportion sweep")
    sw.add_argument("--proportions", type=float, nargs="+", default=[0.05, 0.10, 0.30])
    sub.add_parser("diagnose", parents=[common], help="H-divergence before/after adaptation")
    return p


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg = cfg.with_updates(n_runs=1, seeds=[args.seed])
    if args.ablation:
        cfg = cfg.with_updates(ablation=Ablation.preset(args.ablation))
    if args.out:
        cfg = cfg.with_updates(output_dir=args.out)
    return cfg


def _generate(cfg: ExperimentConfig, out: Path) -> dict:
    written = []
    for seed in cfg.seeds:
        stream_cfg = dataclasses.replace(cfg.stream, rng_seed=seed)
        if stream_cfg.source_csv:
            pre, src, tgt = build_streams(stream_cfg, seed)
        else:
            pre, src, tgt = generate_synthetic_streams(stream_cfg)
        for name, batches in (("prerecorded", [pre]), ("source", src), ("target", tgt)):
            path = out / f"seed{seed}_{name}.csv"
            write_stream_csv(batches, path)
            written.append(str(path))
    return {"files": written}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        if args.command in ("generate", "diagnose") and cfg.output_dir is None:
            raise ConfigError("--out is required")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "generate":
            out = Path(cfg.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            result = _generate(cfg, out)
        elif args.command == "run":
            result = run_experiment(cfg)
        elif args.command == "baseline":
            result = run_baseline_ae_kmeans(cfg)
        elif args.command == "sweep":
            result = label_proportion_sweep(cfg, args.proportions)
        else:
            result = diagnose(cfg, args.seed)
            out = Path(cfg.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "diagnose.json").write_text(json.dumps(result, indent=2), encoding="utf-8")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, NumericError, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if isinstance(result, dict) and "traces" in result:
        result = {k: v for k, v in result.items() if k != "traces"}
    print(json.dumps(result, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
