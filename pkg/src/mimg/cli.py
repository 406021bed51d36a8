"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 stage failure, 4 empty output
(every candidate filtered away).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import TARGET_TOKEN_TIERS, ConfigError, PipelineConfig
from .gateway import render_usage_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_EMPTY = 4


def _parse_target_tokens(value: str) -> int:
    if value in TARGET_TOKEN_TIERS:
        return TARGET_TOKEN_TIERS[value]
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected an integer or one of {sorted(TARGET_TOKEN_TIERS)}, got {value!r}"
        ) from None


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="pipeline config YAML")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument(
        "--target-tokens",
        type=_parse_target_tokens,
        default=None,
        metavar="N|4k|8k|16k|32k|128k",
        help="override the padded context length",
    )
    parser.add_argument("--mock", action="store_true", help="force the offline mock backend")
    parser.add_argument("--output-dir", default=None, help="override the output directory")


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    config = PipelineConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.target_tokens is not None:
        config.assembly.target_tokens = args.target_tokens
    if args.mock:
        config.backend.mock = True
    if args.output_dir is not None:
        config.output_dir = args.output_dir
    return config.validate()


def _print_report(report: dict) -> None:
    print("counts:")
    for key in sorted(report.get("counts", {})):
        print(f"  {key}: {report['counts'][key]}")
    if report.get("retention") is not None:
        print(f"retention: {report['retention']:.4f}")
    if report.get("avg_quality") is not None:
        print(f"avg_quality: {report['avg_quality']:.4f}")
    if report.get("quality_histogram"):
        print(f"quality_histogram: {json.dumps(report['quality_histogram'])}")
    if report.get("hop_histogram"):
        print(f"hop_histogram: {json.dumps(report['hop_histogram'])}")
    if report.get("wall_clock"):
        total = sum(report["wall_clock"].values())
        print(f"wall_clock: total {total:.2f}s " + json.dumps(
            {k: round(v, 3) for k, v in report["wall_clock"].items()}
        ))
    if report.get("ledger"):
        print("token usage:")
        print(render_usage_report(report["ledger"]))


def _cmd_run(args: argparse.Namespace) -> int:
    config = _load_config(args)
    dataset_path, report = pipeline.run_pipeline(config)
    _print_report(report)
    print(f"dataset: {dataset_path}")
    if report["counts"].get("emitted", 0) == 0:
        logger.warning("no samples survived filtering")
        return EXIT_EMPTY
    return EXIT_OK


def _cmd_stage(name: str, args: argparse.Namespace) -> int:
    config = _load_config(args)
    counts = pipeline.run_stage(name, config)
    for key in sorted(counts):
        print(f"{key}: {counts[key]}")
    return EXIT_OK


def _cmd_stats(args: argparse.Namespace) -> int:
    if args.config:
        config = _load_config(args)
        report = pipeline.build_report(config)
    else:
        if not (args.dataset and args.verdicts):
            print("stats needs either --config or both --dataset and --verdicts", file=sys.stderr)
            return EXIT_CONFIG
        report = pipeline.quality_report(args.dataset, args.verdicts)
    _print_report(report)
    return EXIT_OK


def _cmd_judge(args: argparse.Namespace) -> int:
    config = _load_config(args)
    gateway = pipeline.build_gateway(config)
    short, consistent = pipeline.judge_consistency(
        args.question, args.prediction, args.reference, gateway
    )
    print(json.dumps({"short_pred_answer": short, "predict_consistency": consistent}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mimg",
        description="Synthesize long-context multi-hop instruction-tuning data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every stage and emit the dataset")
    _add_config_options(run)

    for stage in pipeline.STAGES:
        stage_parser = sub.add_parser(stage, help=f"run the {stage} stage")
        _add_config_options(stage_parser)

    stats = sub.add_parser("stats", help="render the run report")
    stats.add_argument("--config", default=None, help="pipeline config YAML")
    stats.add_argument("--seed", type=int, default=None)
    stats.add_argument("--target-tokens", type=_parse_target_tokens, default=None)
    stats.add_argument("--mock", action="store_true")
    stats.add_argument("--output-dir", default=None)
    stats.add_argument("--dataset", default=None, help="dataset JSONL path")
    stats.add_argument("--verdicts", default=None, help="verdicts JSONL path")

    judge = sub.add_parser("judge", help="consistency-judge a prediction against a reference")
    _add_config_options(judge)
    judge.add_argument("--question", required=True)
    judge.add_argument("--prediction", required=True)
    judge.add_argument("--reference", required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "stats":
            return _cmd_stats(args)
        if args.command == "judge":
            return _cmd_judge(args)
        return _cmd_stage(args.command, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.StageError as exc:
        print(f"{exc}", file=sys.stderr)
        return EXIT_STAGE
    except FileNotFoundError as exc:
        print(f"{exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
