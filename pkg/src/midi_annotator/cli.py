"""Command line entry point: ``midi-annotator {extract,caption,stats,pipeline}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .dataset import PipelineConfig, emit_stats, read_jsonl, run_pipeline, sibling, write_stats
from .llm import LLMEndpointConfig
from .smf import MAX_DURATION_S, MIN_DURATION_S


def _corpus_args(p: argparse.ArgumentParser, captions: bool) -> None:
    p.add_argument("--input", required=True, type=Path, help="directory searched recursively for .mid/.midi files")
    p.add_argument("--output", required=True, type=Path, help="JSONL file for accepted records")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes (default: CPU count)")
    p.add_argument("--min-duration", type=float, default=MIN_DURATION_S, metavar="SECONDS")
    p.add_argument("--max-duration", type=float, default=MAX_DURATION_S, metavar="SECONDS")
    p.add_argument("--merge-table", type=Path, help="program-to-instrument TSV replacing the built-in table")
    p.add_argument("--resume", type=Path, metavar="MANIFEST",
                   help="manifest of finished files; unchanged files listed there are skipped")
    p.add_argument("--stats-threshold", type=int, default=0,
                   help="only show histogram labels counted more often than this")
    if captions:
        p.add_argument("--mode", choices=("template", "llm"), default="template")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--examples", type=Path, help="JSON file of in-context feature/caption pairs")
        p.add_argument("--llm-endpoint", help="chat-completion URL (llm mode)")
        p.add_argument("--llm-model", help="model id sent with each request (llm mode)")
        p.add_argument("--llm-token-env", default="LLM_API_TOKEN",
                       help="environment variable holding the bearer token")
        p.add_argument("--llm-timeout", type=float, default=60.0)
        p.add_argument("--llm-max-attempts", type=int, default=5)
        p.add_argument("--llm-rpm", type=float, default=60.0, help="request ceiling per minute")
        p.add_argument("--llm-concurrency", type=int, default=4)
        p.add_argument("--temperature", type=float, default=0.7)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="midi-annotator", description="Feature extraction and captioning for MIDI corpora.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    _corpus_args(sub.add_parser("extract", help="features only"), captions=False)
    _corpus_args(sub.add_parser("caption", help="features and captions"), captions=True)
    _corpus_args(sub.add_parser("pipeline", help="features, captions and corpus statistics"), captions=True)
    stats = sub.add_parser("stats", help="recompute statistics from a records file")
    stats.add_argument("--input", required=True, type=Path, help="records JSONL")
    stats.add_argument("--output", type=Path, help="base path for .stats.json/.stats.csv (default: the input)")
    stats.add_argument("--stats-threshold", type=int, default=0)
    return parser


def _config(args: argparse.Namespace) -> PipelineConfig:
    captions = args.command != "extract"
    llm = None
    if captions and args.mode == "llm":
        if not args.llm_endpoint or not args.llm_model:
            raise SystemExit("--mode llm needs --llm-endpoint and --llm-model")
        llm = LLMEndpointConfig(
            url=args.llm_endpoint, model=args.llm_model, token_env=args.llm_token_env,
            timeout=args.llm_timeout, temperature=args.temperature, max_attempts=args.llm_max_attempts,
            requests_per_minute=args.llm_rpm, max_concurrency=args.llm_concurrency,
        )
    return PipelineConfig(
        input_dir=args.input, output=args.output, jobs=args.jobs,
        min_duration=args.min_duration, max_duration=args.max_duration,
        captions=captions, mode=getattr(args, "mode", "template"), seed=getattr(args, "seed", 0),
        merge_table=args.merge_table, examples=getattr(args, "examples", None), resume=args.resume,
        write_stats=args.command == "pipeline", stats_threshold=args.stats_threshold, llm=llm,
    )


def _stats(args: argparse.Namespace) -> int:
    records = list(read_jsonl(args.input))
    base = args.output or args.input
    rejects_path = sibling(args.input, ".rejects.jsonl")
    rejects = [r["reason"] for r in read_jsonl(rejects_path)] if rejects_path.exists() else []
    stats = emit_stats(records, rejects)
    write_stats(stats, base, args.stats_threshold)
    sys.stdout.write(stats.render_text(args.stats_threshold))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "stats":
        return _stats(args)
    config = _config(args)
    if config.mode == "llm" and config.llm.token_env not in os.environ:
        logging.getLogger(__name__).warning("%s is not set; requests go out without a bearer token",
                                            config.llm.token_env)
    try:
        report = run_pipeline(config)
    except OSError as exc:  # missing input or unwritable output
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(report)
    return 0


if __name__ == "__main__":
    sys.exit(main())
