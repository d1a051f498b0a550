"""Command-line entry point: ``repaint <subcommand> [options]``."""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Awaitable, Callable

from repaint import __version__
from repaint.backend import Backends
from repaint.bench import (
    HumanScores,
    aggregate,
    compare_judging,
    compare_prompt_modes,
    correlate,
    emit_effectiveness,
    emit_report,
    ingest_human_study,
    load_benchmark_run,
    load_manifest,
    read_report_csv,
    run_benchmark,
)
from repaint.cache import CacheStrategy, FileCache
from repaint.config import load_config, parse_number_list
from repaint.core import RunConfig
from repaint.errors import ConfigError, RepaintError
from repaint.imaging import load_reference
from repaint.iterate import run_regeneration
from repaint.logs import configure_logging
from repaint.mockworld import MockWorld
from repaint.remote import RemoteBackend
from repaint.store import RunStore, make_run_id
from repaint.understand import build_iut, synthesize_initial_prompt

# Configure logger
logger = logging.getLogger(__name__)

REPORT_COLUMNS = {"content": "gpt4_con", "perceptual": "gpt4_per"}


def cache_root(config: RunConfig) -> Path:
    """Cache directory; relative paths are taken below the output directory."""
    path = Path(config.cache_dir)
    return path if path.is_absolute() else Path(config.out_dir) / path


def build_backends(config: RunConfig, cache: CacheStrategy | None = None) -> Backends:
    """Create the backend facade for a run: the mock world or remote endpoints.

    Raises:
        ConfigError: A remote endpoint URL is missing
    """
    cache = cache if cache is not None else FileCache(cache_root(config))
    if config.use_mock:
        world = MockWorld(
            config.mock.world_seed,
            config.mock.miss_rate,
            object_miss_rate=config.mock.object_miss_rate,
        )
        logger.info(f"Using the mock world (seed {config.mock.world_seed})")
        return Backends(
            world.mllm,
            world.t2i,
            world.embedder,
            cache=cache,
            concurrency=config.concurrency,
            repair_attempts=config.repair_attempts,
            costs=config.costs,
        )

    endpoints = config.endpoints
    clients: dict[str, RemoteBackend] = {}

    def client(field: str, url: str | None) -> RemoteBackend:
        if not url:
            env = f"REPAINT_{field.upper()}"
            raise ConfigError(f"backend.{field}", f"not set (use --mock or {env})")
        if url not in clients:
            clients[url] = RemoteBackend(
                url,
                api_key=endpoints.api_key,
                timeout_s=config.timeout_s,
                retries=config.transport_retries,
            )
        return clients[url]

    mllm = client("mllm_url", endpoints.mllm_url)
    return Backends(
        mllm,
        client("t2i_url", endpoints.t2i_url),
        client("embed_url", endpoints.embed_url),
        text=client("text_url", endpoints.effective_text_url),
        cache=cache,
        concurrency=config.concurrency,
        repair_attempts=config.repair_attempts,
        costs=config.costs,
    )


def _print(payload: Any) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


async def _with_backends(
    config: RunConfig, body: Callable[[Backends], Awaitable[int]]
) -> int:
    backends = build_backends(config)
    try:
        return await body(backends)
    finally:
        backends.log_stats()
        await backends.aclose()


def _run_store(args: argparse.Namespace, config: RunConfig, image_id: str) -> RunStore:
    run_id = args.resume or make_run_id(image_id, config.digest())
    return RunStore(Path(config.out_dir) / "runs" / run_id)


async def cmd_understand(args: argparse.Namespace, config: RunConfig) -> int:
    image = load_reference(args.image, caption=args.caption)
    store = _run_store(args, config, image.id)

    async def body(backends: Backends) -> int:
        tree = await build_iut(backends, image, config.limits, store)
        prompt = await synthesize_initial_prompt(
            backends, tree, config.limits, config.prompt_mode, image
        )
        store.write_json("config.json", config.provenance())
        store.write_json("prompt.json", prompt)
        _print(
            {
                "run_dir": str(store.root),
                "iut": str(store.path("iut.json")),
                "objects": len(tree.objects),
                "prompt": prompt.text,
            }
        )
        return 0

    return await _with_backends(config, body)


async def cmd_regen(args: argparse.Namespace, config: RunConfig) -> int:
    image = load_reference(args.image, caption=args.caption)
    store = _run_store(args, config, image.id)

    async def body(backends: Backends) -> int:
        result = await run_regeneration(
            backends, image, config, store, run_id=store.root.name
        )
        scores = result.final_scores
        _print(
            {
                "run_dir": str(store.root),
                "final": result.final.id,
                "final_prompt": result.final.prompt.text,
                "composite": scores.composite,
                "clip_pct": scores.clip_pct,
                "dino_pct": scores.dino_pct,
                "judge_content": scores.judge_content,
                "judge_perceptual": scores.judge_perceptual,
                "global_best": result.global_best.id,
            }
        )
        return 0

    return await _with_backends(config, body)


async def cmd_bench(args: argparse.Namespace, config: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    if args.compare_prompt_modes:
        comparison = await compare_prompt_modes(
            manifest, config, build_backends, config.out_dir
        )
        _print(comparison.model_dump())
        return 0

    async def body(backends: Backends) -> int:
        run = await run_benchmark(
            manifest,
            config,
            backends,
            config.out_dir,
            args.resume,
            direct_judge=args.direct_judge,
        )
        bench_dir = Path(config.out_dir) / "bench" / run.run_id
        report = aggregate(run)
        emit_report([report], bench_dir)
        _print(
            {
                "bench_dir": str(bench_dir),
                "samples": len(run.outcomes),
                "failed": run.failures,
                "degraded": run.degraded,
            }
        )
        return 1 if run.degraded else 0

    return await _with_backends(config, body)


def _human_metric(humans: HumanScores, metric: str) -> dict[str, float]:
    index = 0 if metric == "content" else 1
    return {m: v[index] for m, v in humans.model_means().items()}


async def cmd_report(args: argparse.Namespace, config: RunConfig) -> int:
    reports = []
    for bench_dir in args.bench:
        run = load_benchmark_run(bench_dir)
        reports.append(aggregate(run))
    correlation = None
    humans = ingest_human_study(args.humans) if args.humans else None
    if humans is not None:
        column = {"content": "judge_content", "perceptual": "judge_perceptual"}[args.metric]
        model_metric = {r.model_id: getattr(r.overall, column) for r in reports}
        correlation = correlate(model_metric, _human_metric(humans, args.metric), column)
    out_dir = args.report_out or config.out_dir
    paths = emit_report(reports, out_dir, correlation)
    if all(r.direct_judge is not None for r in reports):
        judging = compare_judging(
            reports, humans.model_means() if humans is not None else None
        )
        paths += emit_effectiveness(judging, out_dir)
    _print({"files": [str(p) for p in paths]})
    return 0


async def cmd_correlate(args: argparse.Namespace, config: RunConfig) -> int:
    column = REPORT_COLUMNS[args.metric]
    model_metric = {m: row[column] for m, row in read_report_csv(args.reports).items()}
    humans = ingest_human_study(args.humans)
    report = correlate(model_metric, _human_metric(humans, args.metric), column)
    out = Path(config.out_dir) / "correlation.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    _print({"spearman": report.spearman, "kendall": report.kendall, "n": report.n})
    return 0


async def cmd_cache(args: argparse.Namespace, config: RunConfig) -> int:
    cache = FileCache(cache_root(config))
    if args.action == "gc":
        removed = cache.gc(args.max_age_days)
        _print({"removed": removed})
    else:
        _print(cache.stats())
    return 0


async def cmd_doctor(args: argparse.Namespace, config: RunConfig) -> int:
    async def body(backends: Backends) -> int:
        report = await backends.doctor()
        _print(report)
        return 0 if report["healthy"] else 1

    return await _with_backends(config, body)


COMMANDS = {
    "understand": cmd_understand,
    "regen": cmd_regen,
    "bench": cmd_bench,
    "report": cmd_report,
    "correlate": cmd_correlate,
    "cache": cmd_cache,
    "doctor": cmd_doctor,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="Path to configuration file")
    common.add_argument("--env", "-e", help="Path to .env file")
    common.add_argument(
        "--mock", action="store_const", const=True, help="Use the in-process mock world"
    )
    common.add_argument("--jobs", type=int, help="Maximum concurrent backend calls")
    common.add_argument("--iterations", type=int, help="Number of iterations T")
    common.add_argument("--fanout", help="Prompts per iteration, e.g. 4,3,3,3")
    common.add_argument("--weights", help="Composite weights, e.g. 0.25,0.25,0.25,0.25")
    common.add_argument("--seed", type=int, help="Base seed")
    common.add_argument("--prompt-mode", choices=["iut", "direct"])
    common.add_argument("--model-id", help="Name of the T2I model under test")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--resume", metavar="RUN_ID", help="Run id to resume")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument(
        "--log-json", action=argparse.BooleanOptionalAction, default=None
    )

    parser = argparse.ArgumentParser(
        prog="repaint", description="Image regeneration evaluation harness"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("understand", "regen"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--image", required=True, help="Reference image file")
        p.add_argument("--caption", help="Fallback caption for the reference")

    p = sub.add_parser("bench", parents=[common])
    p.add_argument("--manifest", required=True, help="Benchmark manifest JSON")
    p.add_argument(
        "--compare-prompt-modes",
        action="store_true",
        help="Run IUT-based and direct initial prompts and write ablation.md/.csv",
    )
    p.add_argument(
        "--direct-judge",
        action="store_true",
        help="Also have the judge rate each final prompt against its own image",
    )

    p = sub.add_parser("report", parents=[common])
    p.add_argument("--bench", nargs="+", required=True, help="Benchmark run directories")
    p.add_argument("--report-out", help="Directory for report files")
    p.add_argument("--humans", help="Human study CSV for the correlation")
    p.add_argument("--metric", choices=["content", "perceptual"], default="perceptual")

    p = sub.add_parser("correlate", parents=[common])
    p.add_argument("--reports", required=True, help="report.csv to correlate")
    p.add_argument("--humans", required=True, help="Human study CSV")
    p.add_argument("--metric", choices=["content", "perceptual"], default="perceptual")

    p = sub.add_parser("cache", parents=[common])
    p.add_argument("action", choices=["stats", "gc"])
    p.add_argument("--max-age-days", type=float, default=30.0)

    sub.add_parser("doctor", parents=[common])
    return parser


def _flags(args: argparse.Namespace) -> dict[str, Any]:
    return {
        "iterations": args.iterations,
        "fanout": parse_number_list(args.fanout, int) if args.fanout else None,
        "weights": parse_number_list(args.weights, float) if args.weights else None,
        "seed": args.seed,
        "jobs": args.jobs,
        "prompt_mode": args.prompt_mode,
        "model_id": args.model_id,
        "mock": args.mock,
        "out": args.out,
        "log_level": args.log_level,
        "log_json": args.log_json,
    }


def dispatch(argv: list[str] | None = None) -> int:
    """Run one subcommand; returns 0 on success, 1 on run errors, 2 on usage errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        config = load_config(args.config, flags=_flags(args), env_file=args.env)
    except ConfigError as e:
        print(f"repaint: configuration error: {e}", file=sys.stderr)
        return 2
    configure_logging(config.log_level, config.log_json)

    try:
        return asyncio.run(COMMANDS[args.command](args, config))
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except RepaintError as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return 1


def main() -> None:
    """Console script entry point."""
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
