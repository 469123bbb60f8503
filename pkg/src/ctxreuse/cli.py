"""Command-line entry point: ``ctxreuse <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .cache_sim import OverCapacityError
from .core import PreconditionError
from .dedup import SessionStore
from .distance import DistanceParams
from .gateway import STATE_FILE, Gateway, load_state, save_state, serve
from .index import ContextIndex
from .pipeline import ExperimentConfig, run_experiment
from .workload import (
    CALIBRATED_CAPACITY,
    PRESETS,
    Interner,
    TraceParseError,
    TraceValidationError,
    WorkloadSpec,
    by_turn,
    generate,
    load_trace,
    save_trace,
    top_share,
    turn_overlaps,
)

DATA_DIR_ENV = "CTXREUSE_DATA_DIR"


def default_data_dir() -> str:
    return os.environ.get(DATA_DIR_ENV, "ctxreuse-data")


def _add_workload_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic workload")
    g.add_argument("--preset", choices=sorted(PRESETS), help="start from a named workload")
    g.add_argument("--n-docs", type=int)
    g.add_argument("--n-sessions", type=int)
    g.add_argument("--turns", type=int, help="turns per session")
    g.add_argument("--k", type=int, help="documents per retrieval")
    g.add_argument("--zipf-s", type=float)
    g.add_argument("--overlap", type=float, help="fraction of each later turn drawn from history")
    g.add_argument("--order-jitter", type=float)
    g.add_argument("--doc-tokens", type=int)
    g.add_argument("--seed", type=int)


_SPEC_FIELDS = {
    "n_docs": "n_docs", "n_sessions": "n_sessions", "turns": "turns_per_session", "k": "k",
    "zipf_s": "zipf_s", "overlap": "intra_session_overlap", "order_jitter": "order_jitter",
    "doc_tokens": "doc_tokens", "seed": "seed",
}


def _spec(args) -> WorkloadSpec:
    base = PRESETS[args.preset].to_dict() if args.preset else {"n_docs": 1000, "n_sessions": 100}
    for arg, name in _SPEC_FIELDS.items():
        value = getattr(args, arg)
        if value is not None:
            base[name] = value
    return WorkloadSpec(**base)


def cmd_gen_workload(args) -> int:
    spec = _spec(args)
    records = generate(spec)
    save_trace(records, args.output)
    print(f"wrote {len(records)} records to {args.output}")
    return 0


def cmd_build_index(args) -> int:
    interner = Interner()
    records = load_trace(args.trace, interner)
    first = by_turn(records)[0] if records else []
    if not first:
        raise PreconditionError(f"{args.trace} has no records")
    index = ContextIndex.build([r.context() for r in first], DistanceParams(args.alpha), register_tokens=False)
    path = Path(args.data_dir) / STATE_FILE
    save_state(path, index, SessionStore(), interner)
    print(f"indexed {len(first)} contexts into {path}")
    return 0


def cmd_run(args) -> int:
    has_spec = args.preset or any(getattr(args, a) is not None for a in _SPEC_FIELDS if a != "seed")
    if args.trace and has_spec:
        raise PreconditionError("give either --trace or synthetic workload flags, not both")
    capacity = args.capacity
    if capacity is None:
        capacity = CALIBRATED_CAPACITY
    cfg = ExperimentConfig(
        workload=None if args.trace else _spec(args),
        trace_path=args.trace,
        seed_trace_path=args.seed_trace,
        capacity_tokens=capacity,
        alpha=args.alpha,
        ordering=not args.no_ordering,
        scheduling=not args.no_scheduling,
        dedup=args.dedup,
        hints=args.hints,
        mode=args.mode,
        scaffold_tokens=args.scaffold_tokens,
        qa_tokens=args.qa_tokens,
        output_dir=args.output,
        breakdown=args.breakdown,
        timings=args.timings,
    )
    result = run_experiment(cfg)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    gateway = Gateway(args.data_dir, ordering=not args.no_ordering, dedup=not args.no_dedup,
                      hints=not args.no_hints, system_prompt=args.system_prompt)
    serve(gateway, args.host, args.port)
    return 0


def cmd_stats(args) -> int:
    if args.trace:
        records = load_trace(args.trace)
        n_docs = len({d for r in records for d in r.retrieved})
        overlaps = turn_overlaps(records)
        out = {
            "records": len(records),
            "sessions": len({r.session_id for r in records}),
            "distinct_docs": n_docs,
            "top20_share": top_share(records, n_docs) if records else 0.0,
            "mean_turn_overlap": sum(overlaps) / len(overlaps) if overlaps else None,
        }
    else:
        path = Path(args.data_dir) / STATE_FILE
        if not path.exists():
            raise FileNotFoundError(f"no index state at {path}; run build-index or serve first")
        index, sessions, _ = load_state(path)
        out = {"index": index.stats(), "sessions": len(sessions)}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxreuse", description="Prefix-cache-aware context reordering and dedup.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-workload", help="write a synthetic NDJSON trace")
    _add_workload_args(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen_workload)

    p = sub.add_parser("build-index", help="cluster a trace's first turn into an index")
    p.add_argument("trace")
    p.add_argument("--alpha", type=float, default=DistanceParams.alpha)
    p.add_argument("--data-dir", default=default_data_dir())
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("run", help="replay a workload through the cache simulator")
    p.add_argument("--trace", help="NDJSON trace instead of a synthetic workload")
    p.add_argument("--seed-trace", help="trace whose contexts seed the index (not prefilled)")
    _add_workload_args(p)
    p.add_argument("--capacity", type=int, help=f"cache budget in tokens (default {CALIBRATED_CAPACITY})")
    p.add_argument("--alpha", type=float, default=DistanceParams.alpha)
    p.add_argument("--no-ordering", action="store_true")
    p.add_argument("--no-scheduling", action="store_true")
    p.add_argument("--dedup", action="store_true")
    p.add_argument("--hints", action="store_true")
    p.add_argument("--mode", choices=("batch", "online"), default="batch")
    p.add_argument("--scaffold-tokens", type=int, default=0)
    p.add_argument("--qa-tokens", type=int, default=0)
    p.add_argument("-o", "--output", help="directory for requests.csv and summary.json")
    p.add_argument("--breakdown", action="store_true", help="add per-stage hit-rate deltas")
    p.add_argument("--timings", action="store_true", help="include wall-clock timings (non-deterministic)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("serve", help="run the NDJSON rewrite gateway")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7878)
    p.add_argument("--data-dir", default=default_data_dir())
    p.add_argument("--system-prompt")
    p.add_argument("--no-ordering", action="store_true")
    p.add_argument("--no-dedup", action="store_true")
    p.add_argument("--no-hints", action="store_true")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("stats", help="summarize a trace or the stored index")
    p.add_argument("--trace")
    p.add_argument("--data-dir", default=default_data_dir())
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except (PreconditionError, OverCapacityError, TraceParseError, TraceValidationError,
            OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(f"ctxreuse {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
