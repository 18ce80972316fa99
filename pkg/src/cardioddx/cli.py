"""Command line interface: index, diagnose, evaluate, serve."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import CardioDdxError
from .metrics import build_report, load_gold_jsonl, render_report
from .model import PatientCase, validate_case
from .retrieval import CorpusIndex
from .runtime import RuntimeConfig, build_embedder, build_pipeline, demo_config_path
from .trace import save_trace


def _add_index(sub):
    p = sub.add_parser("index", help="build retrieval indexes")
    kind = p.add_subparsers(dest="index_kind", required=True)

    corpus = kind.add_parser("corpus", help="chunk and index a document corpus")
    corpus.add_argument("--docs", required=True, help="directory of plain-text documents")
    corpus.add_argument("--manifest", required=True, help="JSON mapping filename to source title")
    corpus.add_argument("--out", required=True, help="output index path")
    corpus.add_argument("--window", type=int, default=800)
    corpus.add_argument("--stride", type=int, default=50)

    cases = kind.add_parser("cases", help="embed historical cases for similarity search")
    cases.add_argument("--notes", required=True, help="JSON Lines of {case_key, note_text, confirmed_diagnosis}")
    cases.add_argument("--out", required=True)
    cases.add_argument("--dimension", type=int, default=256, help="hashing embedder dimension")
    cases.add_argument("--exclude", default="", help="comma-separated case keys to leave out")


def _add_diagnose(sub):
    p = sub.add_parser("diagnose", help="run the pipeline on one case file")
    p.add_argument("--case", required=True, help="PatientCase JSON file")
    p.add_argument("--config", default=None, help="runtime configuration (default: packaged demo)")
    p.add_argument("--out", default="-", help="result JSON path, '-' for stdout")
    p.add_argument("--trace", default=None, help="also write the trace as JSON Lines")


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="score ranked predictions against gold annotations")
    p.add_argument("--predictions", required=True, help="JSON mapping case_id to ranked label list")
    p.add_argument("--gold", required=True, help="gold annotations, JSON Lines")
    p.add_argument("--out", default=None, help="write the report JSON here as well")
    p.add_argument("--seed", type=int, default=20240501)
    p.add_argument("--resamples", type=int, default=10000)


def _add_serve(sub):
    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--config", default=None, help="runtime configuration (default: packaged demo)")
    p.add_argument("--store", required=True, help="document store directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cardioddx", description="staged differential diagnosis pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_index(sub)
    _add_diagnose(sub)
    _add_evaluate(sub)
    _add_serve(sub)
    return parser


def _cmd_index(args) -> int:
    if args.index_kind == "corpus":
        index = CorpusIndex.build(args.docs, args.manifest, window=args.window, stride=args.stride)
        index.save(args.out)
        print(f"indexed {len(index.chunks)} chunks from {len(index.titles)} documents -> {args.out}")
        return 0
    from .knowledge import build_case_index
    from .retrieval import HashingEmbedder
    from .runtime import _load_case_notes

    embedder = HashingEmbedder(dimension=args.dimension)
    exclusions = [k for k in args.exclude.split(",") if k]
    index = build_case_index(_load_case_notes(args.notes), embedder, exclusion_keys=exclusions)
    index.save(args.out)
    print(f"indexed {len(index.records)} cases -> {args.out}")
    return 0


def _load_runtime(config_path) -> RuntimeConfig:
    return RuntimeConfig.load(config_path if config_path else demo_config_path())


def _cmd_diagnose(args) -> int:
    cfg = _load_runtime(args.config)
    with open(args.case, "r", encoding="utf-8") as fh:
        case = PatientCase.from_json_dict(json.load(fh))
    violations = validate_case(case)
    if violations:
        for v in violations:
            print(f"invalid case: {v.field}: {v.message}", file=sys.stderr)
        return 2
    pipeline = build_pipeline(cfg)
    result = pipeline.run(case)
    payload = result.to_canonical_json()
    if args.out == "-":
        print(payload)
    else:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
        print(f"result -> {args.out}")
    if args.trace:
        save_trace(args.trace, result.trace)
        print(f"trace -> {args.trace}")
    return 0


def _cmd_evaluate(args) -> int:
    with open(args.predictions, "r", encoding="utf-8") as fh:
        predictions = json.load(fh)
    gold = load_gold_jsonl(args.gold)
    report = build_report(predictions, gold, seed=args.seed, resamples=args.resamples)
    print(render_report(report))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        print(f"report -> {args.out}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import DocumentStore, create_app

    cfg = _load_runtime(args.config)
    pipeline = build_pipeline(cfg)
    app = create_app(pipeline, DocumentStore(args.store))
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "index": _cmd_index,
        "diagnose": _cmd_diagnose,
        "evaluate": _cmd_evaluate,
        "serve": _cmd_serve,
    }
    try:
        return handlers[args.command](args)
    except CardioDdxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
