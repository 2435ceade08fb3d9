"""Command-line entry point.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import MODES, EngineConfig, load_config
from .errors import MultiRagError
from .evalbench import (
    PerturbationSpec,
    apply_perturbation,
    format_table,
    load_dataset,
    run_suite,
    sweep_alpha,
)
from .extract import extract_store, load_prompts
from .graph import KnowledgeGraph
from .homology import HomologyPartition, match_homologous
from .ingest import RecordStore, default_adapters, fuse_sources, load_manifest
from .io import atomic_write_json, atomic_write_text
from .pipeline import Engine, answer_query, load_history, make_client
from .text import normalize_alias_table

log = logging.getLogger("multirag")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--workers", type=int, help="worker pool size (default: logical cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="multirag", parents=[common],
                                     description="Trust-aware multi-source retrieval engine")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common], help="normalize source files into a record store")
    p.add_argument("--manifest", required=True, help="directory holding manifest.json")
    p.add_argument("--out", required=True, help="output store directory")
    p.add_argument("--on-error", choices=("fail", "skip"), default="fail")
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--chunk-overlap", type=int)

    p = sub.add_parser("build", parents=[common], help="extract a knowledge graph from a store")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True, help="graph dump (JSONL)")
    p.add_argument("--mock-fixtures", help="directory with mock.json")
    p.add_argument("--prompts", help="directory of .prompt files")

    p = sub.add_parser("match", parents=[common], help="partition a graph into homologous subgraphs")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True, help="partition file (JSON)")
    p.add_argument("--min-sources", type=int)
    p.add_argument("--aliases", help="predicate alias JSON (surface -> canonical)")

    p = sub.add_parser("query", parents=[common], help="answer one question")
    p.add_argument("--store", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--q", required=True, help="question text")
    p.add_argument("--mock-fixtures")
    p.add_argument("--history", help="source history JSON")
    p.add_argument("--aliases", help="predicate alias JSON (surface -> canonical)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--json", action="store_true", help="print the full answer as JSON")
    p.add_argument("--out", help="also write the JSON answer here")

    p = sub.add_parser("eval", parents=[common], help="run a dataset's query suite")
    p.add_argument("--dataset", required=True, help="bundled dataset name or directory")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--perturb", choices=("mask_relations", "duplicate_shuffle"))
    p.add_argument("--rate", type=float, default=0.0)
    p.add_argument("--out", required=True, help="report file (JSON)")

    p = sub.add_parser("perturb", parents=[common], help="write a perturbed copy of a graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--kind", required=True, choices=("mask_relations", "duplicate_shuffle"))
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--dataset", help="dataset whose gold answers are protected from masking")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep-alpha", parents=[common], help="F1 and query time across alpha values")
    p.add_argument("--dataset", required=True)
    p.add_argument("--alphas", default="0,0.25,0.5,0.75,1", help="comma-separated values in [0, 1]")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", required=True, help="table file (TSV); JSON if it ends in .json")
    return parser


def _config(args, **extra) -> EngineConfig:
    overrides = {"seed": args.seed, "workers": args.workers}
    overrides.update(extra)
    return load_config(args.config, overrides)


def _aliases(args, cfg: EngineConfig) -> EngineConfig:
    """Merge an --aliases file under any aliases already in the config."""
    if not getattr(args, "aliases", None):
        return cfg
    table = json.loads(Path(args.aliases).read_text(encoding="utf-8"))
    if not isinstance(table, dict):
        raise MultiRagError(f"{args.aliases}: alias file must hold a JSON object")
    table.update(cfg.predicate_aliases)
    return cfg.with_overrides({"predicate_aliases": table})


def _workers(cfg: EngineConfig, args) -> int:
    return cfg.workers or os.cpu_count() or 1


def cmd_ingest(args) -> int:
    cfg = _config(args, chunk_size=args.chunk_size, chunk_overlap=args.chunk_overlap)
    docs = load_manifest(args.manifest)
    store = fuse_sources([(None, docs)], on_error=args.on_error, workers=_workers(cfg, args),
                         adapters=default_adapters(cfg.chunk_size, cfg.chunk_overlap))
    path = store.save(args.out)
    print(f"{len(store)} records -> {path}")
    return 0


def cmd_build(args) -> int:
    cfg = _config(args, fixtures=args.mock_fixtures)
    store = RecordStore.load(args.store)
    needs_client = cfg.fixtures or cfg.client_mode == "live"
    client = make_client(cfg) if needs_client else None
    kg = extract_store(store, client, load_prompts(args.prompts),
                       promote_threshold=cfg.promote_threshold)
    kg.save(args.out)
    print(f"{len(kg.entities)} entities, {len(kg)} triples -> {args.out}")
    return 0


def cmd_match(args) -> int:
    cfg = _aliases(args, _config(args, min_sources=args.min_sources))
    kg = KnowledgeGraph.load(args.graph)
    part = match_homologous(kg, cfg.min_sources, normalize_alias_table(dict(cfg.predicate_aliases)))
    part.save(args.out)
    print(f"{len(part.subgraphs)} homologous subgraphs, {len(part.isolated)} isolated -> {args.out}")
    return 0


def cmd_query(args) -> int:
    cfg = _aliases(args, _config(args, fixtures=args.mock_fixtures, mode=args.mode))
    engine = Engine(RecordStore.load(args.store), KnowledgeGraph.load(args.graph),
                    HomologyPartition.load(args.partition), load_history(args.history, cfg),
                    make_client(cfg), cfg)
    ans = answer_query(args.q, engine)
    if args.out:
        atomic_write_text(args.out, ans.dumps() + "\n")
    print(ans.dumps() if args.json else ans.text)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args, mode=args.mode)
    ds = load_dataset(args.dataset)
    spec = PerturbationSpec(args.perturb, args.rate, cfg.seed) if args.perturb else None
    rep = run_suite(ds, cfg, cfg.mode, perturbation=spec)
    rep.save(args.out)
    agg = rep.aggregate
    print(f"{ds.name} mode={rep.mode} F1={agg.f1:.4f} P={agg.precision:.4f} R={agg.recall:.4f} "
          f"failed={len(rep.failed)} -> {args.out}")
    return 0


def cmd_perturb(args) -> int:
    cfg = _config(args)
    kg = KnowledgeGraph.load(args.graph)
    spec = PerturbationSpec(args.kind, args.rate, cfg.seed)
    cases, aliases = (), dict(cfg.predicate_aliases)
    if args.dataset:
        ds = load_dataset(args.dataset)
        cases = ds.cases
        aliases.update(ds.predicate_aliases)
    out = apply_perturbation(kg, spec, cases, aliases)
    out.save(args.out)
    print(f"{len(kg)} -> {len(out)} triples -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args, mode=args.mode)
    try:
        alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    except ValueError:
        raise MultiRagError(f"bad --alphas {args.alphas!r}") from None
    rows = sweep_alpha(load_dataset(args.dataset), alphas, cfg, cfg.mode)
    if str(args.out).endswith(".json"):
        atomic_write_json(args.out, rows)
    else:
        atomic_write_text(args.out, format_table(rows))
    sys.stdout.write(format_table(rows))
    return 0


COMMANDS = {"ingest": cmd_ingest, "build": cmd_build, "match": cmd_match, "query": cmd_query,
            "eval": cmd_eval, "perturb": cmd_perturb, "sweep-alpha": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except MultiRagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
