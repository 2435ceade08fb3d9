"""End-to-end query flow.

logic form -> document retrieval -> candidate homologous subgraphs ->
homologous line graph -> multi-level confidence filtering -> context with
trusted / related / untrusted blocks -> generated answer.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .client import GenerationClient, HttpClient, MockClient
from .confidence import MCCResult, NodeConfidence, SourceHistory, mcc, score_flat
from .config import EngineConfig
from .errors import EmptyQuery, NoCandidates, ReplyParseError
from .extract import ExtractionPrompt, _parse_json, alias_id_map, extract_store, load_prompts
from .graph import KnowledgeGraph
from .homology import (
    HomologyPartition,
    build_homologous_line_graph,
    candidates_for_query,
    match_homologous,
    restrict_partition,
)
from .ingest import NormalizedRecord, RecordStore, iter_leaves
from .text import contains_phrase, entity_id, fold, normalize_alias_table, normalize_predicate

log = logging.getLogger(__name__)

NO_TRUSTED = "(no trusted evidence)"


@dataclass(frozen=True)
class LogicForm:
    entities: tuple[str, ...] = ()
    relations: tuple[str, ...] = ()
    intent: str = ""
    entity_ids: tuple[str, ...] = ()

    @property
    def retrievable(self) -> bool:
        return bool(self.entities or self.relations)


@dataclass
class Answer:
    query: str
    text: str
    supporting: list[tuple[str, float | None]]
    conflicts: list[tuple[str, float | None, str]]
    graph_confidences: dict[str, float]
    answers: list[str] = field(default_factory=list)
    low_evidence: bool = False
    mode: str = "full"
    timings: dict[str, float] = field(default_factory=dict, compare=False)
    counters: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "text": self.text,
            "answers": list(self.answers),
            "supporting": [{"triple_id": t, "confidence": c} for t, c in self.supporting],
            "conflicts": [{"triple_id": t, "confidence": c, "reason": r} for t, c, r in self.conflicts],
            "graph_confidences": dict(sorted(self.graph_confidences.items())),
            "low_evidence": self.low_evidence,
            "mode": self.mode,
            "counters": dict(sorted(self.counters.items())),
            "timings": {k: round(v, 6) for k, v in sorted(self.timings.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False)


@dataclass
class Engine:
    """Shared, read-only query state."""

    store: RecordStore
    kg: KnowledgeGraph
    partition: HomologyPartition
    history: SourceHistory
    client: GenerationClient
    config: EngineConfig = field(default_factory=EngineConfig)
    prompts: dict[str, ExtractionPrompt] = field(default_factory=load_prompts)

    def __post_init__(self):
        self.predicate_aliases = normalize_alias_table(dict(self.config.predicate_aliases))
        self.entity_aliases = alias_id_map(self.kg.entities.values())


def make_client(cfg: EngineConfig) -> GenerationClient:
    cfg.validate_client()
    if cfg.client_mode == "mock":
        return MockClient.from_path(cfg.fixtures, cfg.budget)
    return HttpClient(cfg.endpoint, cfg.model, budget=cfg.budget)


def build_engine(store: RecordStore, client: GenerationClient, cfg: EngineConfig | None = None,
                 history: SourceHistory | None = None,
                 prompts: dict[str, ExtractionPrompt] | None = None) -> Engine:
    cfg = cfg or EngineConfig()
    prompts = prompts or load_prompts()
    kg = extract_store(store, client, prompts, promote_threshold=cfg.promote_threshold)
    partition = match_homologous(kg, cfg.min_sources, normalize_alias_table(dict(cfg.predicate_aliases)))
    history = history or SourceHistory({}, cfg.confidence.history_init_h, cfg.confidence.history_init_prior)
    return Engine(store, kg, partition, history, client, cfg, prompts)


# ---------------------------------------------------------------- logic form

def resolve_entity(surface: str, kg: KnowledgeGraph, aliases: dict[str, str]) -> str:
    eid = entity_id(surface)
    return aliases.get(eid, eid)


def generate_logic_form(q: str, client: GenerationClient, prompt: ExtractionPrompt | None = None,
                        kg: KnowledgeGraph | None = None,
                        entity_aliases: dict[str, str] | None = None) -> LogicForm:
    if not q or not q.strip():
        raise EmptyQuery("empty query")
    prompt = prompt or load_prompts()["logic_form"]
    data = _parse_json(client.complete("logic_form", prompt.render(q.strip())), "logic_form")
    if not isinstance(data, dict):
        raise ReplyParseError("logic form reply must be a JSON object")
    ents, rels = data.get("entities", []), data.get("relations", [])
    if not isinstance(ents, list) or not isinstance(rels, list):
        raise ReplyParseError("logic form entities/relations must be lists")
    ents = tuple(dict.fromkeys(str(e).strip() for e in ents if str(e).strip()))
    rels = tuple(dict.fromkeys(str(r).strip() for r in rels if str(r).strip()))
    aliases = entity_aliases or {}
    ids = tuple(dict.fromkeys(resolve_entity(e, kg, aliases) for e in ents))
    return LogicForm(ents, rels, str(data.get("intent", "")), ids)


# ---------------------------------------------------------------- retrieval

def _record_terms(record: NormalizedRecord) -> tuple[set[str], set[str], str]:
    """(attribute names, cell values, free text) of a record, normalized."""
    attrs, values, text = set(), set(), ""
    if record.kind == "Table":
        payload = record.jsc["@graph"]
        attrs = {normalize_predicate(c) for c in payload["columns"]}
        values = {fold(row[c]["@value"]) for row in payload["rows"] for c in payload["columns"]}
    elif record.kind == "Tree":
        for path, leaf in iter_leaves(record.jsc["@graph"]["root"]):
            keys = [p for p in path if isinstance(p, str) and p != "#text"]
            if keys:
                attrs.add(normalize_predicate(keys[-1]))
            if leaf is not None:
                values.add(fold(str(leaf)))
    else:
        text = record.jsc["@graph"]["text"]
    return attrs, values, text


def retrieve_documents(lf: LogicForm, store: RecordStore,
                       predicate_aliases: dict[str, str] | None = None) -> list[NormalizedRecord]:
    """Records matching any query term; ordered by match count desc, then record id."""
    ents = [fold(e) for e in lf.entities]
    rels = [normalize_predicate(r, predicate_aliases) for r in lf.relations]
    scored = []
    for record in store:
        attrs, values, text = _record_terms(record)
        attrs = {normalize_predicate(a, predicate_aliases) for a in attrs}
        if text:
            hits = sum(contains_phrase(text, e) for e in ents)
            hits += sum(contains_phrase(text, r) for r in lf.relations)
        else:
            hits = sum(e in values for e in ents) + sum(r in attrs for r in rels)
        if hits:
            scored.append((-hits, record.id, record))
    scored.sort(key=lambda x: (x[0], x[1]))
    return [r for _, _, r in scored]


# ---------------------------------------------------------------- context

def _fmt(c: float | None) -> str:
    return "n/a" if c is None else f"{c:.2f}"


def fact_line(kg: KnowledgeGraph, tid: str, marker: str, extra: str = "") -> str:
    t = kg.triples[tid]
    tail = f"src: {', '.join(t.sources)}" + (f"; {extra}" if extra else "")
    return f"{marker} {kg.label(t.subject)} {t.predicate} = {kg.object_label(t)} [{tail}]"


def rank_trusted(kg: KnowledgeGraph, kept: Sequence[str],
                 verdicts: dict[str, NodeConfidence]) -> list[str]:
    def key(tid):
        v = verdicts.get(tid)
        c = v.total if v is not None and v.total is not None else -math.inf
        return (-c, -len(kg.triples[tid].sources), tid)
    return sorted(kept, key=key)


def assemble_context(kg: KnowledgeGraph, kept: Sequence[str], verdicts: dict[str, NodeConfidence],
                     filtered: Sequence[str] = (), related: Sequence[str] = (),
                     question: str | None = None) -> str:
    """Trusted block ordered by C(v) desc, then related facts, then untrusted claims."""
    lines = []
    if question:
        lines.append(f"question: {question}")
    lines.append("trusted evidence:")
    if kept:
        for tid in rank_trusted(kg, kept, verdicts):
            v = verdicts.get(tid)
            lines.append(fact_line(kg, tid, "+", f"C={_fmt(v.total if v else None)}"))
    else:
        lines.append(NO_TRUSTED)
    if related:
        lines.append("related facts:")
        lines += [fact_line(kg, tid, "~") for tid in related]
    if filtered:
        lines.append("untrusted claims (do not use):")
        for tid in sorted(filtered):
            v = verdicts.get(tid)
            extra = f"C={_fmt(v.total if v else None)}" + (f"; {v.reason}" if v and v.reason else "")
            lines.append(fact_line(kg, tid, "-", extra))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- answering

def _flat_candidates(kg: KnowledgeGraph, keep: set[str], lf: LogicForm,
                     predicate_aliases: dict[str, str]) -> list[str]:
    """Base-graph facts about the query entities, filtered by the query relations."""
    rels = {normalize_predicate(r, predicate_aliases) for r in lf.relations}
    out = []
    for tid in sorted(keep):
        t = kg.triples[tid]
        if lf.entity_ids and t.subject not in lf.entity_ids:
            continue
        if rels and normalize_predicate(t.predicate, predicate_aliases) not in rels:
            continue
        if not lf.entity_ids and not rels:
            continue
        out.append(tid)
    return out


def _related(kg: KnowledgeGraph, kept: Sequence[str], exclude: set[str], keep: set[str],
             limit: int) -> list[str]:
    ents = {e for tid in kept for e in kg.triples[tid].endpoints}
    rel = sorted({n for e in ents for n in kg.adjacency.get(e, ())} - exclude - set(kept))
    return [t for t in rel if t in keep][:limit]


def answer_query(q: str, engine: Engine, mode: str | None = None) -> Answer:
    cfg = engine.config
    mode = mode or cfg.mode
    kg, client = engine.kg, engine.client
    timings: dict[str, float] = {}
    latency0 = client.latency_s
    t_start = time.perf_counter()

    t0 = time.perf_counter()
    lf = generate_logic_form(q, client, engine.prompts["logic_form"], kg, engine.entity_aliases)
    timings["logic_form"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    docs = retrieve_documents(lf, engine.store, engine.predicate_aliases)
    doc_ids = {d.id for d in docs}
    keep = {tid for tid, t in kg.triples.items() if any(p.record_id in doc_ids for p in t.provenance)}
    timings["retrieve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    low_evidence = False
    result: MCCResult | None = None
    candidate_ids: list[str] = []
    try:
        if mode == "no_mka":
            raise NoCandidates("homology bypassed")
        restricted = restrict_partition(engine.partition, kg, keep, cfg.min_sources)
        subgraphs = candidates_for_query(restricted, lf.entity_ids, lf.relations, engine.predicate_aliases)
        sg_line = build_homologous_line_graph(HomologyPartition(subgraphs, ()))
        candidate_ids = list(sg_line.nodes)
    except NoCandidates:
        subgraphs = []
        candidate_ids = _flat_candidates(kg, keep, lf, engine.predicate_aliases)
        low_evidence = mode != "no_mka"
    timings["match"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if subgraphs:
        result = mcc(subgraphs, kg, cfg.confidence, client, engine.history,
                     prompt=engine.prompts["authority"],
                     graph_level=mode in ("full", "no_node_level"),
                     node_level=mode in ("full", "no_graph_level"))
        verdicts = result.verdicts
        kept = [t for t in candidate_ids if verdicts[t].verdict == "kept"]
        filtered = [t for t in candidate_ids if verdicts[t].verdict == "filtered"]
        graph_conf = {f"{kg.label(k[0])}|{k[1]}": v for k, v in result.graph_confidences.items()}
    elif mode == "no_mka" and candidate_ids:
        result = score_flat(candidate_ids, kg, cfg.confidence, client, engine.history,
                            prompt=engine.prompts["authority"])
        verdicts = result.verdicts
        kept = [t for t in candidate_ids if verdicts[t].verdict == "kept"]
        filtered = [t for t in candidate_ids if verdicts[t].verdict == "filtered"]
        graph_conf = {}
    else:
        verdicts = {t: NodeConfidence(t, None, None, None, "kept") for t in candidate_ids}
        kept, filtered, graph_conf = list(candidate_ids), [], {}
    timings["mcc"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    related = _related(kg, kept, set(candidate_ids), keep, cfg.related_limit)
    context = assemble_context(kg, kept, verdicts, filtered, related, q.strip())
    text = client.complete("answer", engine.prompts["answer"].render(context)).strip()
    timings["generate"] = time.perf_counter() - t0

    ranked = rank_trusted(kg, kept, verdicts)
    answers = list(dict.fromkeys(kg.object_label(kg.triples[t]) for t in ranked))
    timings["client_latency"] = client.latency_s - latency0
    timings["total"] = time.perf_counter() - t_start
    timings["algorithmic"] = max(0.0, timings["total"] - timings["client_latency"])
    return Answer(
        query=q.strip(), text=text,
        supporting=[(t, verdicts[t].total) for t in ranked],
        conflicts=[(t, verdicts[t].total, verdicts[t].reason) for t in sorted(filtered)],
        graph_confidences=graph_conf, answers=answers, low_evidence=low_evidence,
        mode=mode, timings=timings,
        counters={"authority_calls": result.authority_calls if result else 0,
                  "history_computations": result.history_computations if result else 0},
    )


def load_history(path: str | Path | None, cfg: EngineConfig) -> SourceHistory:
    init_h, init_p = cfg.confidence.history_init_h, cfg.confidence.history_init_prior
    if path is None or not Path(path).exists():
        return SourceHistory({}, init_h, init_p)
    return SourceHistory.from_dict(json.loads(Path(path).read_text(encoding="utf-8")), init_h, init_p)
