"""Evaluation harness: datasets, metrics, perturbations, ablations, alpha sweep."""

from __future__ import annotations

import hashlib
import json
import math
import random
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .client import GenerationClient, MockClient
from .confidence import SourceHistory
from .config import MODES, EngineConfig
from .errors import ConfigError, MultiRagError, RateTooHigh
from .graph import KnowledgeGraph
from .homology import match_homologous
from .ingest import RecordStore, fuse_sources, load_manifest
from .io import atomic_write_json
from .pipeline import Engine, answer_query, build_engine, make_client
from .text import entity_id, fold, normalize_alias_table, normalize_predicate

DEFAULT_KS = (1, 3, 5)


@dataclass(frozen=True)
class QueryCase:
    query: str
    gold: frozenset[str]
    hints: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if not self.gold:
            raise ValueError(f"query {self.query!r} has empty gold set")

    @classmethod
    def from_dict(cls, d: dict) -> "QueryCase":
        gold = d["gold"] if isinstance(d["gold"], list) else [d["gold"]]
        return cls(d["query"], frozenset(str(g) for g in gold), dict(d.get("hints", {})))


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    recall_at_k: dict[int, float]
    query_time_s: float = field(default=0.0, compare=False)

    def to_dict(self, include_time: bool = True) -> dict:
        d = {"precision": self.precision, "recall": self.recall, "f1": self.f1,
             "recall_at_k": {str(k): v for k, v in sorted(self.recall_at_k.items())}}
        if include_time:
            d["query_time_s"] = self.query_time_s
        return d


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def compute_metrics(predicted: Sequence[str], gold: Iterable[str], ks: Sequence[int] = DEFAULT_KS,
                    elapsed: float = 0.0) -> Metrics:
    """Set precision/recall over normalized answer strings; Recall@k over the ranked list."""
    gold_n = {fold(g) for g in gold}
    ranked = list(dict.fromkeys(fold(p) for p in predicted))
    hits = len(set(ranked) & gold_n)
    p = hits / len(ranked) if ranked else 0.0
    r = hits / len(gold_n) if gold_n else 0.0
    rak = {k: (len(set(ranked[:k]) & gold_n) / len(gold_n) if gold_n else 0.0) for k in ks}
    return Metrics(p, r, f1_score(p, r), rak, elapsed)


def macro_average(items: Sequence[Metrics], ks: Sequence[int] = DEFAULT_KS) -> Metrics:
    if not items:
        return Metrics(0.0, 0.0, 0.0, {k: 0.0 for k in ks}, 0.0)
    n = len(items)
    return Metrics(
        math.fsum(m.precision for m in items) / n,
        math.fsum(m.recall for m in items) / n,
        math.fsum(m.f1 for m in items) / n,
        {k: math.fsum(m.recall_at_k.get(k, 0.0) for m in items) / n for k in ks},
        math.fsum(m.query_time_s for m in items),
    )


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    name: str
    directory: Path
    store: RecordStore
    cases: list[QueryCase]
    history: dict
    predicate_aliases: dict[str, str]

    def config(self, base: EngineConfig | None = None) -> EngineConfig:
        base = base or EngineConfig()
        aliases = dict(self.predicate_aliases)
        aliases.update(base.predicate_aliases)
        return replace(base, predicate_aliases=aliases, fixtures=base.fixtures or str(self.directory))

    def client(self, cfg: EngineConfig) -> GenerationClient:
        if cfg.client_mode == "mock":
            return MockClient.from_path(cfg.fixtures or self.directory, cfg.budget)
        return make_client(cfg)

    def engine(self, cfg: EngineConfig | None = None, client: GenerationClient | None = None) -> Engine:
        cfg = self.config(cfg)
        client = client or self.client(cfg)
        hist = SourceHistory.from_dict(self.history, cfg.confidence.history_init_h,
                                       cfg.confidence.history_init_prior)
        engine = build_engine(self.store, client, cfg, hist)
        client.reset_counters()
        return engine


def bundled_datasets() -> list[str]:
    root = resources.files("multirag") / "data"
    return sorted(p.name for p in root.iterdir() if (p / "manifest.json").is_file())


def dataset_dir(name_or_path: str | Path) -> Path:
    path = Path(name_or_path)
    if (path / "manifest.json").is_file():
        return path
    bundled = resources.files("multirag") / "data" / str(name_or_path)
    if (bundled / "manifest.json").is_file():
        return Path(str(bundled))
    raise ConfigError(f"no dataset at {name_or_path!r} (bundled: {', '.join(bundled_datasets())})")


def _read_json(path: Path, default):
    return json.loads(path.read_text(encoding="utf-8")) if path.is_file() else default


def load_dataset(name_or_path: str | Path) -> Dataset:
    d = dataset_dir(name_or_path)
    store = fuse_sources([(None, load_manifest(d))])
    cases = [QueryCase.from_dict(c) for c in _read_json(d / "queries.json", [])]
    return Dataset(d.name, d, store, cases, _read_json(d / "history.json", {}),
                   _read_json(d / "aliases.json", {}))


# ---------------------------------------------------------------- perturbations

@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    rate: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mask_relations", "duplicate_shuffle"):
            raise ValueError(f"unknown perturbation {self.kind!r}")
        if self.rate < 0 or (self.kind == "mask_relations" and self.rate >= 1):
            raise ValueError(f"rate {self.rate} out of range for {self.kind}")


def protected_claims(g: KnowledgeGraph, cases: Iterable[QueryCase],
                     predicate_aliases: dict[str, str] | None = None) -> set[tuple[str, int]]:
    """One claim (the first provenance entry) of every triple that carries a gold answer."""
    aliases = normalize_alias_table(predicate_aliases)
    out = set()
    for case in cases:
        ents = {entity_id(e) for e in case.hints.get("entities", [])}
        rels = {normalize_predicate(r, aliases) for r in case.hints.get("relations", [])}
        gold = {fold(x) for x in case.gold}
        for tid, t in g.triples.items():
            if ents and t.subject not in ents:
                continue
            if rels and normalize_predicate(t.predicate, aliases) not in rels:
                continue
            if fold(g.object_label(t)) in gold and t.provenance:
                out.add((tid, 0))
    return out


def perturb_mask(g: KnowledgeGraph, spec: PerturbationSpec,
                 protected: set[tuple[str, int]] | None = None) -> KnowledgeGraph:
    """Remove exactly floor(rate * |claims|) unprotected source claims.

    A claim is one provenance entry of one triple; a triple whose claims are
    all removed leaves the graph. For single-source triples this is plain
    triple removal. The removal order is one seeded permutation, so a higher
    rate masks a superset of what a lower rate masks.
    """
    if spec.kind != "mask_relations":
        raise ValueError("perturb_mask needs a mask_relations spec")
    protected = protected or set()
    claims = [(tid, i) for tid, t in g.triples.items() for i in range(len(t.provenance))]
    n_remove = math.floor(spec.rate * len(claims))
    if n_remove == 0:
        return g
    maskable = [c for c in claims if c not in protected]
    if n_remove > len(maskable):
        raise RateTooHigh(f"rate {spec.rate} needs {n_remove} removals, only {len(maskable)} unprotected")
    order = list(maskable)
    random.Random(spec.seed).shuffle(order)
    removed = set(order[:n_remove])
    out = []
    for tid, t in g.triples.items():
        prov = tuple(p for i, p in enumerate(t.provenance) if (tid, i) not in removed)
        if prov:
            out.append(t if len(prov) == len(t.provenance) else replace(t, provenance=prov))
    return g.with_triples(out)


def _dup_id(seed: int, i: int, tid: str) -> str:
    return "t-" + hashlib.sha1(f"dup\x1f{seed}\x1f{i}\x1f{tid}".encode()).hexdigest()[:16]


def perturb_duplicate_shuffle(g: KnowledgeGraph, spec: PerturbationSpec) -> KnowledgeGraph:
    """Add floor(rate * |triples|) copies whose objects are permuted among the copies.

    No copy keeps its original's object. Copies carry the original's
    provenance, so they read as extra claims by the same sources.
    """
    if spec.kind != "duplicate_shuffle":
        raise ValueError("perturb_duplicate_shuffle needs a duplicate_shuffle spec")
    originals = list(g.triples.values())
    n_add = math.floor(spec.rate * len(originals))
    if n_add == 0 or not originals:
        return g
    rng = random.Random(spec.seed)
    picks = [originals[i % len(originals)] for i in
             (rng.sample(range(len(originals)), n_add) if n_add <= len(originals)
              else [rng.randrange(len(originals)) for _ in range(n_add)])]
    donors = list(picks)
    rng.shuffle(donors)
    pool = originals
    copies = []
    for i, src in enumerate(picks):
        donor = None
        for j in range(len(donors)):
            cand = donors[(i + 1 + j) % len(donors)]
            if cand.object != src.object:
                donor = cand
                break
        if donor is None:
            donor = next((t for t in pool if t.object != src.object), None)
        if donor is None:
            raise ValueError("every triple has the same object; no permutation can differ")
        copies.append(replace(src, id=_dup_id(spec.seed, i, src.id), object=donor.object,
                              object_kind=donor.object_kind, object_type=donor.object_type))
    return g.with_triples(originals + copies)


def apply_perturbation(g: KnowledgeGraph, spec: PerturbationSpec, cases: Iterable[QueryCase] = (),
                       predicate_aliases: dict[str, str] | None = None) -> KnowledgeGraph:
    if spec.kind == "mask_relations":
        return perturb_mask(g, spec, protected_claims(g, cases, predicate_aliases))
    return perturb_duplicate_shuffle(g, spec)


# ---------------------------------------------------------------- suites

@dataclass
class QueryResult:
    query: str
    gold: list[str]
    predicted: list[str]
    metrics: Metrics
    low_evidence: bool = False
    authority_calls: int = 0
    history_computations: int = 0
    error: str | None = None

    def to_dict(self, include_time: bool = True) -> dict:
        return {"query": self.query, "gold": self.gold, "predicted": self.predicted,
                "metrics": self.metrics.to_dict(include_time), "low_evidence": self.low_evidence,
                "authority_calls": self.authority_calls,
                "history_computations": self.history_computations, "error": self.error}


@dataclass
class EvalReport:
    dataset: str
    mode: str
    results: list[QueryResult]
    aggregate: Metrics
    authority_calls: int = 0
    history_computations: int = 0
    client_calls: dict[str, int] = field(default_factory=dict)
    wall_s: float = field(default=0.0, compare=False)
    client_latency_s: float = field(default=0.0, compare=False)
    label: str = ""

    @property
    def failed(self) -> list[str]:
        return [r.query for r in self.results if r.error]

    def to_dict(self, include_time: bool = True) -> dict:
        d = {"dataset": self.dataset, "mode": self.mode, "label": self.label,
             "aggregate": self.aggregate.to_dict(include_time),
             "authority_calls": self.authority_calls,
             "history_computations": self.history_computations,
             "client_calls": dict(sorted(self.client_calls.items())),
             "failed": self.failed,
             "queries": [r.to_dict(include_time) for r in self.results]}
        if include_time:
            d["wall_s"] = self.wall_s
            d["client_latency_s"] = self.client_latency_s
        return d

    def save(self, path: str | Path) -> Path:
        return atomic_write_json(path, self.to_dict())


def engine_for_graph(engine: Engine, kg: KnowledgeGraph) -> Engine:
    cfg = engine.config
    partition = match_homologous(kg, cfg.min_sources, normalize_alias_table(dict(cfg.predicate_aliases)))
    return Engine(engine.store, kg, partition, engine.history, engine.client, cfg, engine.prompts)


def run_suite(dataset: Dataset, config: EngineConfig | None = None, mode: str = "full",
              engine: Engine | None = None, perturbation: PerturbationSpec | None = None,
              ks: Sequence[int] = DEFAULT_KS) -> EvalReport:
    """Run every query case under ``mode``; failures are recorded, not raised."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    engine = engine or dataset.engine(config)
    if perturbation is not None:
        kg = apply_perturbation(engine.kg, perturbation, dataset.cases, dataset.predicate_aliases)
        engine = engine_for_graph(engine, kg)
    client = engine.client
    client.reset_counters()
    results = []
    t0 = time.perf_counter()
    for case in dataset.cases:
        try:
            ans = answer_query(case.query, engine, mode)
        except MultiRagError as exc:
            results.append(QueryResult(case.query, sorted(case.gold), [],
                                       compute_metrics([], case.gold, ks), error=str(exc)))
            continue
        m = compute_metrics(ans.answers, case.gold, ks, ans.timings.get("algorithmic", 0.0))
        results.append(QueryResult(case.query, sorted(case.gold), ans.answers, m, ans.low_evidence,
                                   ans.counters.get("authority_calls", 0),
                                   ans.counters.get("history_computations", 0)))
    wall = time.perf_counter() - t0
    return EvalReport(
        dataset.name, mode, results, macro_average([r.metrics for r in results], ks),
        sum(r.authority_calls for r in results), sum(r.history_computations for r in results),
        dict(client.calls), wall, client.latency_s,
        label=f"{perturbation.kind}@{perturbation.rate}" if perturbation else "",
    )


def sweep_alpha(dataset: Dataset, alphas: Sequence[float], config: EngineConfig | None = None,
                mode: str = "full") -> list[dict]:
    """One suite run per alpha, everything else fixed; rows of (alpha, F1, QT, counters)."""
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ConfigError("alphas must lie in [0, 1]")
    base = dataset.config(config)
    engine = dataset.engine(base)
    rows = []
    for a in alphas:
        cfg = base.with_overrides({"alpha": a})
        eng = Engine(engine.store, engine.kg, engine.partition, engine.history, engine.client,
                     cfg, engine.prompts)
        rep = run_suite(dataset, cfg, mode, engine=eng)
        rows.append({"alpha": a, "f1": rep.aggregate.f1, "qt_s": rep.aggregate.query_time_s,
                     "authority_calls": rep.authority_calls,
                     "history_computations": rep.history_computations})
    return rows


def format_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"
