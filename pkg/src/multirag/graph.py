"""Knowledge graph storage and the multi-source line graph.

A triple's *entity endpoints* are its subject and, when the object is an
entity rather than a literal, its object. Two triples are adjacent in the
line graph iff they share an entity endpoint.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Iterable, Iterator

from .errors import UnknownEntity
from .io import atomic_write_text

DEFAULT_HUB_CAP = 10_000


@dataclass(frozen=True, order=True, slots=True)
class Provenance:
    record_id: str
    source_id: str
    ref: str = ""

    def to_list(self) -> list[str]:
        return [self.record_id, self.source_id, self.ref]

    @classmethod
    def from_list(cls, v) -> "Provenance":
        return cls(*v)


@dataclass(frozen=True, slots=True)
class Entity:
    id: str
    label: str
    etype: str = "Thing"
    provenance: tuple[Provenance, ...] = ()
    aliases: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"entity": self.id, "label": self.label, "etype": self.etype,
                "aliases": list(self.aliases),
                "provenance": [p.to_list() for p in self.provenance]}

    @classmethod
    def from_dict(cls, d: dict) -> "Entity":
        return cls(d["entity"], d["label"], d.get("etype", "Thing"),
                   tuple(Provenance.from_list(p) for p in d.get("provenance", [])),
                   tuple(d.get("aliases", [])))


def triple_id(subject: str, predicate: str, obj: str) -> str:
    digest = hashlib.sha1(f"{subject}\x1f{predicate}\x1f{obj}".encode("utf-8")).hexdigest()
    return "t-" + digest[:16]


@dataclass(frozen=True, slots=True)
class Triple:
    id: str
    subject: str
    predicate: str
    object: str
    object_kind: str = "literal"  # "entity" | "literal"
    object_type: str = "string"
    provenance: tuple[Provenance, ...] = ()
    score: float | None = None

    @classmethod
    def make(cls, subject: str, predicate: str, obj: str, object_kind: str = "literal",
             object_type: str = "string", provenance: Iterable[Provenance] = (),
             score: float | None = None) -> "Triple":
        if not predicate:
            raise ValueError("empty predicate")
        return cls(triple_id(subject, predicate, obj), subject, predicate, obj,
                   object_kind, object_type, tuple(sorted(set(provenance))), score)

    @property
    def spo(self) -> tuple[str, str, str]:
        return self.subject, self.predicate, self.object

    @property
    def endpoints(self) -> tuple[str, ...]:
        if self.object_kind == "entity" and self.object != self.subject:
            return self.subject, self.object
        return (self.subject,)

    @property
    def sources(self) -> tuple[str, ...]:
        return tuple(sorted({p.source_id for p in self.provenance}))

    def to_dict(self) -> dict:
        d = {"id": self.id, "s": self.subject, "p": self.predicate, "o": self.object,
             "o_kind": self.object_kind, "o_type": self.object_type,
             "provenance": [p.to_list() for p in self.provenance]}
        if self.score is not None:
            d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Triple":
        return cls(d["id"], d["s"], d["p"], d["o"], d.get("o_kind", "literal"),
                   d.get("o_type", "string"),
                   tuple(Provenance.from_list(p) for p in d.get("provenance", [])),
                   d.get("score"))


def _bare_label(eid: str) -> str:
    return eid[4:] if eid.startswith("ent:") else eid


class KnowledgeGraph:
    """Immutable triple store with an entity -> incident-triple index."""

    def __init__(self, entities: Iterable[Entity] = (), triples: Iterable[Triple] = ()):
        ents = {e.id: e for e in entities}
        tris: dict[str, Triple] = {}
        for t in triples:
            if t.id in tris:
                raise ValueError(f"duplicate triple id {t.id}")
            tris[t.id] = t
        adj: dict[str, list[str]] = defaultdict(list)
        for tid in sorted(tris):
            t = tris[tid]
            for e in t.endpoints:
                if e not in ents:
                    ents[e] = Entity(e, _bare_label(e))
                adj[e].append(tid)
        self.entities: dict[str, Entity] = {k: ents[k] for k in sorted(ents)}
        self.triples: dict[str, Triple] = {k: tris[k] for k in sorted(tris)}
        self.adjacency: dict[str, tuple[str, ...]] = {
            e: tuple(adj.get(e, ())) for e in self.entities}

    def __len__(self) -> int:
        return len(self.triples)

    def __eq__(self, other) -> bool:
        return (isinstance(other, KnowledgeGraph) and self.entities == other.entities
                and self.triples == other.triples)

    def label(self, eid: str) -> str:
        e = self.entities.get(eid)
        return e.label if e else _bare_label(eid)

    def object_label(self, t: Triple) -> str:
        return self.label(t.object) if t.object_kind == "entity" else t.object

    def sources(self) -> set[str]:
        return {p.source_id for t in self.triples.values() for p in t.provenance}

    def with_triples(self, triples: Iterable[Triple]) -> "KnowledgeGraph":
        """Same entity table, different triple set (entities of removed triples are kept)."""
        return KnowledgeGraph(self.entities.values(), triples)

    # -- serialization: one JSON object per line, entities first
    def dumps(self) -> str:
        lines = [json.dumps(e.to_dict(), sort_keys=True, ensure_ascii=False)
                 for e in self.entities.values()]
        lines += [json.dumps(t.to_dict(), sort_keys=True, ensure_ascii=False)
                  for t in self.triples.values()]
        return "".join(line + "\n" for line in lines)

    @classmethod
    def loads(cls, text: str) -> "KnowledgeGraph":
        ents, tris = [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if "entity" in d:
                ents.append(Entity.from_dict(d))
            else:
                tris.append(Triple.from_dict(d))
        return cls(ents, tris)

    def save(self, path: str | Path) -> Path:
        return atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeGraph":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- line graph

@dataclass
class LineGraph:
    """Triples as nodes, an edge between triples that share an entity endpoint.

    Cliques induced by entities with more than ``hub_cap`` incident triples are
    not materialized; ``hubs`` keeps their incidence lists and every query
    consults them, so edge semantics stay exact.
    """

    nodes: tuple[str, ...]
    adjacency: dict[str, set[str]]
    hubs: dict[str, tuple[str, ...]] = field(default_factory=dict)
    node_hubs: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def neighbors(self, tid: str) -> set[str]:
        out = set(self.adjacency.get(tid, ()))
        for h in self.node_hubs.get(tid, ()):
            out.update(self.hubs[h])
        out.discard(tid)
        return out

    def has_edge(self, a: str, b: str) -> bool:
        if a == b:
            return False
        if b in self.adjacency.get(a, ()):
            return True
        return bool(set(self.node_hubs.get(a, ())) & set(self.node_hubs.get(b, ())))

    def edges(self) -> Iterator[tuple[str, str]]:
        for a in self.nodes:
            for b in sorted(self.neighbors(a)):
                if a < b:
                    yield a, b

    def edge_set(self) -> set[frozenset]:
        return {frozenset(e) for e in self.edges()}

    def edge_count(self) -> int:
        return sum(len(self.neighbors(a)) for a in self.nodes) // 2

    def to_records(self) -> list[dict]:
        return [{"triple_id": a, "neighbors": sorted(self.neighbors(a))} for a in self.nodes]

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())


def to_line_graph(g: KnowledgeGraph, hub_cap: int = DEFAULT_HUB_CAP) -> LineGraph:
    """Build the line graph from the entity incidence lists (no pairwise triple scan)."""
    adjacency: dict[str, set[str]] = {tid: set() for tid in g.triples}
    hubs: dict[str, tuple[str, ...]] = {}
    node_hubs: dict[str, list[str]] = defaultdict(list)
    for ent, incident in g.adjacency.items():
        if len(incident) < 2:
            continue
        if len(incident) > hub_cap:
            hubs[ent] = incident
            for tid in incident:
                node_hubs[tid].append(ent)
            continue
        for a in incident:
            adjacency[a].update(incident)
    for tid, nbrs in adjacency.items():
        nbrs.discard(tid)
    return LineGraph(tuple(g.triples), adjacency, hubs,
                     {k: tuple(v) for k, v in node_hubs.items()})


def line_graph_oracle(g: KnowledgeGraph) -> set[frozenset]:
    """Quadratic reference: check every triple pair for a shared entity endpoint."""
    edges = set()
    items = list(g.triples.values())
    for a, b in combinations(items, 2):
        if set(a.endpoints) & set(b.endpoints):
            edges.add(frozenset((a.id, b.id)))
    return edges


def incident_triples(g: KnowledgeGraph, entity: str) -> list[str]:
    if entity not in g.entities:
        raise UnknownEntity(entity)
    return list(g.adjacency.get(entity, ()))


def extract_subgraph(g: KnowledgeGraph, seeds: Iterable[str], hops: int = 0) -> KnowledgeGraph:
    """Triples reachable within ``hops`` entity expansions of the seed entities.

    ``hops=0`` keeps the triples incident to the seeds; every further hop adds
    the triples incident to entities newly reached through kept triples.
    """
    if hops < 0:
        raise ValueError("hops must be >= 0")
    visited = {s for s in seeds if s in g.adjacency}
    frontier = set(visited)
    kept: set[str] = set()
    for depth in range(hops + 1):
        new_triples = {tid for e in frontier for tid in g.adjacency[e]} - kept
        kept |= new_triples
        if depth == hops:
            break
        reached = {e for tid in new_triples for e in g.triples[tid].endpoints}
        frontier = reached - visited
        visited |= frontier
        if not frontier:
            break
    triples = [g.triples[t] for t in sorted(kept)]
    ents = {e for t in triples for e in t.endpoints}
    return KnowledgeGraph([g.entities[e] for e in sorted(ents)], triples)


def strip_provenance_to(t: Triple, records: set[str]) -> Triple | None:
    """Restrict a triple's provenance to the given record ids (None if nothing remains)."""
    prov = tuple(p for p in t.provenance if p.record_id in records)
    return replace(t, provenance=prov) if prov else None
