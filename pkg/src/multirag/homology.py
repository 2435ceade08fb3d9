"""Homologous subgraph matching.

Triples about the same (canonical subject, normalized predicate) coming from
at least ``min_sources`` sources form a homologous subgraph around a
synthetic center node; everything else is isolated. Grouping is a single
hash pass plus a sort, so matching is O(n log n) in the triple count.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import NoCandidates
from .graph import KnowledgeGraph
from .io import atomic_write_text
from .text import normalize_predicate

Key = tuple[str, str]


@dataclass
class SNode:
    name: str
    meta: dict
    num: int
    confidence: float | None = None


@dataclass(frozen=True)
class HomologousEdge:
    member: str
    weight: float = 1.0

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("edge weight must be non-negative")


@dataclass
class HomologousSubgraph:
    key: Key
    snode: SNode
    members: tuple[str, ...]
    edges: tuple[HomologousEdge, ...]
    sources: tuple[str, ...] = ()

    @property
    def line_edges(self) -> list[tuple[str, str]]:
        """Complete graph over the members: they all hang off the same center node."""
        return list(combinations(self.members, 2))

    def to_dict(self) -> dict:
        return {"key": list(self.key), "members": list(self.members),
                "sources": list(self.sources), "num": self.snode.num,
                "weights": [e.weight for e in self.edges]}


@dataclass
class HomologyPartition:
    subgraphs: list[HomologousSubgraph] = field(default_factory=list)
    isolated: tuple[str, ...] = ()

    def member_ids(self) -> set[str]:
        return {m for sg in self.subgraphs for m in sg.members}

    def by_key(self) -> dict[Key, HomologousSubgraph]:
        return {sg.key: sg for sg in self.subgraphs}

    def to_dict(self) -> dict:
        return {"subgraphs": [sg.to_dict() for sg in self.subgraphs],
                "isolated": list(self.isolated)}

    @classmethod
    def from_dict(cls, d: dict) -> "HomologyPartition":
        sgs = []
        for s in d["subgraphs"]:
            key = tuple(s["key"])
            weights = s.get("weights") or [1.0] * len(s["members"])
            sgs.append(_make_subgraph(key, tuple(s["members"]), tuple(s["sources"]), weights))
        return cls(sgs, tuple(d["isolated"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path: str | Path) -> Path:
        return atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "HomologyPartition":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def __eq__(self, other) -> bool:
        return isinstance(other, HomologyPartition) and self.to_dict() == other.to_dict()


def _make_subgraph(key: Key, members: tuple[str, ...], sources: tuple[str, ...],
                   weights: Sequence[float] | None = None) -> HomologousSubgraph:
    weights = weights or [1.0] * len(members)
    snode = SNode(name=key[1], meta={"subject": key[0], "predicate": key[1],
                                     "sources": list(sources)}, num=len(members))
    edges = tuple(HomologousEdge(m, float(w)) for m, w in zip(members, weights))
    return HomologousSubgraph(key, snode, members, edges, sources)


def homology_key(g: KnowledgeGraph, tid: str, aliases: dict[str, str] | None = None) -> Key:
    t = g.triples[tid]
    return t.subject, normalize_predicate(t.predicate, aliases)


def match_homologous(g: KnowledgeGraph, min_sources: int = 2,
                     aliases: dict[str, str] | None = None,
                     min_members: int = 2) -> HomologyPartition:
    groups: dict[Key, list[str]] = defaultdict(list)
    canonical: dict[str, str] = {}  # few distinct predicates; normalize each once
    for tid, t in g.triples.items():
        pred = canonical.get(t.predicate)
        if pred is None:
            pred = canonical[t.predicate] = normalize_predicate(t.predicate, aliases)
        groups[(t.subject, pred)].append(tid)
    subgraphs, isolated = [], []
    for key in sorted(groups):
        members = groups[key]
        if len(members) < min_members:
            isolated.extend(members)
            continue
        members = tuple(sorted(members))
        sources = tuple(sorted({p.source_id for m in members for p in g.triples[m].provenance}))
        if len(sources) >= min_sources:
            subgraphs.append(_make_subgraph(key, members, sources))
        else:
            isolated.extend(members)
    return HomologyPartition(subgraphs, tuple(sorted(isolated)))


def match_homologous_oracle(g: KnowledgeGraph, min_sources: int = 2,
                            aliases: dict[str, str] | None = None,
                            min_members: int = 2) -> tuple[set[frozenset], set[str]]:
    """Pairwise reference grouping: compare every triple against every other."""
    ids = list(g.triples)
    keys = {tid: homology_key(g, tid, aliases) for tid in ids}
    assigned: set[str] = set()
    groups = []
    for a in ids:
        if a in assigned:
            continue
        group = {a} | {b for b in ids if b != a and keys[b] == keys[a]}
        assigned |= group
        groups.append(group)
    subgraphs, isolated = set(), set()
    for group in groups:
        srcs = {p.source_id for m in group for p in g.triples[m].provenance}
        if len(group) >= min_members and len(srcs) >= min_sources:
            subgraphs.add(frozenset(group))
        else:
            isolated |= group
    return subgraphs, isolated


@dataclass
class HomologousLineGraph:
    """Union of every subgraph's complete line graph plus isolated degree-0 nodes."""

    groups: tuple[tuple[str, ...], ...]
    isolated: tuple[str, ...]

    @property
    def nodes(self) -> list[str]:
        return [m for grp in self.groups for m in grp] + list(self.isolated)

    def node_count(self) -> int:
        return sum(len(g) for g in self.groups) + len(self.isolated)

    def edges(self) -> Iterator[tuple[str, str]]:
        for grp in self.groups:
            yield from combinations(grp, 2)

    def edge_count(self) -> int:
        return sum(len(g) * (len(g) - 1) // 2 for g in self.groups)

    def neighbors(self, tid: str) -> set[str]:
        for grp in self.groups:
            if tid in grp:
                return set(grp) - {tid}
        return set()


def build_homologous_line_graph(p: HomologyPartition) -> HomologousLineGraph:
    return HomologousLineGraph(tuple(sg.members for sg in p.subgraphs), tuple(p.isolated))


def candidates_for_query(p: HomologyPartition, entities: Iterable[str],
                         relations: Iterable[str],
                         aliases: dict[str, str] | None = None) -> list[HomologousSubgraph]:
    """Subgraphs whose key satisfies the query's entity and relation constraints.

    An empty constraint list matches anything on that side; both empty is an error.
    """
    ents = set(entities)
    rels = {normalize_predicate(r, aliases) for r in relations}
    if not ents and not rels:
        raise NoCandidates("query names no entity or relation")
    out = [sg for sg in p.subgraphs
           if (not ents or sg.key[0] in ents) and (not rels or sg.key[1] in rels)]
    if not out:
        raise NoCandidates(f"no homologous subgraph for entities={sorted(ents)} relations={sorted(rels)}")
    return out


def restrict_partition(p: HomologyPartition, g: KnowledgeGraph, keep: set[str],
                       min_sources: int = 2) -> HomologyPartition:
    """Drop triples outside ``keep``; subgraphs that fall below the thresholds dissolve."""
    subgraphs, isolated = [], [t for t in p.isolated if t in keep]
    for sg in p.subgraphs:
        members = tuple(m for m in sg.members if m in keep)
        sources = tuple(sorted({s for m in members for s in g.triples[m].sources}))
        if len(members) >= 2 and len(sources) >= min_sources:
            weights = [e.weight for e in sg.edges if e.member in keep]
            subgraphs.append(_make_subgraph(sg.key, members, sources, weights))
        else:
            isolated.extend(members)
    return HomologyPartition(subgraphs, tuple(sorted(isolated)))
