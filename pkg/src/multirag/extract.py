"""Entity and triple extraction.

Tables and trees go through a deterministic rule-based extractor. Free text
goes through a ``GenerationClient`` driven by three prompt roles: ``ner``
(entity list), ``triple`` (SPO lines) and ``std`` (alias map).
"""

from __future__ import annotations

import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

from .client import GenerationClient
from .errors import NoExtractableContent, ReplyParseError
from .graph import Entity, KnowledgeGraph, Provenance, Triple
from .ingest import NormalizedRecord, RecordStore
from .text import entity_id, fold, infer_type

log = logging.getLogger(__name__)

PROMPT_KINDS = ("ner", "triple", "std", "logic_form", "authority", "answer")
EXTRACTION_KINDS = ("ner", "triple", "std")
_EXAMPLE_SPLIT = re.compile(r"^--- (example|task)\s*$", re.M)


@dataclass(frozen=True)
class ExtractionPrompt:
    kind: str
    instruction: str
    examples: tuple[tuple[str, str], ...] = ()
    task: str = "input: {{input}}\noutput:"

    def __post_init__(self):
        if self.kind not in PROMPT_KINDS:
            raise ValueError(f"unknown prompt kind {self.kind!r}")

    def render(self, text: str) -> str:
        parts = [self.instruction.strip()]
        for inp, out in self.examples:
            parts.append(f"example input: {inp}\nexample output: {out}")
        parts.append(self.task.replace("{{input}}", text))
        return "\n\n".join(parts)

    @classmethod
    def parse(cls, kind: str, text: str) -> "ExtractionPrompt":
        """Parse a ``.prompt`` file: instruction, ``--- example`` blocks, one ``--- task`` block."""
        pieces = _EXAMPLE_SPLIT.split(text)
        instruction = pieces[0]
        examples, task = [], "{{input}}"
        for label, body in zip(pieces[1::2], pieces[2::2]):
            if label == "example":
                m = re.search(r"^input:\s*(.*?)\s*^output:\s*(.*?)\s*\Z", body, re.M | re.S)
                if not m:
                    raise ValueError(f"malformed example block in {kind} prompt")
                examples.append((m.group(1), m.group(2)))
            else:
                task = body.strip()
        if "{{input}}" not in task:
            raise ValueError(f"{kind} prompt lacks an {{{{input}}}} slot")
        return cls(kind, instruction, tuple(examples), task)


def load_prompts(directory: str | Path | None = None) -> dict[str, ExtractionPrompt]:
    """Prompts from ``<kind>.prompt`` files; missing kinds fall back to the bundled set."""
    out = {}
    bundled = resources.files("multirag") / "prompts"
    for kind in PROMPT_KINDS:
        path = Path(directory) / f"{kind}.prompt" if directory else None
        if path is not None and path.exists():
            text = path.read_text(encoding="utf-8")
        else:
            text = (bundled / f"{kind}.prompt").read_text(encoding="utf-8")
        out[kind] = ExtractionPrompt.parse(kind, text)
    return out


# ---------------------------------------------------------------- rule-based

def _entity_nodes(tree: Any) -> list[dict]:
    """Dicts that stand for one entity each: list items, or the innermost non-wrapper dict."""
    if isinstance(tree, list):
        out = []
        for item in tree:
            out.extend(_entity_nodes(item))
        return out
    if isinstance(tree, dict):
        if len(tree) == 1:
            (only,) = tree.values()
            if isinstance(only, (dict, list)):
                return _entity_nodes(only)
        return [tree] if tree else []
    return []


def _flatten(node: Any, prefix: tuple[str, ...] = ()) -> list[tuple[str, str]]:
    """(dotted attribute path, scalar) pairs; list positions are dropped from the path."""
    out = []
    if isinstance(node, dict):
        for k, v in node.items():
            out.extend(_flatten(v, prefix if k == "#text" else prefix + (str(k),)))
    elif isinstance(node, list):
        for v in node:
            out.extend(_flatten(v, prefix))
    elif node is not None and str(node).strip():
        out.append((".".join(prefix), str(node).strip()))
    return out


def _row_triples(record: NormalizedRecord, subject_label: str, cells: list[tuple[str, str]],
                 ref: str, etype: str) -> tuple[Entity, list[Triple]]:
    prov = Provenance(record.id, record.source_id, ref)
    sid = entity_id(subject_label)
    ent = Entity(sid, subject_label, etype, (prov,), (subject_label,))
    triples = [Triple.make(sid, attr, value, "literal", infer_type(value), (prov,))
               for attr, value in cells if attr]
    return ent, triples


def extract_rule_based(record: NormalizedRecord) -> tuple[list[Entity], list[Triple]]:
    """One subject entity per row (or tree entity node); one triple per non-empty cell.

    The subject is the value of ``meta["key"]`` when set, else the first column
    (tables) or first scalar attribute (trees).
    """
    etype = record.meta.get("entity_type", record.domain or "Thing")
    key = record.meta.get("key")
    entities: list[Entity] = []
    triples: list[Triple] = []
    if record.kind == "Table":
        payload = record.jsc["@graph"]
        columns = payload["columns"]
        key_attr = key if key in columns else columns[0]
        for row in payload["rows"]:
            label = row[key_attr]["@value"]
            if not label:
                continue
            cells = [(c, row[c]["@value"]) for c in columns if row[c]["@value"]]
            ent, ts = _row_triples(record, label, cells, row["@id"], etype)
            entities.append(ent)
            triples.extend(ts)
    elif record.kind == "Tree":
        for i, node in enumerate(_entity_nodes(record.jsc["@graph"]["root"])):
            cells = _flatten(node)
            if not cells:
                continue
            label = None
            if key:
                label = next((v for a, v in cells if a.lstrip("@") == key.lstrip("@")), None)
            if label is None:
                label = cells[0][1]
            ent, ts = _row_triples(record, label, cells, f"node:{i}", etype)
            entities.append(ent)
            triples.extend(ts)
    if not triples:
        raise NoExtractableContent(f"record {record.id} ({record.kind}) yields no triples")
    return entities, triples


# ---------------------------------------------------------------- client-backed

def _chunks(record: NormalizedRecord) -> list[tuple[str, str]]:
    if record.kind != "Text":
        raise NoExtractableContent(f"record {record.id} is not free text")
    payload = record.jsc["@graph"]
    text = payload["text"]
    return [(c["@id"], text[c["start"]:c["end"]]) for c in payload["chunks"]]


def _parse_json(reply: str, kind: str) -> Any:
    body = reply.strip()
    fence = re.match(r"^```(?:json)?\s*(.*?)\s*```$", body, re.S)
    if fence:
        body = fence.group(1)
    try:
        return json.loads(body)
    except json.JSONDecodeError as exc:
        raise ReplyParseError(f"{kind} reply is not JSON: {reply[:80]!r}") from exc


def parse_entity_reply(reply: str) -> list[tuple[str, str]]:
    data = _parse_json(reply, "ner")
    if not isinstance(data, list):
        raise ReplyParseError("ner reply must be a JSON array")
    out = []
    for item in data:
        if isinstance(item, str):
            label, etype = item, "Thing"
        elif isinstance(item, dict) and isinstance(item.get("label", item.get("name")), str):
            label, etype = item.get("label", item.get("name")), str(item.get("type", "Thing"))
        else:
            raise ReplyParseError(f"bad entity item {item!r}")
        if label.strip():
            out.append((label.strip(), etype))
    return out


def extract_entities(record: NormalizedRecord, client: GenerationClient,
                     prompt: ExtractionPrompt) -> list[Entity]:
    if prompt.kind != "ner":
        raise ValueError("extract_entities needs a ner prompt")
    found: dict[str, Entity] = {}
    for ref, text in _chunks(record):
        for label, etype in parse_entity_reply(client.complete("ner", prompt.render(text))):
            prov = Provenance(record.id, record.source_id, ref)
            eid = entity_id(label)
            if eid in found:
                e = found[eid]
                found[eid] = replace(e, provenance=tuple(sorted(set(e.provenance) | {prov})))
            else:
                found[eid] = Entity(eid, label, etype, (prov,), (label,))
    return list(found.values())


_SPO_LINE = re.compile(r"^\(\s*(?P<s>[^,]+?)\s*,\s*(?P<p>[^,]+?)\s*,\s*(?P<o>.+?)\s*\)"
                       r"\s*(?:@\s*(?P<score>[0-9]*\.?[0-9]+))?$")


def parse_triple_reply(reply: str) -> list[tuple[str, str, str, float | None]]:
    body = reply.strip()
    if not body or body == "[]":
        return []
    if body.startswith("["):
        data = _parse_json(body, "triple")
        if not all(isinstance(x, list) and len(x) == 3 for x in data):
            raise ReplyParseError("triple JSON must be a list of [s, p, o]")
        return [(str(s), str(p), str(o), None) for s, p, o in data]
    out = []
    for line in body.splitlines():
        line = line.strip()
        if not line:
            continue
        m = _SPO_LINE.match(line)
        if not m:
            raise ReplyParseError(f"unparseable triple line {line!r}")
        score = float(m.group("score")) if m.group("score") else None
        out.append((m.group("s"), m.group("p"), m.group("o"), score))
    return out


class TripleList(list):
    """List of triples that also reports how many replies were filtered out."""

    dropped = 0


def extract_triples(record: NormalizedRecord, entities: Sequence[Entity],
                    client: GenerationClient, prompt: ExtractionPrompt) -> TripleList:
    if prompt.kind != "triple":
        raise ValueError("extract_triples needs a triple prompt")
    if not entities:
        raise ValueError("extract_triples requires a non-empty entity list")
    by_surface: dict[str, str] = {}
    for e in entities:
        for s in (e.label, *e.aliases):
            by_surface[fold(s)] = e.id
    labels = json.dumps(sorted({e.label for e in entities}), ensure_ascii=False)
    out = TripleList()
    for ref, text in _chunks(record):
        reply = client.complete("triple", prompt.render(f"{text} | entities: {labels}"))
        for s, p, o, score in parse_triple_reply(reply):
            sid = by_surface.get(fold(s))
            if sid is None:
                out.dropped += 1
                log.debug("dropping triple with unknown subject %r", s)
                continue
            prov = Provenance(record.id, record.source_id, ref)
            oid = by_surface.get(fold(o))
            if oid is not None:
                out.append(Triple.make(sid, p, oid, "entity", "string", (prov,), score))
            else:
                out.append(Triple.make(sid, p, o, "literal", infer_type(o), (prov,), score))
    if out.dropped:
        log.info("record %s: dropped %d ungrounded triples", record.id, out.dropped)
    return out


def resolve_aliases(alias_map: dict[str, str]) -> dict[str, str]:
    """Transitive closure of a surface -> canonical map (folded keys).

    Chains resolve to their end; a cycle resolves to its smallest member.
    """
    m = {fold(k): fold(v) for k, v in alias_map.items()}
    out = {}
    for start in m:
        path, cur = [start], start
        while cur in m and m[cur] not in path:
            cur = m[cur]
            path.append(cur)
        if cur in m:  # stopped because the next hop closes a cycle
            cycle = path[path.index(m[cur]):]
            cur = min(cycle)
        out[start] = cur
    return out


def standardize_entities(entities: Sequence[Entity], client: GenerationClient,
                         prompt: ExtractionPrompt) -> list[Entity]:
    """Merge aliases under canonical ids. Output size never exceeds input size."""
    if prompt.kind != "std":
        raise ValueError("standardize_entities needs a std prompt")
    if not entities:
        return []
    labels = sorted({e.label for e in entities})
    data = _parse_json(client.complete("std", prompt.render(json.dumps(labels, ensure_ascii=False))), "std")
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise ReplyParseError("std reply must be a JSON object of strings")
    display = {fold(v): v for v in data.values()}
    return merge_entities(entities, resolve_aliases(data), display)


def merge_entities(entities: Sequence[Entity], closure: dict[str, str],
                   display: dict[str, str] | None = None) -> list[Entity]:
    groups: dict[str, list[Entity]] = defaultdict(list)
    for e in entities:
        groups[closure.get(fold(e.label), fold(e.label))].append(e)
    merged = []
    for canon in sorted(groups):
        members = groups[canon]
        head = next((e for e in members if fold(e.label) == canon), None)
        head = head or min(members, key=lambda e: e.label)
        label = head.label if fold(head.label) == canon else (display or {}).get(canon, canon)
        surfaces = {s for e in members for s in (e.label, *e.aliases)}
        prov = {p for e in members for p in e.provenance}
        merged.append(Entity(entity_id(label), label, head.etype, tuple(sorted(prov)),
                             tuple(sorted(surfaces))))
    return merged


def alias_id_map(entities: Iterable[Entity]) -> dict[str, str]:
    """Surface-derived entity id -> canonical entity id."""
    out = {}
    for e in entities:
        for s in (e.label, *e.aliases):
            sid = entity_id(s)
            if sid != e.id:
                out[sid] = e.id
    return out


def remap_triples(triples: Iterable[Triple], id_map: dict[str, str]) -> list[Triple]:
    out = []
    for t in triples:
        s = id_map.get(t.subject, t.subject)
        o = id_map.get(t.object, t.object) if t.object_kind == "entity" else t.object
        if (s, o) == (t.subject, t.object):
            out.append(t)
        else:
            out.append(Triple.make(s, t.predicate, o, t.object_kind, t.object_type,
                                   t.provenance, t.score))
    return out


# ---------------------------------------------------------------- knowledge base

def build_kb(extractions: Iterable[tuple[Sequence[Entity], Sequence[Triple]]],
             promote_threshold: int | None = 2) -> KnowledgeGraph:
    """Union entities and triples of every record; identical (S, P, O) merge provenance.

    String literals asserted by at least ``promote_threshold`` distinct sources,
    or equal to a known entity label, become entity objects (``None`` disables).
    """
    entities: dict[str, Entity] = {}
    spo: dict[tuple[str, str, str], Triple] = {}

    def add_entity(e: Entity) -> None:
        if e.id in entities:
            old = entities[e.id]
            entities[e.id] = replace(
                old, provenance=tuple(sorted(set(old.provenance) | set(e.provenance))),
                aliases=tuple(sorted(set(old.aliases) | set(e.aliases))))
        else:
            entities[e.id] = e

    def add_triple(t: Triple) -> None:
        if t.spo in spo:
            old = spo[t.spo]
            prov = tuple(sorted(set(old.provenance) | set(t.provenance)))
            score = max((x for x in (old.score, t.score) if x is not None), default=None)
            spo[t.spo] = replace(old, provenance=prov, score=score)
        else:
            spo[t.spo] = t

    for ents, triples in extractions:
        for e in ents:
            add_entity(e)
        for t in triples:
            add_triple(t)

    if promote_threshold is not None:
        lit_sources: dict[str, set[str]] = defaultdict(set)
        for t in spo.values():
            if t.object_kind == "literal" and t.object_type == "string":
                lit_sources[fold(t.object)].update(p.source_id for p in t.provenance)
        promoted = list(spo.values())
        spo.clear()
        for t in promoted:
            if t.object_kind == "literal" and t.object_type == "string":
                oid = entity_id(t.object)
                known = oid in entities
                if oid != t.subject and (known or len(lit_sources[fold(t.object)]) >= promote_threshold):
                    if not known:
                        add_entity(Entity(oid, t.object, "Value", (), (t.object,)))
                    t = Triple.make(t.subject, t.predicate, oid, "entity", "string",
                                    t.provenance, t.score)
            add_triple(t)
    return KnowledgeGraph(entities.values(), spo.values())


def extract_store(store: RecordStore, client: GenerationClient | None = None,
                  prompts: dict[str, ExtractionPrompt] | None = None,
                  standardize: bool = True, promote_threshold: int | None = 2,
                  on_error: str = "skip") -> KnowledgeGraph:
    """Extract every record, standardize entities, and build the knowledge graph."""
    prompts = prompts or load_prompts()
    per_record: list[tuple[list[Entity], list[Triple]]] = []
    for record in sorted(store, key=lambda r: r.id):
        try:
            if record.kind == "Text":
                if client is None:
                    raise NoExtractableContent("free text needs a generation client")
                ents = extract_entities(record, client, prompts["ner"])
                tris = list(extract_triples(record, ents, client, prompts["triple"])) if ents else []
            else:
                ents, tris = extract_rule_based(record)
        except NoExtractableContent as exc:
            if on_error == "fail":
                raise
            log.warning("%s", exc)
            continue
        per_record.append((ents, tris))
    all_entities = [e for ents, _ in per_record for e in ents]
    if standardize and client is not None and all_entities:
        canon = standardize_entities(all_entities, client, prompts["std"])
        id_map = alias_id_map(canon)
        per_record = [([], remap_triples(tris, id_map)) for _, tris in per_record]
        per_record.insert(0, (canon, []))
    return build_kb(per_record, promote_threshold)
