"""Format adapters that normalize raw source files into linked-data records.

Every record carries a ``jsc`` tree with the reserved root keys ``@ctx``,
``@id``, ``@type`` and ``@graph``. Tabular sources additionally get a
column index (decomposition storage: one row-offset list per attribute).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import uuid
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

from .errors import (
    AdapterMismatch,
    DuplicateDocument,
    EmptyInput,
    IngestError,
    MalformedTable,
    MalformedTree,
    NoColumnIndex,
    UnknownAttribute,
)
from .io import atomic_write_text
from .text import infer_type

log = logging.getLogger(__name__)

FORMATS = ("structured", "semi_structured", "unstructured")
VOCAB = "urn:multirag:"
_RECORD_NS = uuid.UUID("6f1c3a52-8d0e-4b8e-9a35-2f3f5a1e7c10")

DEFAULT_CHUNK_SIZE = 512
DEFAULT_CHUNK_OVERLAP = 64


@dataclass(frozen=True)
class RawDocument:
    source_id: str
    domain: str
    name: str
    content: bytes
    format: str
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ValueError(f"unknown format {self.format!r}; expected one of {FORMATS}")
        if isinstance(self.content, str):
            object.__setattr__(self, "content", self.content.encode("utf-8"))


@dataclass(frozen=True)
class ColumnIndex:
    attribute: str
    column_id: int
    row_refs: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"attribute": self.attribute, "column_id": self.column_id, "row_refs": list(self.row_refs)}

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnIndex":
        return cls(d["attribute"], int(d["column_id"]), tuple(d["row_refs"]))


@dataclass
class NormalizedRecord:
    id: str
    domain: str
    name: str
    meta: dict[str, str]
    jsc: dict[str, Any]
    cols_index: dict[str, ColumnIndex] | None = None

    @property
    def source_id(self) -> str:
        return self.jsc["@ctx"]["source"]

    @property
    def kind(self) -> str:
        return self.jsc["@type"]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "domain": self.domain,
            "name": self.name,
            "meta": dict(self.meta),
            "jsc": self.jsc,
            "cols_index": None if self.cols_index is None
            else {k: v.to_dict() for k, v in self.cols_index.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizedRecord":
        expected = {"id", "domain", "name", "meta", "jsc", "cols_index"}
        if set(d) != expected:
            raise ValueError(f"record keys {sorted(d)} != {sorted(expected)}")
        ci = d["cols_index"]
        return cls(
            id=d["id"], domain=d["domain"], name=d["name"], meta=dict(d["meta"]), jsc=d["jsc"],
            cols_index=None if ci is None else {k: ColumnIndex.from_dict(v) for k, v in ci.items()},
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def loads(cls, text: str) -> "NormalizedRecord":
        return cls.from_dict(json.loads(text))


def record_id(source_id: str, name: str) -> str:
    return "rec-" + uuid.uuid5(_RECORD_NS, f"{source_id}\x1f{name}").hex[:16]


def _context(doc: RawDocument) -> dict:
    return {"@vocab": VOCAB, "domain": doc.domain, "source": doc.source_id}


def _envelope(doc: RawDocument, rid: str, kind: str, payload: Any) -> dict:
    return {"@ctx": _context(doc), "@id": f"{VOCAB}record:{rid}", "@type": kind, "@graph": payload}


def _decode(doc: RawDocument) -> str:
    try:
        return doc.content.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise IngestError(f"content is not UTF-8: {exc}", doc.source_id, doc.name) from exc


# ---------------------------------------------------------------- adapters

def normalize_structured(doc: RawDocument) -> NormalizedRecord:
    """Delimited table with a header row -> row objects plus a column index."""
    if doc.format != "structured":
        raise AdapterMismatch(f"structured adapter got {doc.format}", doc.source_id, doc.name)
    text = _decode(doc)
    if not text.strip():
        raise EmptyInput("empty table", doc.source_id, doc.name)
    delimiter = doc.meta.get("delimiter", ",")
    rows = list(csv.reader(io.StringIO(text), delimiter=delimiter))
    rows = [r for r in rows if any(c.strip() for c in r)]
    header = [h.strip() for h in rows[0]]
    if not header or any(not h for h in header):
        raise MalformedTable("missing or blank header cell", doc.source_id, doc.name)
    if len(set(header)) != len(header):
        raise MalformedTable("duplicate header attribute", doc.source_id, doc.name)

    row_objs = []
    for i, raw in enumerate(rows[1:]):
        if len(raw) != len(header):
            raise MalformedTable(f"row {i} has {len(raw)} cells, header has {len(header)}",
                                 doc.source_id, doc.name)
        obj: dict[str, Any] = {"@id": f"row:{i}"}
        for attr, cell in zip(header, raw):
            cell = cell.strip()
            obj[attr] = {"@value": cell, "@type": infer_type(cell)}
        row_objs.append(obj)

    rid = record_id(doc.source_id, doc.name)
    cols = {
        attr: ColumnIndex(attr, j, tuple(range(len(row_objs))))
        for j, attr in enumerate(header)
    }
    payload = {"columns": header, "rows": row_objs}
    return NormalizedRecord(rid, doc.domain, doc.name, dict(doc.meta),
                            _envelope(doc, rid, "Table", payload), cols)


def _xml_to_tree(elem: ET.Element) -> Any:
    node: dict[str, Any] = {f"@{k}": v for k, v in elem.attrib.items()}
    for child in elem:
        value = _xml_to_tree(child)
        if child.tag in node:
            if not isinstance(node[child.tag], list):
                node[child.tag] = [node[child.tag]]
            node[child.tag].append(value)
        else:
            node[child.tag] = value
    text = (elem.text or "").strip()
    if not node:
        return text
    if text:
        node["#text"] = text
    return node


def normalize_semistructured(doc: RawDocument) -> NormalizedRecord:
    """JSON or XML tree -> nested jsc payload (XML attributes become ``@name`` leaves)."""
    if doc.format != "semi_structured":
        raise AdapterMismatch(f"semi-structured adapter got {doc.format}", doc.source_id, doc.name)
    text = _decode(doc).strip()
    if not text:
        raise EmptyInput("empty tree", doc.source_id, doc.name)
    if text.startswith("<"):
        try:
            root = ET.fromstring(text)
        except ET.ParseError as exc:
            raise MalformedTree(f"invalid XML: {exc}", doc.source_id, doc.name) from exc
        tree = {root.tag: _xml_to_tree(root)}
        syntax = "xml"
    else:
        try:
            tree = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedTree(f"invalid JSON: {exc}", doc.source_id, doc.name) from exc
        syntax = "json"
    rid = record_id(doc.source_id, doc.name)
    env = _envelope(doc, rid, "Tree", {"syntax": syntax, "root": tree})
    return NormalizedRecord(rid, doc.domain, doc.name, dict(doc.meta), env, None)


def chunk_offsets(length: int, size: int = DEFAULT_CHUNK_SIZE,
                  overlap: int = DEFAULT_CHUNK_OVERLAP) -> list[tuple[int, int]]:
    if size <= 0 or not 0 <= overlap < size:
        raise ValueError("need size > 0 and 0 <= overlap < size")
    if length <= size:
        return [(0, length)]
    step = size - overlap
    n = 1 + math.ceil((length - size) / step)
    return [(i * step, min(i * step + size, length)) for i in range(n)]


def normalize_unstructured(doc: RawDocument, chunk_size: int = DEFAULT_CHUNK_SIZE,
                           chunk_overlap: int = DEFAULT_CHUNK_OVERLAP) -> NormalizedRecord:
    if doc.format != "unstructured":
        raise AdapterMismatch(f"unstructured adapter got {doc.format}", doc.source_id, doc.name)
    body = _decode(doc)
    if not body.strip():
        raise EmptyInput("whitespace-only text", doc.source_id, doc.name)
    chunks = [{"@id": f"chunk:{i}", "start": s, "end": e}
              for i, (s, e) in enumerate(chunk_offsets(len(body), chunk_size, chunk_overlap))]
    rid = record_id(doc.source_id, doc.name)
    env = _envelope(doc, rid, "Text", {"text": body, "chunks": chunks})
    return NormalizedRecord(rid, doc.domain, doc.name, dict(doc.meta), env, None)


@dataclass(frozen=True)
class Adapter:
    format: str
    parse: Callable[[RawDocument], NormalizedRecord]

    def __call__(self, doc: RawDocument) -> NormalizedRecord:
        if doc.format != self.format:
            raise AdapterMismatch(f"{self.format} adapter cannot parse {doc.format} input",
                                  doc.source_id, doc.name)
        return self.parse(doc)


def default_adapters(chunk_size: int = DEFAULT_CHUNK_SIZE,
                     chunk_overlap: int = DEFAULT_CHUNK_OVERLAP) -> dict[str, Adapter]:
    return {
        "structured": Adapter("structured", normalize_structured),
        "semi_structured": Adapter("semi_structured", normalize_semistructured),
        "unstructured": Adapter(
            "unstructured", lambda d: normalize_unstructured(d, chunk_size, chunk_overlap)),
    }


# ---------------------------------------------------------------- column access

def scan_column(record: NormalizedRecord, attribute: str) -> list[str]:
    """Full scan of the row objects; the reference the column index must agree with."""
    if record.kind != "Table":
        raise NoColumnIndex(f"record {record.id} is not tabular")
    rows = record.jsc["@graph"]["rows"]
    if attribute not in record.jsc["@graph"]["columns"]:
        raise UnknownAttribute(attribute)
    return [row[attribute]["@value"] for row in rows]


def lookup_column(record: NormalizedRecord, attribute: str) -> list[str]:
    if record.cols_index is None:
        raise NoColumnIndex(f"record {record.id} has no column index")
    try:
        col = record.cols_index[attribute]
    except KeyError:
        raise UnknownAttribute(attribute) from None
    rows = record.jsc["@graph"]["rows"]
    return [rows[r][attribute]["@value"] for r in col.row_refs]


def get_path(tree: Any, path: Iterable[str | int]) -> Any:
    node = tree
    for step in path:
        node = node[step]
    return node


def iter_leaves(tree: Any, prefix: tuple = ()) -> Iterator[tuple[tuple, Any]]:
    """Depth-first (path, scalar) pairs of a JSON-like tree."""
    if isinstance(tree, dict):
        for k, v in tree.items():
            yield from iter_leaves(v, prefix + (k,))
    elif isinstance(tree, list):
        for i, v in enumerate(tree):
            yield from iter_leaves(v, prefix + (i,))
    else:
        yield prefix, tree


# ---------------------------------------------------------------- store

class RecordStore:
    """Append-only record collection keyed by record id."""

    FILENAME = "records.jsonl"

    def __init__(self, records: Iterable[NormalizedRecord] = ()):
        self._records: dict[str, NormalizedRecord] = {}
        for r in records:
            self.add(r)

    def add(self, record: NormalizedRecord) -> None:
        if record.id in self._records:
            raise DuplicateDocument(f"record id {record.id} already in store")
        self._records[record.id] = record

    def get(self, rid: str) -> NormalizedRecord:
        return self._records[rid]

    def __contains__(self, rid) -> bool:
        return rid in self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[NormalizedRecord]:
        return iter(self._records.values())

    def ids(self) -> list[str]:
        return list(self._records)

    def __eq__(self, other) -> bool:
        return isinstance(other, RecordStore) and self._records == other._records

    __hash__ = None

    def dumps(self) -> str:
        return "".join(r.dumps() + "\n" for r in sorted(self, key=lambda r: r.id))

    def save(self, out: str | Path) -> Path:
        out = Path(out)
        path = out / self.FILENAME if out.suffix != ".jsonl" else out
        atomic_write_text(path, self.dumps())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RecordStore":
        path = Path(path)
        if path.is_dir():
            path = path / cls.FILENAME
        lines = path.read_text(encoding="utf-8").splitlines()
        return cls(NormalizedRecord.loads(line) for line in lines if line.strip())


def fuse_sources(batches: Iterable[tuple[Adapter | None, list[RawDocument]]],
                 on_error: str = "fail", workers: int = 1,
                 adapters: dict[str, Adapter] | None = None) -> RecordStore:
    """Run every document through its adapter and union the outputs.

    ``adapter=None`` in a batch routes each document by its format.
    ``on_error`` is ``"fail"`` (raise the first adapter error) or ``"skip"``
    (log it and continue).
    """
    if on_error not in ("fail", "skip"):
        raise ValueError("on_error must be 'fail' or 'skip'")
    routes = adapters or default_adapters()
    jobs: list[tuple[Adapter, RawDocument]] = []
    seen: set[tuple[str, str]] = set()
    for adapter, docs in batches:
        for doc in docs:
            key = (doc.source_id, doc.name)
            if key in seen:
                raise DuplicateDocument("duplicate (source_id, name) in batch", *key)
            seen.add(key)
            jobs.append((adapter or routes[doc.format], doc))

    def run(job):
        adapter, doc = job
        try:
            return adapter(doc)
        except IngestError:
            raise
        except Exception as exc:  # unexpected parser failure: attach identity
            raise IngestError(str(exc), doc.source_id, doc.name) from exc

    store = RecordStore()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            futures = [pool.submit(run, j) for j in jobs]
            results = []
            for fut in futures:
                try:
                    results.append(fut.result())
                except IngestError as exc:
                    if on_error == "fail":
                        raise
                    log.warning("skipping document: %s", exc)
    else:
        results = []
        for job in jobs:
            try:
                results.append(run(job))
            except IngestError as exc:
                if on_error == "fail":
                    raise
                log.warning("skipping document: %s", exc)
    for rec in results:
        store.add(rec)
    return store


def load_manifest(directory: str | Path) -> list[RawDocument]:
    """Read ``manifest.json`` entries ``{path, domain, format, source_id[, name, meta]}``."""
    directory = Path(directory)
    entries = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if isinstance(entries, dict):
        entries = entries["files"]
    docs = []
    for e in entries:
        path = directory / e["path"]
        docs.append(RawDocument(
            source_id=e["source_id"], domain=e["domain"], name=e.get("name", Path(e["path"]).name),
            content=path.read_bytes(), format=e["format"],
            meta={str(k): str(v) for k, v in e.get("meta", {}).items()},
        ))
    return docs
