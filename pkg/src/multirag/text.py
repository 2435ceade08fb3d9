"""String normalization shared by ingest, extraction, homology and retrieval."""

from __future__ import annotations

import re
import unicodedata

_DATE = r"\d{4}-\d{2}-\d{2}(?:[ T]\d{1,2}:\d{2}(?::\d{2})?)?"
_TIME = r"\d{1,2}:\d{2}(?::\d{2})?"
_NUMBER = r"[-+]?\d+(?:\.\d+)?"
_WORD = r"\w+(?:[-'’]\w+)*"

TOKEN_RE = re.compile(f"{_DATE}|{_TIME}|{_NUMBER}|{_WORD}", re.UNICODE)
DATE_RE = re.compile(rf"^{_DATE}$")
NUMBER_RE = re.compile(rf"^{_NUMBER}$")
_PUNCT_RE = re.compile(r"[\W_]+", re.UNICODE)
_SPACE_RE = re.compile(r"\s+")


def fold(text: str) -> str:
    """Casefold, NFKC-normalize and collapse whitespace."""
    text = unicodedata.normalize("NFKC", str(text)).casefold()
    return _SPACE_RE.sub(" ", text).strip()


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; dates, clock times and decimals stay whole."""
    return TOKEN_RE.findall(fold(text))


def infer_type(value: str) -> str:
    """Type tag for a cell: ``date``, ``number`` or ``string``."""
    v = str(value).strip()
    if DATE_RE.match(v):
        return "date"
    if NUMBER_RE.match(v):
        return "number"
    return "string"


def normalize_predicate(name: str, aliases: dict[str, str] | None = None) -> str:
    key = _PUNCT_RE.sub("", fold(name))
    if aliases:
        seen = set()
        while key in aliases and key not in seen:
            seen.add(key)
            key = aliases[key]
    return key


def normalize_alias_table(table: dict[str, str] | None) -> dict[str, str]:
    """Normalize both sides of a predicate alias table."""
    if not table:
        return {}
    out = {}
    for k, v in table.items():
        nk, nv = normalize_predicate(k), normalize_predicate(v)
        if nk != nv:
            out[nk] = nv
    return out


def entity_id(label: str) -> str:
    """Canonical entity identifier for a surface form."""
    return "ent:" + fold(label)


def contains_phrase(haystack: str, phrase: str) -> bool:
    """Token-boundary phrase match after folding."""
    needle = tokenize(phrase)
    if not needle:
        return False
    toks = tokenize(haystack)
    n = len(needle)
    return any(toks[i:i + n] == needle for i in range(len(toks) - n + 1))
