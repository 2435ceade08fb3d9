"""Generation clients.

Every prompt step of the engine goes through ``GenerationClient.complete``
with a ``kind`` tag (``ner``, ``triple``, ``std``, ``logic_form``,
``authority``, ``answer``). ``MockClient`` answers from a JSON fixture and
is fully deterministic; ``HttpClient`` talks to an OpenAI-compatible chat
endpoint at temperature 0.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from pathlib import Path
from typing import Any

from .errors import ClientError

ENV_ENDPOINT = "MULTIRAG_ENDPOINT"
ENV_API_KEY = "MULTIRAG_API_KEY"
ENV_MODEL = "MULTIRAG_MODEL"


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class GenerationClient:
    """Base class: counts calls per kind and enforces an optional request budget."""

    mode = "abstract"

    def __init__(self, budget: int | None = None):
        self.budget = budget
        self.calls: Counter[str] = Counter()
        self.latency_s = 0.0
        self._lock = threading.Lock()

    @property
    def total_calls(self) -> int:
        return sum(self.calls.values())

    def reset_counters(self) -> None:
        with self._lock:
            self.calls.clear()
            self.latency_s = 0.0

    def complete(self, kind: str, prompt: str) -> str:
        with self._lock:
            if self.budget is not None and self.total_calls >= self.budget:
                raise ClientError(f"request budget of {self.budget} exhausted")
            self.calls[kind] += 1
        t0 = time.perf_counter()
        try:
            return self._complete(kind, prompt)
        finally:
            with self._lock:
                self.latency_s += time.perf_counter() - t0

    def _complete(self, kind: str, prompt: str) -> str:
        raise NotImplementedError


_TRUSTED_LINE = re.compile(r"^\+ .*?= (?P<value>.+?) \[", re.M)


class MockClient(GenerationClient):
    """Fixture-driven client.

    Fixture layout (all sections optional)::

        {"replies":  {"<sha256 of prompt>": "reply", ...},
         "rules":    [{"kind": "authority", "contains": ["src-a"], "reply": "2"},
                      {"kind": "authority", "matches": "^candidate fact: .*\\| year \\| \\D",
                       "reply": "-8"}, ...],
         "defaults": {"authority": "0"}}

    Lookup order: exact prompt hash, first matching rule (every ``contains``
    substring present and the ``matches`` regex found, both case-insensitive,
    ``^``/``$`` anchored per line), per-kind default. With nothing
    found, ``answer`` prompts get an extractive reply built from the
    trusted-evidence lines; any other kind raises ``ClientError``.
    """

    mode = "mock"

    def __init__(self, fixture: dict[str, Any] | None = None, budget: int | None = None):
        super().__init__(budget)
        fixture = fixture or {}
        self.replies: dict[str, str] = dict(fixture.get("replies", {}))
        self.rules: list[dict] = list(fixture.get("rules", []))
        self.defaults: dict[str, str] = dict(fixture.get("defaults", {}))

    @classmethod
    def from_path(cls, path: str | Path, budget: int | None = None) -> "MockClient":
        path = Path(path)
        if path.is_dir():
            path = path / "mock.json"
        return cls(json.loads(path.read_text(encoding="utf-8")), budget)

    def _complete(self, kind: str, prompt: str) -> str:
        h = prompt_hash(prompt)
        if h in self.replies:
            return self.replies[h]
        low = prompt.casefold()
        for rule in self.rules:
            if rule.get("kind", kind) != kind:
                continue
            needles = rule.get("contains", [])
            if isinstance(needles, str):
                needles = [needles]
            pattern = rule.get("matches")
            if pattern and not re.search(pattern, prompt, re.I | re.M):
                continue
            if all(n.casefold() in low for n in needles):
                if "error" in rule:
                    raise ClientError(rule["error"])
                return rule["reply"]
        if kind in self.defaults:
            return self.defaults[kind]
        if kind == "answer":
            values = _TRUSTED_LINE.findall(prompt)
            return "; ".join(dict.fromkeys(values)) if values else "Insufficient trusted evidence."
        raise ClientError(f"mock fixture has no reply for kind={kind!r} (hash {h[:12]})")


class HttpClient(GenerationClient):
    """One JSON POST per prompt to an OpenAI-compatible ``/chat/completions`` endpoint."""

    mode = "live"

    def __init__(self, endpoint: str | None = None, model: str | None = None,
                 api_key: str | None = None, budget: int | None = None, timeout: float = 60.0):
        super().__init__(budget)
        self.endpoint = endpoint or os.environ.get(ENV_ENDPOINT)
        if not self.endpoint:
            raise ClientError(f"live mode needs an endpoint (set {ENV_ENDPOINT})")
        self.model = model or os.environ.get(ENV_MODEL, "default")
        self.api_key = api_key or os.environ.get(ENV_API_KEY)
        self.timeout = timeout

    def _complete(self, kind: str, prompt: str) -> str:
        body = json.dumps({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
            "metadata": {"kind": kind},
        }).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise ClientError(f"request to {self.endpoint} failed: {exc}") from exc
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ClientError(f"unexpected response shape: {str(payload)[:200]}") from None
