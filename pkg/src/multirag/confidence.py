"""Multi-level confidence computing.

Graph level: average pairwise mutual-information similarity of the claims in
a homologous subgraph. Node level: ``C(v) = S_n(v) + A(v)`` where ``S_n`` is
the mean similarity to the other claims on the same attribute and ``A`` mixes
a client-assessed authority (sigmoid of a mean-centered score) with the
source's historical credibility.

Similarity works on token distributions of the node contents. The joint
distribution pairs each content's tokens through an overlap-weighted
coupling: shared token mass ``m(x) = min(p(x), q(x))`` with total ``λ`` is put
on the diagonal with weight ``λ``, and the remainder is spread as the product
of the leftover marginals::

    J(x, y) = λ·m(x)·[x = y] + (p(x) - λ·m(x))·(q(y) - λ·m(y)) / (1 - λ²)

Its marginals are exactly ``p`` and ``q``. Identical contents give the
diagonal coupling (``I = H``, similarity 1); token-disjoint contents give the
product coupling (``I = 0``, similarity 0).
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

from .client import GenerationClient
from .errors import ClientError, EmptyContent, ReplyParseError, TooFewMembers
from .graph import KnowledgeGraph
from .homology import HomologousSubgraph, HomologyPartition, _make_subgraph
from .text import fold, tokenize

log = logging.getLogger(__name__)

SIMILARITY_MODES = ("symmetric_uncertainty", "literal_eq5")
SMOOTHING_MODES = ("none", "add_one")
_TOL = 1e-9


@dataclass(frozen=True)
class ConfidenceConfig:
    alpha: float = 0.5
    beta: float = 0.5
    node_threshold: float = 0.7
    graph_threshold: float = 0.5
    history_init_h: float = 50.0
    history_init_prior: float = 0.5
    similarity_mode: str = "symmetric_uncertainty"
    smoothing: str = "none"
    top_k: int = 2
    on_client_error: str = "filter"  # or "raise"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.similarity_mode not in SIMILARITY_MODES:
            raise ValueError(f"similarity_mode must be one of {SIMILARITY_MODES}")
        if self.smoothing not in SMOOTHING_MODES:
            raise ValueError(f"smoothing must be one of {SMOOTHING_MODES}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.on_client_error not in ("filter", "raise"):
            raise ValueError("on_client_error must be 'filter' or 'raise'")


# ---------------------------------------------------------------- distributions

class TokenDistribution:
    def __init__(self, probabilities: Mapping[str, float]):
        probs = dict(probabilities)
        if not probs:
            raise EmptyContent("empty distribution")
        if any(p <= 0 for p in probs.values()):
            raise ValueError("probabilities must be positive")
        if abs(math.fsum(probs.values()) - 1.0) > _TOL:
            raise ValueError("probabilities must sum to 1")
        self.probabilities = probs

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "TokenDistribution":
        counts = Counter(tokens)
        n = sum(counts.values())
        if n == 0:
            raise EmptyContent("no tokens")
        return cls({t: c / n for t, c in sorted(counts.items())})

    @classmethod
    def from_text(cls, text: str) -> "TokenDistribution":
        return cls.from_tokens(tokenize(text))

    def __getitem__(self, x: str) -> float:
        return self.probabilities.get(x, 0.0)

    def __len__(self) -> int:
        return len(self.probabilities)

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenDistribution) and self.probabilities == other.probabilities

    def support(self) -> set[str]:
        return set(self.probabilities)


class JointDistribution:
    def __init__(self, probabilities: Mapping[tuple[str, str], float],
                 marginals: tuple[TokenDistribution, TokenDistribution] | None = None):
        probs = {k: v for k, v in probabilities.items() if v > 0}
        if abs(math.fsum(probs.values()) - 1.0) > _TOL:
            raise ValueError("joint probabilities must sum to 1")
        if marginals is None:
            rows: Counter[str] = Counter()
            cols: Counter[str] = Counter()
            for (x, y), v in probs.items():
                rows[x] += v
                cols[y] += v
            marginals = (TokenDistribution(_renorm(rows)), TokenDistribution(_renorm(cols)))
        self.probabilities = probs
        self.marginals = marginals

    def check_marginals(self, tol: float = _TOL) -> bool:
        rows: dict[str, list[float]] = {}
        cols: dict[str, list[float]] = {}
        for (x, y), v in self.probabilities.items():
            rows.setdefault(x, []).append(v)
            cols.setdefault(y, []).append(v)
        px, py = self.marginals
        ok_x = all(abs(math.fsum(rows.get(x, [])) - p) <= tol for x, p in px.probabilities.items())
        ok_y = all(abs(math.fsum(cols.get(y, [])) - p) <= tol for y, p in py.probabilities.items())
        return ok_x and ok_y and set(rows) <= px.support() and set(cols) <= py.support()


def _renorm(counts: Mapping[str, float]) -> dict[str, float]:
    total = math.fsum(counts.values())
    return {k: v / total for k, v in sorted(counts.items()) if v > 0}


def entropy(d: TokenDistribution) -> float:
    """Shannon entropy in nats."""
    return max(0.0, -math.fsum(p * math.log(p) for p in d.probabilities.values()))


def mutual_information(j: JointDistribution) -> float:
    px, py = j.marginals
    total = math.fsum(v * math.log(v / (px[x] * py[y])) for (x, y), v in j.probabilities.items())
    return max(0.0, total)


def overlap_coupling(p: TokenDistribution, q: TokenDistribution) -> JointDistribution:
    """Joint of two token distributions with exactly ``p`` and ``q`` as marginals."""
    if p == q:
        return JointDistribution({(x, x): v for x, v in p.probabilities.items()}, (p, q))
    shared = {x: min(p[x], q[x]) for x in p.support() & q.support()}
    lam = math.fsum(shared.values())
    rest_p = {x: v - lam * shared.get(x, 0.0) for x, v in p.probabilities.items()}
    rest_q = {y: v - lam * shared.get(y, 0.0) for y, v in q.probabilities.items()}
    denom = 1.0 - lam * lam
    joint: dict[tuple[str, str], float] = {}
    for x, a in rest_p.items():
        if a <= 0:
            continue
        for y, b in rest_q.items():
            if b > 0:
                joint[(x, y)] = a * b / denom
    for x, v in shared.items():
        joint[(x, x)] = joint.get((x, x), 0.0) + lam * v
    return JointDistribution(joint, (p, q))


def add_one_smoothed(j: JointDistribution, n: int) -> JointDistribution:
    """Add one pseudo-count to every cell of the support grid at sample size ``n``."""
    px, py = j.marginals
    counts = {(x, y): n * j.probabilities.get((x, y), 0.0) + 1.0
              for x in px.probabilities for y in py.probabilities}
    total = math.fsum(counts.values())
    return JointDistribution({k: v / total for k, v in counts.items()})


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def similarity(v1: str, v2: str, mode: str = "symmetric_uncertainty",
               smoothing: str = "none") -> float:
    """Mutual-information similarity of two node contents, in [0, 1].

    ``symmetric_uncertainty`` returns 2I/(H1+H2); ``literal_eq5`` returns
    I/(H1+H2) whose ceiling is 0.5. When either side has a single distinct
    token the mutual information carries no signal, so equal contents score
    1 (0.5 in literal mode) and anything else falls back to token Jaccard.
    """
    t1, t2 = tokenize(v1), tokenize(v2)
    if not t1 or not t2:
        raise EmptyContent("similarity needs non-empty contents")
    p, q = TokenDistribution.from_tokens(t1), TokenDistribution.from_tokens(t2)
    scale = 2.0 if mode == "symmetric_uncertainty" else 1.0
    if mode not in SIMILARITY_MODES:
        raise ValueError(f"unknown similarity mode {mode!r}")
    if len(p) == 1 or len(q) == 1:
        return scale / 2.0 if p == q else jaccard(p.support(), q.support())
    if smoothing == "none":
        if p == q:
            return scale / 2.0
        if not p.support() & q.support():
            return 0.0
        j = overlap_coupling(p, q)
        h1, h2 = entropy(p), entropy(q)
    else:
        j = add_one_smoothed(overlap_coupling(p, q), len(t1) + len(t2))
        h1, h2 = entropy(j.marginals[0]), entropy(j.marginals[1])
    value = scale * mutual_information(j) / (h1 + h2)
    return min(1.0, max(0.0, value))


class SimilarityCache:
    """Memoized symmetric similarity keyed on the unordered content pair."""

    def __init__(self, mode: str = "symmetric_uncertainty", smoothing: str = "none"):
        self.mode, self.smoothing = mode, smoothing
        self._cache: dict[tuple[str, str], float] = {}

    def __call__(self, a: str, b: str) -> float:
        key = (a, b) if a <= b else (b, a)
        if key not in self._cache:
            self._cache[key] = similarity(key[0], key[1], self.mode, self.smoothing)
        return self._cache[key]


def graph_confidence(contents: Sequence[str], sim: Callable[[str, str], float] | None = None) -> float:
    """Mean similarity over ordered pairs of distinct members."""
    n = len(contents)
    if n < 2:
        raise TooFewMembers(f"graph confidence needs >= 2 members, got {n}")
    sim = sim or SimilarityCache()
    total = math.fsum(sim(contents[i], contents[j]) for i in range(n) for j in range(i + 1, n))
    return 2.0 * total / (n * n - n)


def node_consistency(v: str, peers: Sequence[str], sim: Callable[[str, str], float] | None = None) -> float:
    if not peers:
        return 0.0
    sim = sim or SimilarityCache()
    return math.fsum(sim(v, u) for u in peers) / len(peers)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def authority_llm(centered_score: float, beta: float = 0.5) -> float:
    return sigmoid(beta * centered_score)


def parse_authority_reply(reply: str) -> float:
    first = reply.strip().splitlines()[0].strip() if reply.strip() else ""
    try:
        value = float(first)
    except ValueError:
        raise ReplyParseError(f"authority reply is not a number: {first[:40]!r}") from None
    if not math.isfinite(value) or not -10.0 <= value <= 10.0:
        raise ReplyParseError(f"authority score {value} outside [-10, 10]")
    return value


def centered(scores: Mapping[str, float]) -> dict[str, float]:
    if not scores:
        return {}
    mean = math.fsum(scores.values()) / len(scores)
    return {k: v - mean for k, v in scores.items()}


# ---------------------------------------------------------------- history

@dataclass(frozen=True)
class Feedback:
    """Correct answers (with credibility scores) among the data retrieved for one query."""

    correct: Mapping[str, float] | frozenset = frozenset()
    retrieved: frozenset = frozenset()

    @property
    def correct_mass(self) -> float:
        if isinstance(self.correct, Mapping):
            return math.fsum(self.correct.values())
        return float(len(self.correct))

    @property
    def retrieved_count(self) -> int:
        return len(self.retrieved)

    @classmethod
    def counts(cls, correct: int, retrieved: int) -> "Feedback":
        return cls(frozenset(f"c{i}" for i in range(correct)),
                   frozenset(f"r{i}" for i in range(retrieved)))


NO_FEEDBACK = Feedback()


@dataclass(frozen=True)
class SourceStats:
    h: float = 50.0
    prior: float = 0.5

    def __post_init__(self):
        if self.h < 0 or not 0.0 <= self.prior <= 1.0:
            raise ValueError(f"invalid source stats h={self.h} prior={self.prior}")


@dataclass(frozen=True)
class SourceHistory:
    stats: Mapping[str, SourceStats] = field(default_factory=dict)
    init_h: float = 50.0
    init_prior: float = 0.5

    def get(self, source: str) -> SourceStats:
        return self.stats.get(source) or SourceStats(self.init_h, self.init_prior)

    def to_dict(self) -> dict:
        return {s: {"H": st.h, "prior": st.prior} for s, st in sorted(self.stats.items())}

    @classmethod
    def from_dict(cls, d: Mapping, init_h: float = 50.0, init_prior: float = 0.5) -> "SourceHistory":
        return cls({s: SourceStats(float(v.get("H", init_h)), float(v.get("prior", init_prior)))
                    for s, v in d.items()}, init_h, init_prior)


def authority_hist(stats: SourceStats, feedback: Feedback = NO_FEEDBACK) -> float:
    """Historical credibility blended with the current query's evidence."""
    denom = stats.h + feedback.retrieved_count
    if denom == 0:
        return stats.prior
    return (stats.h * stats.prior + feedback.correct_mass) / denom


def update_history(hist: SourceHistory, source: str, feedback: Feedback) -> SourceHistory:
    if feedback.retrieved_count == 0 and feedback.correct_mass == 0:
        return hist
    cur = hist.get(source)
    new = SourceStats(cur.h + feedback.retrieved_count, authority_hist(cur, feedback))
    stats = dict(hist.stats)
    stats[source] = new
    return replace(hist, stats=stats)


def node_authority(auth_llm: float, auth_hist: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return auth_llm
    if alpha == 0.0:
        return auth_hist
    return alpha * auth_llm + (1.0 - alpha) * auth_hist


# ---------------------------------------------------------------- MCC

@dataclass(frozen=True)
class NodeConfidence:
    triple_id: str
    consistency: float | None
    authority: float | None
    total: float | None
    verdict: str  # "kept" | "filtered"
    source: str | None = None
    auth_llm: float | None = None
    auth_hist: float | None = None
    reason: str = ""

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "triple_id", "consistency", "authority", "total", "verdict", "source",
            "auth_llm", "auth_hist", "reason")}


@dataclass
class MCCResult:
    verdicts: dict[str, NodeConfidence]
    graph_confidences: dict[tuple[str, str], float]
    kept: HomologyPartition
    filtered: set[str]
    history_computations: int = 0
    authority_calls: int = 0


def authority_prompt(g: KnowledgeGraph, tid: str, group: Sequence[str], template=None) -> str:
    t = g.triples[tid]
    lines = [f"candidate fact: {g.label(t.subject)} | {t.predicate} | {g.object_label(t)}"]
    lines += [f"candidate source: {s}" for s in t.sources]
    lines += [f"provenance: {p.record_id} {p.ref}" for p in t.provenance]
    others = [u for u in group if u != tid]
    if others:
        lines.append("competing claims:")
        for u in others:
            ou = g.triples[u]
            lines.append(f"- {g.object_label(ou)} (from {', '.join(ou.sources)})")
    body = "\n".join(lines)
    return template.render(body) if template is not None else body


class _Scorer:
    def __init__(self, g: KnowledgeGraph, cfg: ConfidenceConfig, client: GenerationClient | None,
                 hist: SourceHistory, feedback: Callable[[str], Feedback] | None, prompt=None):
        self.g, self.cfg, self.client, self.hist = g, cfg, client, hist
        self.feedback = feedback or (lambda source: NO_FEEDBACK)
        self.prompt = prompt
        self.sim = SimilarityCache(cfg.similarity_mode, cfg.smoothing)
        self.history_computations = 0
        self.authority_calls = 0

    def content(self, tid: str) -> str:
        return self.g.object_label(self.g.triples[tid])

    def claims(self, tids: Sequence[str]) -> list[tuple[str, str]]:
        return [(t, s) for t in tids for s in self.g.triples[t].sources]

    def claim_consistency(self, claim: tuple[str, str], claims: Sequence[tuple[str, str]]) -> float:
        peers = [self.content(u[0]) for u in claims if u != claim]
        return node_consistency(self.content(claim[0]), peers, self.sim)

    def llm_scores(self, tids: Sequence[str], group: Sequence[str]) -> tuple[dict[str, float], dict[str, str]]:
        raw, errors = {}, {}
        if self.cfg.alpha == 0.0 or self.client is None:
            return raw, errors
        for tid in tids:
            self.authority_calls += 1
            try:
                reply = self.client.complete("authority", authority_prompt(self.g, tid, group, self.prompt))
                raw[tid] = parse_authority_reply(reply)
            except (ClientError, ReplyParseError) as exc:
                if self.cfg.on_client_error == "raise":
                    raise
                errors[tid] = f"client error: {exc}"
        return raw, errors

    def score(self, tids: Sequence[str], group: Sequence[str], with_peers: bool) -> dict[str, NodeConfidence]:
        cfg = self.cfg
        raw, errors = self.llm_scores(tids, group)
        llm = {t: authority_llm(c, cfg.beta) for t, c in centered(raw).items()}
        all_claims = self.claims(group)
        out = {}
        for tid in tids:
            if tid in errors:
                out[tid] = NodeConfidence(tid, None, None, None, "filtered", reason=errors[tid])
                continue
            best = None
            for claim in self.claims([tid]):
                src = claim[1]
                s_n = self.claim_consistency(claim, all_claims) if with_peers else 0.0
                a_llm = llm.get(tid, 0.5) if cfg.alpha > 0 else None
                a_hist = None
                if cfg.alpha < 1.0:
                    self.history_computations += 1
                    a_hist = authority_hist(self.hist.get(src), self.feedback(src))
                a = node_authority(a_llm if a_llm is not None else 0.0,
                                   a_hist if a_hist is not None else 0.0, cfg.alpha)
                total = s_n + a
                if best is None or total > best.total:
                    verdict = "kept" if total > cfg.node_threshold else "filtered"
                    reason = "" if verdict == "kept" else f"C(v)={total:.3f} <= threshold {cfg.node_threshold}"
                    best = NodeConfidence(tid, s_n, a, total, verdict, src, a_llm, a_hist, reason)
            out[tid] = best
        return out


def mcc(subgraphs: Sequence[HomologousSubgraph], g: KnowledgeGraph, cfg: ConfidenceConfig,
        client: GenerationClient | None, hist: SourceHistory,
        feedback: Callable[[str], Feedback] | None = None, prompt=None,
        graph_level: bool = True, node_level: bool = True) -> MCCResult:
    """Graph-level gating then node-level filtering over each candidate subgraph.

    A member is scored once per source asserting it; its confidence is the
    best of those claims. Subgraphs whose graph confidence reaches the
    threshold consult only the members carrying the values of their ``top_k``
    most consistent claims; weaker subgraphs consult every member.
    """
    scorer = _Scorer(g, cfg, client, hist, feedback, prompt)
    verdicts: dict[str, NodeConfidence] = {}
    graph_conf: dict[tuple[str, str], float] = {}
    kept_sgs = []
    for sg in subgraphs:
        members = list(sg.members)
        claims = scorer.claims(members)
        consulted = members
        cg = None
        if graph_level:
            cg = graph_confidence([scorer.content(t) for t, _ in claims], scorer.sim)
            graph_conf[sg.key] = cg
            sg.snode.confidence = cg
            if cg >= cfg.graph_threshold:
                ranked = sorted(claims, key=lambda c: (-scorer.claim_consistency(c, claims), c))
                # members restating a top claim's value are the same evidence
                top = {fold(scorer.content(t)) for t, _ in ranked[:cfg.top_k]}
                consulted = [m for m in members if fold(scorer.content(m)) in top]
        skipped = [m for m in members if m not in consulted]
        for m in skipped:
            verdicts[m] = NodeConfidence(
                m, None, None, None, "filtered",
                reason=f"not consulted: graph confidence {cg:.3f} >= {cfg.graph_threshold}, outside top-{cfg.top_k}")
        if node_level:
            verdicts.update(scorer.score(consulted, members, with_peers=True))
        else:
            for m in consulted:
                verdicts[m] = NodeConfidence(m, None, None, None, "kept")
        keep = tuple(m for m in members if verdicts[m].verdict == "kept")
        if keep:
            weights = [e.weight for e in sg.edges if e.member in keep]
            sources = tuple(sorted({s for m in keep for s in g.triples[m].sources}))
            kept_sg = _make_subgraph(sg.key, keep, sources, weights)
            kept_sg.snode.confidence = cg
            kept_sgs.append(kept_sg)
    filtered = {t for t, v in verdicts.items() if v.verdict == "filtered"}
    return MCCResult(verdicts, graph_conf, HomologyPartition(kept_sgs, tuple(sorted(filtered))),
                     filtered, scorer.history_computations, scorer.authority_calls)


def score_flat(tids: Sequence[str], g: KnowledgeGraph, cfg: ConfidenceConfig,
               client: GenerationClient | None, hist: SourceHistory,
               feedback: Callable[[str], Feedback] | None = None, prompt=None) -> MCCResult:
    """Node-level scoring without homology: every triple stands alone (``S_n = 0``)."""
    scorer = _Scorer(g, cfg, client, hist, feedback, prompt)
    verdicts = scorer.score(list(tids), list(tids), with_peers=False) if tids else {}
    filtered = {t for t, v in verdicts.items() if v.verdict == "filtered"}
    return MCCResult(verdicts, {}, HomologyPartition([], tuple(sorted(filtered))), filtered,
                     scorer.history_computations, scorer.authority_calls)
