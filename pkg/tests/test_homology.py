import random
from itertools import combinations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gen import random_kg
from oracles import brute_partition
from multirag.errors import NoCandidates
from multirag.graph import KnowledgeGraph, Provenance, Triple
from multirag.homology import (
    HomologousEdge,
    HomologyPartition,
    build_homologous_line_graph,
    candidates_for_query,
    match_homologous,
    match_homologous_oracle,
    restrict_partition,
)
from multirag.text import normalize_alias_table, normalize_predicate


def claim(s, p, o, src):
    return Triple.make(f"ent:{s}", p, o, provenance=[Provenance(f"rec-{src}", src)])


def ca981_kg():
    values = ["Delayed", "Delayed 14:30", "On-time", "Delayed until 15:00"]
    ts = [claim("ca981", "status", v, f"src{i}") for i, v in enumerate(values)]
    ts += [claim("ca981", "origin", "PEK", "src0"), claim("mu587", "status", "Boarding", "src1")]
    return KnowledgeGraph((), ts)


def as_sets(part):
    return {sg.key: set(sg.members) for sg in part.subgraphs}, set(part.isolated)


# ---------------------------------------------------------------- matching

def test_four_sources_one_k4_subgraph():
    part = match_homologous(ca981_kg())
    (sg,) = part.subgraphs
    assert sg.key == ("ent:ca981", "status")
    assert sg.snode.num == 4 and len(sg.members) == 4
    assert len(sg.line_edges) == 6
    assert sg.snode.meta["sources"] == ["src0", "src1", "src2", "src3"]
    assert all(isinstance(e, HomologousEdge) and e.weight == 1.0 for e in sg.edges)


def test_unique_keys_all_isolated():
    kg = KnowledgeGraph((), [claim(f"e{i}", f"p{i}", "x", "s") for i in range(5)])
    part = match_homologous(kg)
    assert part.subgraphs == [] and len(part.isolated) == 5


def test_single_source_repetition_is_not_homology():
    kg = KnowledgeGraph((), [claim("a", "p", "1", "s"), claim("a", "p", "2", "s")])
    assert match_homologous(kg).subgraphs == []
    assert len(match_homologous(kg, min_sources=1).subgraphs) == 1


def test_randomized_thousand_triples_match_brute_force():
    kg = random_kg(random.Random(11), 1000, n_entities=120, n_predicates=4)
    part = match_homologous(kg)
    subs, iso = as_sets(part)
    b_subs, b_iso = brute_partition(kg)
    assert subs == b_subs and iso == b_iso
    o_subs, o_iso = match_homologous_oracle(kg)
    assert set(map(frozenset, subs.values())) == o_subs and iso == o_iso


@given(st.integers(0, 2**32 - 1), st.integers(0, 150), st.integers(1, 3))
def test_property_partition_and_oracle(seed, n, min_sources):
    kg = random_kg(random.Random(seed), n, n_entities=max(2, n // 4 + 1), n_predicates=3)
    part = match_homologous(kg, min_sources)
    members = [m for sg in part.subgraphs for m in sg.members]
    assert len(members) + len(part.isolated) == len(kg)
    assert len(set(members) | set(part.isolated)) == len(kg)
    assert as_sets(part) == brute_partition(kg, min_sources)
    for sg in part.subgraphs:
        assert sg.snode.num == len(sg.members) >= 2
        assert set(map(frozenset, sg.line_edges)) == set(map(frozenset, combinations(sg.members, 2)))


@given(st.integers(0, 2**32 - 1))
def test_property_order_stability(seed):
    rng = random.Random(seed)
    kg = random_kg(rng, 60, n_entities=10, n_predicates=3)
    ts = list(kg.triples.values())
    rng.shuffle(ts)
    assert match_homologous(KnowledgeGraph((), ts)) == match_homologous(kg)


# ---------------------------------------------------------------- homologous line graph

def test_k4_plus_three_isolated():
    kg = KnowledgeGraph((), list(ca981_kg().triples.values())
                        + [claim("z", "q", "1", "s0")])
    sgl = build_homologous_line_graph(match_homologous(kg))
    assert sgl.node_count() == 7 and len(sgl.nodes) == 7
    assert sgl.edge_count() == 6 == len(list(sgl.edges()))


def test_empty_partition_line_graph():
    sgl = build_homologous_line_graph(HomologyPartition())
    assert sgl.node_count() == 0 and sgl.edge_count() == 0


def test_sizes_three_and_two_give_four_edges():
    ts = [claim("a", "p", str(i), f"s{i}") for i in range(3)] + [claim("b", "p", str(i), f"s{i}") for i in range(2)]
    sgl = build_homologous_line_graph(match_homologous(KnowledgeGraph((), ts)))
    assert sgl.edge_count() == 4 and sgl.isolated == ()


def test_line_graph_neighbors_within_group():
    part = match_homologous(ca981_kg())
    sgl = build_homologous_line_graph(part)
    (sg,) = part.subgraphs
    assert sgl.neighbors(sg.members[0]) == set(sg.members[1:])
    assert sgl.neighbors(part.isolated[0]) == set()


# ---------------------------------------------------------------- candidates

def test_query_status_candidate():
    part = match_homologous(ca981_kg())
    (sg,) = candidates_for_query(part, ["ent:ca981"], ["Status"])
    assert sg.key == ("ent:ca981", "status")


def test_unknown_entity_no_candidates():
    with pytest.raises(NoCandidates):
        candidates_for_query(match_homologous(ca981_kg()), ["ent:nobody"], ["status"])


def test_empty_query_no_candidates():
    with pytest.raises(NoCandidates):
        candidates_for_query(match_homologous(ca981_kg()), [], [])


def test_relation_only_query():
    assert len(candidates_for_query(match_homologous(ca981_kg()), [], ["status"])) == 1


def test_alias_predicates_merge_under_one_key():
    kg = KnowledgeGraph((), [claim("jaws", "director", "Spielberg", "imdb"),
                             claim("jaws", "Directed_By", "Spielberg", "tmdb")])
    aliases = normalize_alias_table({"directed_by": "director"})
    assert match_homologous(kg).subgraphs == []
    part = match_homologous(kg, aliases=aliases)
    (sg,) = candidates_for_query(part, ["ent:jaws"], ["directed by"], aliases)
    assert sg.key == ("ent:jaws", "director") and len(sg.members) == 2


@given(st.lists(st.sampled_from(["director", "directed_by", "Director", "DIRECTED-BY", "filmmaker"]),
                min_size=1, max_size=5))
def test_property_alias_normalization_oracle(names):
    aliases = normalize_alias_table({"directed_by": "director", "filmmaker": "director"})
    # oracle: strip non-alphanumerics, lowercase, then look up once
    expect = {"director" if "".join(c for c in n.lower() if c.isalnum()) in
              ("director", "directedby", "filmmaker") else n for n in names}
    assert {normalize_predicate(n, aliases) for n in names} == expect


# ---------------------------------------------------------------- persistence and restriction

def test_partition_round_trip(tmp_path):
    part = match_homologous(random_kg(random.Random(2), 200, n_entities=30, n_predicates=3))
    part.save(tmp_path / "p.json")
    back = HomologyPartition.load(tmp_path / "p.json")
    assert back == part and back.dumps() == part.dumps()


def test_restrict_dissolves_small_groups():
    kg = ca981_kg()
    part = match_homologous(kg)
    (sg,) = part.subgraphs
    keep = set(sg.members[:1]) | set(part.isolated)
    out = restrict_partition(part, kg, keep)
    assert out.subgraphs == [] and set(out.isolated) == keep


def test_negative_edge_weight_rejected():
    with pytest.raises(ValueError):
        HomologousEdge("t", -0.1)
