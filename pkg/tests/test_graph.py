import random

import networkx as nx
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from gen import hub_kg, random_kg
from multirag.errors import UnknownEntity
from multirag.graph import (
    Entity,
    KnowledgeGraph,
    Provenance,
    Triple,
    extract_subgraph,
    incident_triples,
    line_graph_oracle,
    to_line_graph,
)


def kg_of(*spo, literal=()):
    ts = [Triple.make(f"ent:{s}", p, o if o in literal else f"ent:{o}",
                      "literal" if o in literal else "entity", "string", [Provenance("r", "s")])
          for s, p, o in spo]
    return KnowledgeGraph((), ts)


def ids(kg, *spo):
    return {next(t.id for t in kg.triples.values()
                 if (t.subject, t.predicate) == (f"ent:{s}", p)) for s, p in spo}


# ---------------------------------------------------------------- line graph

def test_shared_node_single_edge():
    lg = to_line_graph(kg_of(("A", "r1", "B"), ("B", "r2", "C")))
    assert lg.edge_count() == 1


def test_disjoint_triples_no_edge():
    assert to_line_graph(kg_of(("A", "r1", "B"), ("C", "r2", "D"))).edge_count() == 0


def test_hub_of_four_is_k4():
    lg = to_line_graph(hub_kg(4))
    assert lg.edge_count() == 6
    assert all(len(lg.neighbors(n)) == 3 for n in lg.nodes)


@pytest.mark.parametrize("k", range(1, 9))
def test_hub_edge_count_formula(k):
    assert to_line_graph(hub_kg(k)).edge_count() == k * (k - 1) // 2


def test_two_shared_entities_one_edge():
    kg = kg_of(("A", "r1", "B"), ("A", "r2", "B"))
    lg = to_line_graph(kg)
    assert lg.edge_count() == 1 and len(lg.edge_set()) == 1


def test_no_self_loops():
    kg = kg_of(("A", "self", "A"), ("A", "r", "B"))
    lg = to_line_graph(kg)
    assert all(n not in lg.neighbors(n) for n in lg.nodes)
    assert not any(lg.has_edge(n, n) for n in lg.nodes)


def test_literal_objects_do_not_link():
    kg = kg_of(("A", "r", "x"), ("B", "r", "x"), literal=("x",))
    assert to_line_graph(kg).edge_count() == 0


def test_matches_networkx_line_graph():
    kg = random_kg(random.Random(3), 80)
    # entity-level multigraph whose edges are triples; its line graph is the reference
    g = nx.MultiGraph()
    for t in kg.triples.values():
        ends = t.endpoints
        g.add_edge(ends[0], ends[-1], key=t.id)
    lg_ref = {frozenset((a[2], b[2])) for a, b in nx.line_graph(g).edges() if a[2] != b[2]}
    assert to_line_graph(kg).edge_set() == lg_ref


@given(st.integers(0, 2**32 - 1), st.integers(0, 60))
def test_property_oracle_equivalence(seed, n):
    kg = random_kg(random.Random(seed), n, n_entities=max(2, n // 3 + 1))
    triples = [(t.id, t.endpoints) for t in kg.triples.values()]
    assert to_line_graph(kg).edge_set() == oracles.line_graph_edges(triples) == line_graph_oracle(kg)


@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 6))
def test_property_virtual_clique_exact(seed, n, cap):
    kg = random_kg(random.Random(seed), n, n_entities=4)
    full = to_line_graph(kg)
    capped = to_line_graph(kg, hub_cap=cap)
    assert capped.edge_set() == full.edge_set()
    assert capped.edge_count() == full.edge_count()
    for a in kg.triples:
        assert capped.neighbors(a) == full.neighbors(a)
        for b in kg.triples:
            assert capped.has_edge(a, b) == full.has_edge(a, b)


@given(st.integers(0, 2**32 - 1))
def test_property_relabel_invariance(seed):
    rng = random.Random(seed)
    kg = random_kg(rng, 30)
    lg = to_line_graph(kg)
    # relabel triple ids by rebuilding with a different predicate spelling
    mapping, ts = {}, []
    for t in kg.triples.values():
        u = Triple.make(t.subject, t.predicate + "_x", t.object, t.object_kind, t.object_type, t.provenance)
        mapping[t.id] = u.id
        ts.append(u)
    lg2 = to_line_graph(KnowledgeGraph((), ts))
    assert {frozenset(mapping[x] for x in e) for e in lg.edge_set()} == lg2.edge_set()


def test_line_graph_dump_records():
    lg = to_line_graph(hub_kg(3))
    recs = lg.to_records()
    assert [len(r["neighbors"]) for r in recs] == [2, 2, 2]
    assert lg.dumps().count("\n") == 3


# ---------------------------------------------------------------- incidence

def test_hub_degree_four():
    kg = hub_kg(4)
    assert len(incident_triples(kg, "ent:hub")) == 4


def test_isolated_entity():
    kg = KnowledgeGraph([Entity("ent:lonely", "lonely")], [])
    assert incident_triples(kg, "ent:lonely") == []


def test_unknown_entity():
    with pytest.raises(UnknownEntity):
        incident_triples(hub_kg(2), "ent:nope")


@given(st.integers(0, 2**32 - 1))
def test_property_incidence_equals_scan(seed):
    kg = random_kg(random.Random(seed), 100)
    for e in kg.entities:
        scan = sorted(t.id for t in kg.triples.values() if e in (t.subject, t.object)
                      and (e == t.subject or t.object_kind == "entity"))
        assert sorted(incident_triples(kg, e)) == scan


def test_adjacency_has_no_stale_entries():
    kg = random_kg(random.Random(1), 50)
    for e, tids in kg.adjacency.items():
        assert all(e in kg.triples[t].endpoints for t in tids)
    assert sum(len(v) for v in kg.adjacency.values()) == sum(len(t.endpoints) for t in kg.triples.values())


# ---------------------------------------------------------------- subgraphs

def test_hops_zero_on_hub():
    kg = hub_kg(4)
    assert len(extract_subgraph(kg, {"ent:hub"}, 0)) == 4


def test_empty_seeds():
    assert len(extract_subgraph(hub_kg(4), set(), 2)) == 0


def test_unknown_seed_contributes_nothing():
    assert len(extract_subgraph(hub_kg(4), {"ent:ghost"}, 1)) == 0


def test_chain_one_hop():
    kg = kg_of(("A", "r", "B"), ("B", "r", "C"), ("C", "r", "D"))
    sub = extract_subgraph(kg, {"ent:A"}, 1)
    assert set(sub.triples) == ids(kg, ("A", "r"), ("B", "r"))


def test_negative_hops():
    with pytest.raises(ValueError):
        extract_subgraph(hub_kg(2), {"ent:hub"}, -1)


@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_property_subgraph_matches_bfs(seed, hops):
    rng = random.Random(seed)
    kg = random_kg(rng, 40, n_entities=25)
    seeds = {f"ent:e{rng.randrange(25)}" for _ in range(2)}
    expected = oracles.bfs_subgraph({t.id: t.endpoints for t in kg.triples.values()}, seeds, hops)
    assert set(extract_subgraph(kg, seeds, hops).triples) == expected


# ---------------------------------------------------------------- serialization

def test_graph_round_trip(tmp_path):
    kg = random_kg(random.Random(5), 40)
    kg.save(tmp_path / "g.jsonl")
    back = KnowledgeGraph.load(tmp_path / "g.jsonl")
    assert back == kg
    assert back.dumps() == kg.dumps()


def test_duplicate_triple_id_rejected():
    t = Triple.make("ent:a", "p", "x")
    with pytest.raises(ValueError):
        KnowledgeGraph((), [t, t])


def test_empty_predicate_rejected():
    with pytest.raises(ValueError):
        Triple.make("ent:a", "", "x")
