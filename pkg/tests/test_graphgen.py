from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from awgcn.graphgen import UnknownToken, build_graph, graph_to_dict, normalize_adjacency, to_dot
from awgcn.ingest import CallSequence, Vocabulary
from awgcn.rng import derive_rng


def seq(*names):
    return CallSequence.from_names("h", "fam", names)


def brute_force(names, k=1):
    """Pair counting with plain loops and dictionaries."""
    counts = defaultdict(int)
    for i in range(len(names)):
        for gap in range(1, k + 1):
            if i + gap < len(names):
                counts[(names[i], names[i + gap])] += 1
    totals = defaultdict(int)
    for (u, _), c in counts.items():
        totals[u] += c
    return {pair: (c, c / totals[pair[0]]) for pair, c in counts.items()}


def as_table(g, vocab):
    t = vocab.tokens
    return {(t[e.src], t[e.dst]): (e.count, e.prob) for e in g.edges}


def test_abac_edges():
    vocab = Vocabulary("abc")
    g = build_graph(seq("a", "b", "a", "c"), vocab)
    assert as_table(g, vocab) == {("a", "b"): (1, 0.5), ("b", "a"): (1, 1.0), ("a", "c"): (1, 0.5)}
    assert [(e.src, e.dst) for e in g.edges] == sorted((e.src, e.dst) for e in g.edges)


def test_self_loop_chain():
    vocab = Vocabulary("x")
    g = build_graph(seq("x", "x", "x"), vocab)
    assert g.present_nodes == (0,)
    assert as_table(g, vocab) == {("x", "x"): (2, 1.0)}


def test_four_unique_calls_give_four_nodes():
    names = ["NtOpenKey", "NtQueryValueKey", "NtClose", "LdrLoadDll"] * 6 + ["NtClose", "NtOpenKey"]
    assert len(names) == 26
    g = build_graph(seq(*names), Vocabulary(names + ["Unused"]))
    assert g.n == 4


def test_unknown_token():
    with pytest.raises(UnknownToken):
        build_graph(seq("a", "z"), Vocabulary("a"))


def test_kgram_adds_long_range_pairs():
    vocab = Vocabulary("abc")
    g = build_graph(seq("a", "b", "c"), vocab, k=2)
    assert as_table(g, vocab) == {("a", "b"): (1, 0.5), ("a", "c"): (1, 0.5), ("b", "c"): (1, 1.0)}


def test_random_sequences_match_brute_force():
    rng = derive_rng(0, "graph-oracle")
    tokens = [f"t{i}" for i in range(12)]
    vocab = Vocabulary(tokens)
    for trial in range(1000):
        n = int(rng.integers(1, 40))
        names = [tokens[i] for i in rng.integers(0, int(rng.integers(1, 13)), n)]
        k = 1 + trial % 3
        g = build_graph(seq(*names), vocab, k)
        assert as_table(g, vocab) == brute_force(names, k)
        sums = defaultdict(float)
        for e in g.edges:
            sums[e.src] += e.prob
        assert all(abs(s - 1.0) <= 1e-9 for s in sums.values())


def test_transition_mode_single_node_is_identity():
    g = build_graph(seq("a"), Vocabulary("a"))
    np.testing.assert_array_equal(normalize_adjacency(g), [[1.0]])


def test_symmetric_gcn_two_nodes_by_hand():
    g = build_graph(seq("a", "b"), Vocabulary("ab"))
    # A + I = [[1,1],[1,1]], degrees 2 -> every entry 1/sqrt(2)·1·1/sqrt(2)
    np.testing.assert_allclose(normalize_adjacency(g, "symmetric-gcn"), [[0.5, 0.5], [0.5, 0.5]], rtol=0, atol=1e-15)


def test_transition_mode_symmetric_and_directed_variant():
    vocab = Vocabulary("abcd")
    g = build_graph(seq(*"abacdbca"), vocab)
    p0 = normalize_adjacency(g)
    off = p0 - np.eye(g.n)
    np.testing.assert_array_equal(off, off.T)
    np.testing.assert_allclose(normalize_adjacency(g, directed=True), g.transition_matrix() + np.eye(g.n))
    with pytest.raises(ValueError):
        normalize_adjacency(g, "laplacian")


def test_dot_edge_labels():
    vocab = Vocabulary("abc")
    text = to_dot(build_graph(seq("a", "b", "a", "c"), vocab), vocab)
    assert 'a -> b [label="0.5000"];' in text
    assert 'b -> a [label="1.0000"];' in text
    assert text.startswith("digraph h {") and text.rstrip().endswith("}")


def test_dot_single_node():
    vocab = Vocabulary("a")
    text = to_dot(build_graph(seq("a"), vocab), vocab)
    assert text.count("->") == 0
    assert "  a;" in text


def test_dot_uniform_attention_gives_equal_fill():
    vocab = Vocabulary("abc")
    text = to_dot(build_graph(seq("a", "b", "c"), vocab), vocab, {"a": 0.3, "b": 0.3, "c": 0.3})
    fills = [line.split("fillcolor=")[1].split(",")[0] for line in text.splitlines() if "fillcolor" in line]
    assert len(fills) == 3 and len(set(fills)) == 1


def test_dot_quotes_awkward_names():
    vocab = Vocabulary(["Reg Query", "node"])
    text = to_dot(build_graph(seq("Reg Query", "node"), vocab), vocab)
    assert '"Reg Query" -> "node"' in text


def test_graph_json_shape():
    vocab = Vocabulary("abc")
    d = graph_to_dict(build_graph(seq("a", "b", "a", "c"), vocab), vocab)
    assert d["nodes"] == ["a", "b", "c"]
    assert d["edges"][0] == {"src": "a", "dst": "b", "count": 1, "prob": 0.5}


names_strategy = st.lists(st.sampled_from("abcdef"), min_size=1, max_size=30)


@settings(max_examples=100, deadline=None)
@given(names_strategy, st.integers(1, 4))
def test_graph_invariants(names, k):
    vocab = Vocabulary("abcdef")
    g = build_graph(seq(*names), vocab, k)
    assert g.n <= min(len(names), len(vocab))
    pairs = [(e.src, e.dst) for e in g.edges]
    assert len(pairs) == len(set(pairs))
    assert all(e.count >= 1 and e.src in g.present_nodes and e.dst in g.present_nodes for e in g.edges)
    bigger = {(e.src, e.dst) for e in build_graph(seq(*names), vocab, k + 1).edges}
    assert set(pairs) <= bigger


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abc"), min_size=2, max_size=12))
def test_same_pair_multiset_gives_same_graph(names):
    # rotating a closed walk keeps its adjacent-pair multiset
    cyc = names + [names[0]]
    rotated = names[1:] + [names[0], names[1]]
    vocab = Vocabulary("abc")
    a = build_graph(seq(*cyc), vocab)
    b = build_graph(seq(*rotated), vocab)
    assert sorted(zip(cyc, cyc[1:])) == sorted(zip(rotated, rotated[1:]))
    assert a.edges == b.edges and a.present_nodes == b.present_nodes
