import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esa import masking
from esa.graph import (
    Graph,
    GraphError,
    batch,
    build_edge_tokens,
    build_node_tokens,
    degree_one_hot,
    format_graph,
    line_graph,
    parse_graphs,
    read_graphs,
    undirected,
    wl1_hash,
    write_graphs,
)


def rand_graph(rng, n=None, e=None, d_n=2, d_e=1):
    n = n or int(rng.integers(1, 10))
    e = int(rng.integers(0, 15)) if e is None else e
    return Graph(n, rng.integers(0, n, size=(2, e)), rng.normal(size=(n, d_n)), rng.normal(size=(e, d_e)))


def test_graph_validation():
    with pytest.raises(GraphError):
        Graph(2, [[0], [2]], np.ones((2, 1)))
    with pytest.raises(GraphError):
        Graph(2, [[0], [1]], np.ones((3, 1)))
    with pytest.raises(GraphError):
        Graph(2, [[0], [1]], np.ones((2, 1)), np.ones((2, 1)))


def test_undirected_stores_both_orientations():
    g = undirected(3, [(0, 1), (1, 2)], np.ones((3, 1)))
    assert g.edge_index.T.tolist() == [[0, 1], [1, 2], [1, 0], [2, 1]]


def test_edge_tokens_examples():
    g = Graph(2, [[0], [1]], [[1.0], [2.0]], [[5.0]])
    assert build_edge_tokens(batch([g])).tokens[0, 0].tolist() == [1, 2, 5]
    rev = Graph(2, [[1], [0]], [[1.0], [2.0]], [[5.0]])
    assert build_edge_tokens(batch([rev])).tokens[0, 0].tolist() == [2, 1, 5]
    g3 = Graph(3, [[0, 1, 2], [1, 2, 0]], np.ones((3, 1)), np.ones((3, 1)))
    ts = build_edge_tokens(batch([g3, g]))
    assert ts.L == 3
    assert ts.pad_mask.tolist() == [[True] * 3, [True, False, False]]
    assert not ts.tokens[1, 1:].any()
    assert ts.tokens.shape[2] == 2 * 1 + 1


def test_node_tokens_examples(rng):
    g = Graph(2, np.zeros((2, 0)), rng.normal(size=(2, 3)))
    ts = build_node_tokens(batch([g]))
    assert ts.tokens.shape == (1, 2, 3) and np.array_equal(ts.tokens[0], g.node_features)
    g4 = Graph(4, np.zeros((2, 0)), rng.normal(size=(4, 3)))
    assert build_node_tokens(batch([g, g4])).L == 4
    with pytest.raises(GraphError):
        build_node_tokens(batch([Graph(2, [[0], [1]], np.zeros((2, 0)))]))
    with pytest.raises(GraphError):
        build_edge_tokens(batch([Graph(2, [[0], [1]], np.zeros((2, 0)))]))


def test_fixed_length_override_and_too_small(rng):
    g = rand_graph(rng, n=4, e=5)
    assert build_edge_tokens(batch([g]), L=9).L == 9
    with pytest.raises(GraphError):
        build_edge_tokens(batch([g]), L=4)


def test_batch_offsets_and_roundtrip(rng):
    a = Graph(3, [[0, 1], [1, 2]], np.ones((3, 1)))
    b = Graph(2, [[0], [1]], np.ones((2, 1)))
    bg = batch([a, b])
    assert bg.edge_index[:, 2].tolist() == [3, 4]
    assert bg.batch_map.tolist() == [0, 0, 0, 1, 1]
    single = batch([a])
    assert not single.batch_map.any() and np.array_equal(single.edge_index, a.edge_index)
    graphs = [rand_graph(rng) for _ in range(5)]
    again = batch(batch(graphs).unbatch())
    first = batch(graphs)
    for field in ("edge_index", "node_features", "edge_features", "batch_map"):
        assert np.array_equal(getattr(again, field), getattr(first, field))


def test_batch_errors():
    with pytest.raises(GraphError):
        batch([])
    with pytest.raises(GraphError):
        batch([Graph(1, np.zeros((2, 0)), np.ones((1, 1))), Graph(1, np.zeros((2, 0)), np.ones((1, 2)))])


def test_batch_invariants(rng):
    bg = batch([rand_graph(rng) for _ in range(6)])
    assert np.all(np.diff(bg.batch_map) >= 0)
    assert np.array_equal(bg.batch_map[bg.edge_index[0]], bg.batch_map[bg.edge_index[1]])


def test_batched_mask_blocks_match_standalone(rng):
    graphs = [rand_graph(rng, e=int(rng.integers(1, 12))) for _ in range(4)]
    L = max(g.num_edges for g in graphs)
    big = masking.edge_mask_for(batch(graphs), L).blocked_array()
    for b, g in enumerate(graphs):
        alone = masking.edge_mask_for(batch([g]), L).blocked_array()[0]
        assert np.array_equal(big[b], alone)


def brute_line_adj(g):
    s, t = g.edge_index
    n = g.num_edges
    return {(p, q) for p in range(n) for q in range(n)
            if p != q and {s[p], t[p]} & {s[q], t[q]}}


def test_line_graph_examples():
    path = undirected(3, [(0, 1), (1, 2)], np.ones((3, 1)))
    lg = line_graph(path)
    assert lg.num_nodes == 4
    assert (0, 1) in set(map(tuple, lg.edge_index.T.tolist()))
    one = Graph(2, [[0], [1]], np.ones((2, 1)))
    assert line_graph(one).num_nodes == 1 and line_graph(one).num_edges == 0
    tri = undirected(3, [(0, 1), (1, 2), (2, 0)], np.ones((3, 1)))
    ltri = line_graph(tri)
    assert set(map(tuple, ltri.edge_index.T.tolist())) == brute_line_adj(tri)
    assert ltri.num_edges == 6 * 5
    assert np.array_equal(ltri.node_features, build_edge_tokens(batch([tri])).tokens[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_line_graph_degrees_match_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    g = Graph(n, rng.integers(0, n, size=(2, int(rng.integers(1, 200)))), np.ones((n, 1)))
    lg = line_graph(g)
    oracle = brute_line_adj(g)
    assert lg.num_nodes == g.num_edges
    assert set(map(tuple, lg.edge_index.T.tolist())) == oracle
    s, t = g.edge_index
    for p in range(g.num_edges):
        sharing = np.count_nonzero(np.isin(s, (s[p], t[p])) | np.isin(t, (s[p], t[p])))
        assert np.count_nonzero(lg.edge_index[0] == p) == sharing - 1


def test_wl_examples():
    tri = undirected(3, [(0, 1), (1, 2), (2, 0)], np.ones((3, 1)))
    path = undirected(3, [(0, 1), (1, 2)], np.ones((3, 1)))
    assert wl1_hash(tri) != wl1_hash(path)
    c6 = undirected(6, [(i, (i + 1) % 6) for i in range(6)], np.ones((6, 1)))
    two_c3 = undirected(6, [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)], np.ones((6, 1)))
    assert wl1_hash(c6) == wl1_hash(two_c3)
    with pytest.raises(ValueError):
        wl1_hash(tri, 0)


def test_wl_relabel_invariance(rng):
    for _ in range(5):
        g = rand_graph(rng, n=8, e=14)
        h = wl1_hash(g)
        for _ in range(100):
            assert wl1_hash(g.relabel(rng.permutation(g.num_nodes))) == h


def test_relabel_moves_features(rng):
    g = rand_graph(rng, n=4, e=3)
    perm = np.array([2, 0, 3, 1])
    r = g.relabel(perm)
    assert np.array_equal(r.node_features[perm], g.node_features)
    assert np.array_equal(r.edge_index, perm[g.edge_index])


def _to_nx(g):
    G = nx.Graph()
    G.add_nodes_from(range(g.num_nodes))
    G.add_edges_from(g.edge_index.T.tolist())
    return G


def test_wl_agrees_with_networkx_partition(rng):
    """Same equal/different verdicts as networkx's WL hash on simple undirected graphs."""
    graphs = []
    for _ in range(40):
        n = int(rng.integers(4, 8))
        pairs = {tuple(sorted(p)) for p in rng.integers(0, n, size=(n, 2)).tolist() if p[0] != p[1]}
        graphs.append(undirected(n, sorted(pairs), np.ones((n, 1))))
    ours = [wl1_hash(g, 3) for g in graphs]
    theirs = [nx.weisfeiler_lehman_graph_hash(_to_nx(g), iterations=3) for g in graphs]
    for i in range(len(graphs)):
        for j in range(len(graphs)):
            assert (ours[i] == ours[j]) == (theirs[i] == theirs[j])


def test_text_format_roundtrip(tmp_path, rng):
    graphs = [rand_graph(rng).with_target(rng.normal(size=2)) for _ in range(3)]
    graphs.append(Graph(2, [[0], [1]], np.zeros((2, 0))))
    path = tmp_path / "g.graph"
    write_graphs(path, graphs)
    back = read_graphs(path)
    assert len(back) == 4
    for a, b in zip(graphs, back):
        assert np.array_equal(a.edge_index, b.edge_index)
        assert np.array_equal(a.node_features, b.node_features)
        assert np.array_equal(a.edge_features, b.edge_features)
    assert np.array_equal(back[0].target, graphs[0].target) and back[3].target is None
    (tmp_path / "dir").mkdir()
    (tmp_path / "dir" / "a.graph").write_text(format_graph(graphs[0]))
    (tmp_path / "dir" / "b.graph").write_text(format_graph(graphs[1]))
    assert len(read_graphs(tmp_path / "dir")) == 2


def test_text_format_comments_and_errors():
    text = "# two nodes\ngraph 2 1 1 0\n1.5\n2  # trailing\n0 1\n"
    (g,) = parse_graphs(text)
    assert g.node_features.ravel().tolist() == [1.5, 2.0]
    with pytest.raises(GraphError, match=r"^x\.graph:1: graph truncated"):
        parse_graphs("graph 2 1 1 0\n1\n", "x.graph")
    with pytest.raises(GraphError, match=r":5: expected 3 values"):
        parse_graphs("graph 2 1 1 1\n1\n2\n\n0 1\n", "f")
    with pytest.raises(GraphError, match=r":1:"):
        parse_graphs("grph 1 0 1 0\n")


def test_degree_one_hot():
    g = undirected(3, [(0, 1), (0, 2)], np.zeros((3, 0)))
    d = degree_one_hot(g, max_degree=1)
    assert d.node_features.tolist() == [[0, 1], [0, 1], [0, 1]]
    assert degree_one_hot(g).node_features[0, 2] == 1
