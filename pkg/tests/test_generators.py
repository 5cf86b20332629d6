import networkx as nx
import numpy as np
import pytest

from esa import generators, graph


def test_infected_labels_match_networkx_bfs():
    for seed in range(3):
        g = generators.generate_infected_er(200, 3, 6, 0.02, seed)
        sources = np.flatnonzero(g.node_features[:, 1])
        G = nx.Graph()
        G.add_nodes_from(range(g.num_nodes))
        G.add_edges_from(g.edge_index.T.tolist())
        dist = nx.multi_source_dijkstra_path_length(G, set(sources.tolist()))
        want = [min(dist.get(v, 7), 7) for v in range(g.num_nodes)]
        assert g.target.astype(int).tolist() == want
        assert np.all(g.target[sources] == 0)


def test_infected_features_and_preset_scale():
    g = generators.generate_infected_er(1500, 4, 20, 0.0009, 0)
    assert g.node_features.sum(axis=0).tolist() == [1496, 4]
    assert g.target.max() == 21  # the far class is populated
    assert np.all(g.target >= 0)


def test_infected_rejects_bad_parameters():
    for bad in [(0, 1, 2, 0.1), (10, 0, 2, 0.1), (10, 1, 2, 1.0), (10, 11, 2, 0.1)]:
        with pytest.raises(ValueError):
            generators.generate_infected_er(*bad, seed=0)


def test_er_edge_count_is_binomial():
    rng = np.random.default_rng(0)
    n, p = 300, 0.05
    counts = [len(generators.erdos_renyi_pairs(n, p, rng)) for _ in range(50)]
    total = n * (n - 1) / 2
    assert abs(np.mean(counts) - total * p) < 4 * np.sqrt(total * p * (1 - p) / 50)
    pairs = generators.erdos_renyi_pairs(n, p, rng)
    assert np.all(pairs[:, 0] < pairs[:, 1])
    assert len({tuple(r) for r in pairs.tolist()}) == len(pairs)


def test_generators_are_seeded(tmp_path):
    a = generators.generate_infected_er(300, 2, 5, 0.01, 7)
    b = generators.generate_infected_er(300, 2, 5, 0.01, 7)
    assert graph.format_graph(a) == graph.format_graph(b)
    assert graph.format_graph(generators.generate_ba(50, 2, 3)) == graph.format_graph(generators.generate_ba(50, 2, 3))


def test_ba_counts_and_first_node():
    g = generators.generate_ba(4, 3, 0)
    assert sorted(map(tuple, g.edge_index.T.tolist()))[:3] == [(0, 3), (1, 3), (2, 3)]
    for n, m in [(20, 1), (100, 3), (57, 5)]:
        g = generators.generate_ba(n, m, 1)
        assert g.num_edges == 2 * m * (n - m)
        pairs = {tuple(sorted(p)) for p in g.edge_index.T.tolist()}
        assert len(pairs) == m * (n - m)  # no duplicate edges


def test_ba_degree_tail():
    g = generators.generate_ba(10_000, 2, 0)
    deg = np.bincount(g.edge_index[0])
    assert deg.max() >= 3 * np.median(deg)


def test_ba_for_edges_is_close():
    for e in (2000, 16000):
        assert abs(generators.ba_for_edges(e, 2, 0).num_edges - e) <= 4
