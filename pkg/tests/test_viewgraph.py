"""View graph: schema, serialization, connectivity, spanning-tree init."""

import json

import numpy as np
import pytest

from rotavg.errors import SchemaError
from rotavg.so3 import Rotation, exp_so3, relative_residual
from rotavg.synth import DEFAULT_INTRINSICS, generate_two_view_scene
from rotavg.viewgraph import (
    EdgeMeasurement,
    ViewGraph,
    ViewNode,
    connected_components,
    default_tree_criterion,
    enumerate_spanning_trees,
    load_graph,
    load_pairs,
    maximum_spanning_tree,
    save_graph,
    save_pairs,
    spanning_tree_init,
)

from conftest import moderate_rotation, random_rotation


def _consistent_graph(rng, n, density=1.0, counts=False):
    gt = [random_rotation(rng) for _ in range(n)]
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() >= density:
                continue
            count = int(rng.integers(5, 500)) if counts else None
            edges.append(EdgeMeasurement(
                i, j, gt[i].compose(gt[j].inverse()), inlier_count=count,
            ))
    return ViewGraph([ViewNode(i, gt[i]) for i in range(n)], edges), gt


# ---------------------------------------------------------------------------
# schema validation
# ---------------------------------------------------------------------------


def test_node_and_edge_validation():
    with pytest.raises(SchemaError):
        ViewNode(-1)
    with pytest.raises(SchemaError):
        EdgeMeasurement(2, 2, Rotation.identity())
    with pytest.raises(SchemaError):
        EdgeMeasurement(0, 1, Rotation.identity(), inlier_count=-3)
    with pytest.raises(SchemaError):
        EdgeMeasurement(0, 1, Rotation.identity(), covariance=np.diag([1.0, -1.0, 1.0]))
    bad_sym = np.eye(3)
    bad_sym[0, 1] = 1e-6
    with pytest.raises(SchemaError):
        EdgeMeasurement(0, 1, Rotation.identity(), covariance=bad_sym)


def test_graph_rejects_duplicates_and_dangling_edges():
    nodes = [ViewNode(0), ViewNode(1)]
    e = EdgeMeasurement(0, 1, Rotation.identity())
    with pytest.raises(SchemaError):
        ViewGraph([ViewNode(0), ViewNode(0)], [])
    with pytest.raises(SchemaError):
        ViewGraph(nodes, [e, EdgeMeasurement(1, 0, Rotation.identity())])
    with pytest.raises(SchemaError):
        ViewGraph(nodes, [EdgeMeasurement(0, 5, Rotation.identity())])


def test_edge_whitener_cache():
    e = EdgeMeasurement(0, 1, Rotation.identity(), covariance=np.diag([4.0, 1.0, 1.0]))
    assert np.allclose(e.whitener, np.diag([0.5, 1.0, 1.0]), atol=1e-12)
    inv = e.whitener @ e.whitener.T
    assert np.allclose(inv @ e.covariance, np.eye(3), atol=1e-8)


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------


def test_empty_graph_round_trip(tmp_path):
    path = tmp_path / "empty.json"
    save_graph(ViewGraph([], []), path)
    g = load_graph(path)
    assert not g.nodes and not g.edges


def test_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    gt = [random_rotation(rng) for _ in range(4)]
    edges = [
        EdgeMeasurement(0, 1, random_rotation(rng), covariance=np.eye(3), inlier_count=12),
        EdgeMeasurement(1, 2, random_rotation(rng),
                        covariance=np.diag([4.0, 1.0, 1.0])),
        EdgeMeasurement(2, 3, random_rotation(rng), inlier_count=7),
        EdgeMeasurement(0, 3, random_rotation(rng)),
    ]
    g = ViewGraph([ViewNode(i, gt[i]) for i in range(4)], edges)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_graph(g, p1)
    save_graph(load_graph(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_round_trip_preserves_fields(tmp_path):
    path = tmp_path / "g.json"
    cov = np.diag([4.0, 1.0, 1.0])
    g = ViewGraph(
        [ViewNode(0, Rotation.identity()), ViewNode(1)],
        [EdgeMeasurement(0, 1, exp_so3(np.array([0.1, 0.2, -0.3])),
                         covariance=cov, inlier_count=99)],
    )
    save_graph(g, path)
    back = load_graph(path)
    e = back.edges[0]
    assert e.inlier_count == 99
    assert np.array_equal(e.covariance, cov)
    assert e.rotation == g.edges[0].rotation
    assert np.allclose(e.whitener, np.diag([0.5, 1.0, 1.0]), atol=1e-12)
    assert back.nodes[0].gt_rotation == Rotation.identity()
    assert back.nodes[1].gt_rotation is None


def test_load_graph_schema_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SchemaError):
        load_graph(bad)
    bad.write_text(json.dumps({"nodes": []}))
    with pytest.raises(SchemaError):
        load_graph(bad)
    bad.write_text(json.dumps({
        "nodes": [{"id": 0}, {"id": 1}],
        "edges": [{"i": 0, "j": 1, "qwxyz": [1, 0, 0, 0], "cov": [1.0] * 8}],
    }))
    with pytest.raises(SchemaError, match="cov"):
        load_graph(bad)
    bad.write_text(json.dumps({
        "nodes": [{"id": 0}, {"id": 1}],
        "edges": [{"i": 0, "j": 1, "qwxyz": [0, 0, 0, 0]}],
    }))
    with pytest.raises(SchemaError, match="quaternion"):
        load_graph(bad)


def test_pairs_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    geoms = []
    for idx in range(3):
        geoms.append(((idx, idx + 1), generate_two_view_scene(
            n_points=12, pixel_sigma=0.5,
            rotation=moderate_rotation(rng) if idx else Rotation.identity(),
            translation=np.array([1.0, 0.0, 0.2]), seed=idx,
            scene_depth=4.0,
        )))
    path = tmp_path / "pairs.json"
    save_pairs(geoms, path)
    back = load_pairs(path)
    assert [pair for pair, _ in back] == [pair for pair, _ in geoms]
    for (_, a), (_, b) in zip(geoms, back):
        assert a.rotation == b.rotation
        assert np.array_equal(a.matches, b.matches)
        assert np.array_equal(a.intrinsics_i.k, b.intrinsics_i.k)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pairs": [{"i": 0, "j": 1}]}))
    with pytest.raises(SchemaError):
        load_pairs(bad)


# ---------------------------------------------------------------------------
# connectivity
# ---------------------------------------------------------------------------


def _bfs_components(node_ids, edge_pairs):
    """Independent breadth-first-search oracle."""
    adj = {nid: [] for nid in node_ids}
    for i, j in edge_pairs:
        adj[i].append(j)
        adj[j].append(i)
    seen, comps = set(), []
    for start in sorted(node_ids):
        if start in seen:
            continue
        queue, comp = [start], set()
        while queue:
            cur = queue.pop(0)
            if cur in comp:
                continue
            comp.add(cur)
            queue.extend(n for n in adj[cur] if n not in comp)
        seen |= comp
        comps.append(sorted(comp))
    return comps


def test_single_triangle_is_one_component():
    g = ViewGraph(
        [ViewNode(i) for i in range(3)],
        [EdgeMeasurement(0, 1, Rotation.identity()),
         EdgeMeasurement(1, 2, Rotation.identity()),
         EdgeMeasurement(0, 2, Rotation.identity())],
    )
    comps = connected_components(g)
    assert len(comps) == 1 and comps[0].node_ids == [0, 1, 2]


def test_two_disjoint_triangles():
    edges = [EdgeMeasurement(i, j, Rotation.identity())
             for i, j in [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]]
    comps = connected_components(ViewGraph([ViewNode(i) for i in range(6)], edges))
    assert [c.node_ids for c in comps] == [[0, 1, 2], [3, 4, 5]]
    assert len(comps[0].edges) == 3 and len(comps[1].edges) == 3


def test_components_match_bfs_oracle():
    rng = np.random.default_rng(2)
    nodes = list(range(100))
    pairs = []
    for i in range(100):
        for j in range(i + 1, 100):
            if rng.random() < 0.012:
                pairs.append((i, j))
    g = ViewGraph([ViewNode(i) for i in nodes],
                  [EdgeMeasurement(i, j, Rotation.identity()) for i, j in pairs])
    ours = [c.node_ids for c in connected_components(g)]
    assert ours == _bfs_components(nodes, pairs)


# ---------------------------------------------------------------------------
# spanning-tree initialization
# ---------------------------------------------------------------------------


def test_chain_init_composes_relative_rotations():
    r = exp_so3(np.array([0.1, 0.0, 0.0]))
    g = ViewGraph(
        [ViewNode(i) for i in range(3)],
        [EdgeMeasurement(0, 1, r), EdgeMeasurement(1, 2, r)],
    )
    init = spanning_tree_init(g, "unit")
    assert init[0] == Rotation.identity()
    for e in g.edges:
        assert np.linalg.norm(relative_residual(init[e.i], init[e.j], e.rotation)) < 1e-12


def test_consistent_graph_init_zeroes_all_residuals():
    rng = np.random.default_rng(3)
    g, _ = _consistent_graph(rng, 8, density=0.6)
    init = spanning_tree_init(g, "unit")
    for e in g.edges:  # tree and non-tree edges alike
        assert np.linalg.norm(relative_residual(init[e.i], init[e.j], e.rotation)) < 1e-10


def test_maximum_spanning_tree_vs_brute_force():
    rng = np.random.default_rng(4)
    for trial in range(10):
        n = int(rng.integers(4, 7))
        g, _ = _consistent_graph(rng, n, density=0.8, counts=True)
        if len(connected_components(g)) != 1:
            continue
        tree = maximum_spanning_tree(g, "inlier_count")
        best = max(
            sum(e.inlier_count for e in combo)
            for combo in enumerate_spanning_trees(g)
        )
        assert sum(e.inlier_count for e in tree) == best


def test_maximum_spanning_tree_beats_random_trees():
    rng = np.random.default_rng(5)
    g, _ = _consistent_graph(rng, 12, density=0.5, counts=True)
    assert len(connected_components(g)) == 1
    mst_weight = sum(e.inlier_count for e in maximum_spanning_tree(g, "inlier_count"))

    def random_tree_weight():
        # random spanning tree by shuffled Kruskal
        order = list(g.edges)
        rng.shuffle(order)
        parent = {nid: nid for nid in g.nodes}

        def find(a):
            while parent[a] != a:
                a = parent[a]
            return a

        total = 0
        for e in order:
            ra, rb = find(e.i), find(e.j)
            if ra != rb:
                parent[ra] = rb
                total += e.inlier_count
        return total

    for _ in range(1000):
        assert mst_weight >= random_tree_weight()


def test_tree_follows_high_weight_path():
    # two paths 0-2: direct low-weight edge vs. high-weight detour via 1
    edges = [
        EdgeMeasurement(0, 2, Rotation.identity(), inlier_count=5),
        EdgeMeasurement(0, 1, Rotation.identity(), inlier_count=100),
        EdgeMeasurement(1, 2, Rotation.identity(), inlier_count=80),
    ]
    g = ViewGraph([ViewNode(i) for i in range(3)], edges)
    tree = maximum_spanning_tree(g, "inlier_count")
    assert sorted(e.key for e in tree) == [(0, 1), (1, 2)]


def test_default_tree_criterion_preference():
    r = Rotation.identity()
    g = ViewGraph([ViewNode(0), ViewNode(1)],
                  [EdgeMeasurement(0, 1, r, covariance=np.eye(3), inlier_count=3)])
    assert default_tree_criterion(g) == "inlier_count"
    g = ViewGraph([ViewNode(0), ViewNode(1)],
                  [EdgeMeasurement(0, 1, r, covariance=np.eye(3))])
    assert default_tree_criterion(g) == "inverse_cov_trace"
    g = ViewGraph([ViewNode(0), ViewNode(1)], [EdgeMeasurement(0, 1, r)])
    assert default_tree_criterion(g) == "unit"


def test_init_rejects_disconnected_graph():
    g = ViewGraph([ViewNode(i) for i in range(4)],
                  [EdgeMeasurement(0, 1, Rotation.identity()),
                   EdgeMeasurement(2, 3, Rotation.identity())])
    with pytest.raises(ValueError, match="connected_components"):
        spanning_tree_init(g, "unit")
