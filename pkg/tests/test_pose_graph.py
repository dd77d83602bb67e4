import numpy as np
import pytest

from mrpgo.geometry import Pose3, compose
from mrpgo.pose_graph import (
    Edge,
    EdgeKind,
    GraphError,
    MultiRobotPoseGraph,
    NodeId,
    ParseError,
    Truth,
    inject_outliers,
    partition,
    read_g2o,
    read_ground_truth,
    synth_grid,
    write_g2o,
    write_ground_truth,
)
from mrpgo.solver import residual_sq, EdgeArrays


def test_empty_file(tmp_path):
    p = tmp_path / "empty.g2o"
    p.write_text("")
    g = read_g2o(p)
    assert len(g.nodes) == 0 and len(g.edges) == 0


def test_two_vertices_one_edge(tmp_path):
    p = tmp_path / "tiny.g2o"
    info = " ".join(["1 0 0 0 0 0"[0]] * 0) or ""
    upper = []
    for i in range(6):
        for j in range(i, 6):
            upper.append("1" if i == j else "0")
    p.write_text(
        "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n"
        "VERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\n"
        "EDGE_SE3:QUAT 0 1 1 0 0 0 0 0 1 " + " ".join(upper) + "\n"
    )
    g = read_g2o(p)
    assert g.robots == [0]
    assert len(g.nodes) == 2
    assert len(g.edges) == 1
    assert g.edges[0].kind is EdgeKind.ODOMETRY


def test_roundtrip(tmp_path, rng):
    g = synth_grid(4, 5, 2, 0.01, 0.05, 0.5, rng_seed=3)
    p = tmp_path / "grid.g2o"
    write_g2o(g, p)
    g2 = read_g2o(p)
    p2 = tmp_path / "grid2.g2o"
    write_g2o(g2, p2)
    g3 = read_g2o(p2)
    assert sorted(g2.nodes) == sorted(g.nodes)
    assert len(g2.edges) == len(g.edges)
    for e2, e3 in zip(g2.edges, g3.edges):
        assert e2.src == e3.src and e2.dst == e3.dst
        assert np.abs(e2.meas.rot.m - e3.meas.rot.m).max() < 1e-9
        assert np.abs(e2.meas.trans - e3.meas.trans).max() < 1e-9
        assert abs(e2.w_rot - e3.w_rot) < 1e-9 * max(1, e2.w_rot)
    for n in g.nodes:
        assert np.abs(g2.nodes[n].trans - g3.nodes[n].trans).max() < 1e-9


def test_ground_truth_sidecar(tmp_path):
    g = synth_grid(3, 4, 1, 0.01, 0.05, 0.3, rng_seed=5)
    main = tmp_path / "a.g2o"
    side = tmp_path / "a.gt.g2o"
    write_g2o(g, main)
    write_ground_truth(g, side)
    loaded = read_g2o(main)
    loaded = read_ground_truth(loaded, side)
    for n in g.nodes:
        assert np.abs(loaded.nodes[n].trans - g.nodes[n].trans).max() < 1e-9


def test_malformed_line_reports_lineno(tmp_path):
    p = tmp_path / "bad.g2o"
    p.write_text("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nEDGE_SE3:QUAT 0 nonsense\n")
    with pytest.raises(ParseError) as ei:
        read_g2o(p)
    assert ei.value.lineno == 2


def test_non_psd_information_rejected(tmp_path):
    upper = []
    for i in range(6):
        for j in range(i, 6):
            upper.append("-1" if i == j else "0")
    p = tmp_path / "npsd.g2o"
    p.write_text(
        "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n"
        "VERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\n"
        "EDGE_SE3:QUAT 0 1 1 0 0 0 0 0 1 " + " ".join(upper) + "\n"
    )
    with pytest.raises(ParseError):
        read_g2o(p)


def test_se2_promotion(tmp_path):
    p = tmp_path / "se2.g2o"
    p.write_text(
        "VERTEX_SE2 0 0 0 0\n"
        "VERTEX_SE2 1 1 0 0.5\n"
        "EDGE_SE2 0 1 1 0 0.5 1 0 0 1 0 1\n"
    )
    g = read_g2o(p)
    assert len(g.nodes) == 2
    e = g.edges[0]
    assert abs(e.meas.trans[2]) < 1e-12  # z = 0 after promotion
    assert abs(e.meas.rot.log()[2] - 0.5) < 1e-12


class TestPartition:
    def test_single_robot_unchanged(self):
        g = synth_grid(3, 3, 1, 0.0, 0.0, 0.5, rng_seed=0)
        out = partition(g, 1)
        assert sorted(out.nodes) == sorted(g.nodes)
        assert len(out.edges) == len(g.edges)

    def test_even_split(self):
        g = synth_grid(3, 3, 1, 0.0, 0.0, 0.0, rng_seed=0)
        out = partition(g, 3)
        for r in range(3):
            assert len(out.nodes_of(r)) == 3

    def test_counts_conserved_and_balanced(self):
        g = synth_grid(7, 10, 1, 0.01, 0.02, 0.4, rng_seed=1)
        out = partition(g, 3)
        assert len(out.nodes) == len(g.nodes)
        assert len(out.edges) == len(g.edges)
        sizes = [len(out.nodes_of(r)) for r in out.robots]
        assert max(sizes) - min(sizes) <= 1
        # loop edge count conserved (cut odometry edges become loops)
        n_loops_in = sum(1 for e in g.edges if e.is_loop)
        n_loops_out = sum(1 for e in out.edges if e.is_loop)
        n_cut = sum(1 for e in out.edges if e.kind is EdgeKind.INTER_LOOP) - sum(
            1 for e in g.edges if e.kind is EdgeKind.INTER_LOOP
        )
        assert n_loops_out >= n_loops_in
        assert n_cut >= 2  # three segments: at least the two cut odometry edges

    def test_too_many_robots(self):
        g = synth_grid(2, 2, 1, 0.0, 0.0, 0.0, rng_seed=0)
        with pytest.raises(GraphError):
            partition(g, 5)


class TestInjectOutliers:
    def test_zero_ratio_unchanged(self):
        g = synth_grid(4, 4, 1, 0.01, 0.02, 0.5, rng_seed=2)
        out = inject_outliers(g, 0.0, rng_seed=0)
        assert len(out.edges) == len(g.edges)
        assert all(e.truth is Truth.INLIER for e in out.edges)

    def test_half_ratio_doubles_loops(self):
        g = synth_grid(6, 7, 1, 0.01, 0.02, 0.5, rng_seed=2)
        n_loops = sum(1 for e in g.edges if e.is_loop)
        out = inject_outliers(g, 0.5, rng_seed=0)
        n_out = sum(1 for e in out.edges if e.truth is Truth.OUTLIER)
        assert n_out == n_loops

    def test_ratio_within_one_edge(self):
        g = synth_grid(6, 7, 1, 0.01, 0.02, 0.5, rng_seed=2)
        for ratio in (0.1, 0.3, 0.7):
            out = inject_outliers(g, ratio, rng_seed=1)
            k = sum(1 for e in out.edges if e.truth is Truth.OUTLIER)
            total = sum(1 for e in out.edges if e.is_loop)
            # adding/removing one edge brackets the requested ratio
            assert abs(k - ratio * total) <= 1.0

    def test_deterministic(self):
        g = synth_grid(5, 5, 1, 0.01, 0.02, 0.5, rng_seed=2)
        a = inject_outliers(g, 0.6, rng_seed=42)
        b = inject_outliers(g, 0.6, rng_seed=42)
        assert len(a.edges) == len(b.edges)
        for ea, eb in zip(a.edges, b.edges):
            assert ea.src == eb.src and ea.dst == eb.dst
            assert np.abs(ea.meas.trans - eb.meas.trans).max() == 0.0
            assert np.abs(ea.meas.rot.m - eb.meas.rot.m).max() == 0.0

    def test_inlier_subgraph_preserved(self):
        g = synth_grid(5, 5, 1, 0.01, 0.02, 0.5, rng_seed=2)
        out = inject_outliers(g, 0.5, rng_seed=3)
        inlier_pairs = [(e.src, e.dst) for e in out.edges if e.truth is Truth.INLIER]
        orig_pairs = [(e.src, e.dst) for e in g.edges]
        assert inlier_pairs == orig_pairs

    def test_no_adjacent_or_duplicate_endpoints(self):
        g = synth_grid(5, 5, 1, 0.01, 0.02, 0.5, rng_seed=2)
        out = inject_outliers(g, 0.7, rng_seed=3)
        seen = set()
        orig = {e.pair() for e in g.edges}
        for e in out.edges:
            if e.truth is not Truth.OUTLIER:
                continue
            assert e.pair() not in orig
            assert e.pair() not in seen
            seen.add(e.pair())
            if e.src.robot == e.dst.robot:
                assert abs(e.src.index - e.dst.index) > 1

    def test_bad_ratio(self):
        g = synth_grid(3, 3, 1, 0.0, 0.0, 0.5, rng_seed=0)
        with pytest.raises(GraphError):
            inject_outliers(g, 1.0, rng_seed=0)


class TestSynthGrid:
    def test_zero_noise_consistent(self):
        g = synth_grid(4, 5, 1, 0.0, 0.0, 0.5, rng_seed=9)
        arr = EdgeArrays.from_graph(g)
        R, t = arr.stack_poses({n: p for n, p in g.nodes.items()})
        assert residual_sq(arr, R, t).max() < 1e-18

    def test_no_loops_when_prob_zero(self):
        g = synth_grid(4, 5, 1, 0.01, 0.02, 0.0, rng_seed=9)
        assert all(e.kind is EdgeKind.ODOMETRY for e in g.edges)

    def test_seed_determinism(self):
        a = synth_grid(4, 5, 2, 0.01, 0.02, 0.5, rng_seed=11)
        b = synth_grid(4, 5, 2, 0.01, 0.02, 0.5, rng_seed=11)
        assert len(a.edges) == len(b.edges)
        for ea, eb in zip(a.edges, b.edges):
            assert np.abs(ea.meas.trans - eb.meas.trans).max() == 0.0

    def test_multi_robot_split(self):
        g = synth_grid(4, 6, 3, 0.01, 0.02, 0.5, rng_seed=4)
        assert g.robots == [0, 1, 2]
        assert all(len(g.nodes_of(r)) == 8 for r in range(3))


def test_validate_catches_bad_odometry():
    g = MultiRobotPoseGraph()
    g.nodes[NodeId(0, 0)] = None
    g.nodes[NodeId(0, 1)] = None
    g.edges.append(
        Edge(NodeId(0, 1), NodeId(0, 0), Pose3.identity(), 1.0, 1.0, EdgeKind.ODOMETRY)
    )
    with pytest.raises(GraphError):
        g.validate()
