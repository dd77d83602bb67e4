"""Multi-robot pose graph model, g2o-style IO, synthetic data, outlier injection.

Vertex ids in g2o files encode the owning robot as ``robot * 10**8 + index``,
so plain single-robot files load as robot 0 and stay readable by stock tools.
Information matrices are reduced to two scalar precisions per edge (rotation
and translation block diagonal means); this is lossy but matches the two
precisions used by the chordal residual.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .geometry import Pose3, Rot3, boxplus, compose, so3_exp

ROBOT_ID_BASE = 10**8


class GraphError(ValueError):
    pass


class ParseError(GraphError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


class EdgeKind(Enum):
    ODOMETRY = "odometry"
    INTRA_LOOP = "intra_loop"
    INTER_LOOP = "inter_loop"


class Truth(Enum):
    INLIER = "inlier"
    OUTLIER = "outlier"


class NodeId(NamedTuple):
    robot: int
    index: int


@dataclass
class Edge:
    src: NodeId
    dst: NodeId
    meas: Pose3
    w_rot: float
    w_tr: float
    kind: EdgeKind
    gnc_weight: float = 1.0
    truth: Truth | None = None

    @property
    def is_loop(self) -> bool:
        return self.kind is not EdgeKind.ODOMETRY

    @property
    def is_inter_robot(self) -> bool:
        return self.src.robot != self.dst.robot

    def pair(self) -> tuple[NodeId, NodeId]:
        """Unordered endpoint pair, canonically sorted."""
        return (self.src, self.dst) if self.src <= self.dst else (self.dst, self.src)


@dataclass
class MultiRobotPoseGraph:
    """Nodes (with optional reference poses) plus odometry and loop edges."""

    nodes: dict[NodeId, Pose3 | None] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)

    @property
    def robots(self) -> list[int]:
        return sorted({n.robot for n in self.nodes})

    def nodes_of(self, robot: int) -> list[NodeId]:
        return sorted(n for n in self.nodes if n.robot == robot)

    def loop_edges(self) -> list[tuple[int, Edge]]:
        return [(k, e) for k, e in enumerate(self.edges) if e.is_loop]

    def inter_robot_edges(self) -> list[tuple[int, Edge]]:
        return [(k, e) for k, e in enumerate(self.edges) if e.kind is EdgeKind.INTER_LOOP]

    def copy(self) -> "MultiRobotPoseGraph":
        return MultiRobotPoseGraph(dict(self.nodes), [replace(e) for e in self.edges])

    def validate(self) -> None:
        for robot in self.robots:
            idx = sorted(n.index for n in self.nodes if n.robot == robot)
            if idx != list(range(len(idx))):
                raise GraphError(f"robot {robot}: pose indices not contiguous from 0")
        for k, e in enumerate(self.edges):
            if e.src not in self.nodes or e.dst not in self.nodes:
                raise GraphError(f"edge {k} references a missing node")
            if e.kind is EdgeKind.ODOMETRY:
                if e.src.robot != e.dst.robot or e.dst.index != e.src.index + 1:
                    raise GraphError(f"edge {k}: odometry must connect (r,i)->(r,i+1)")
            if e.kind is EdgeKind.INTER_LOOP and not e.is_inter_robot:
                raise GraphError(f"edge {k}: inter-robot loop with equal robots")
            if e.kind is EdgeKind.INTRA_LOOP and e.is_inter_robot:
                raise GraphError(f"edge {k}: intra-robot loop across robots")
            if not (0.0 <= e.gnc_weight <= 1.0):
                raise GraphError(f"edge {k}: gnc weight outside [0, 1]")

    def odometry_chains(self) -> dict[int, dict[int, Pose3]]:
        """Per-robot poses obtained by chaining odometry from the identity."""
        chains: dict[int, dict[int, Pose3]] = {}
        odom = {
            (e.src.robot, e.src.index): e.meas
            for e in self.edges
            if e.kind is EdgeKind.ODOMETRY
        }
        for robot in self.robots:
            n = len(self.nodes_of(robot))
            poses = {0: Pose3.identity()}
            for i in range(n - 1):
                step = odom.get((robot, i))
                if step is None:
                    raise GraphError(f"robot {robot}: missing odometry edge {i}->{i + 1}")
                poses[i + 1] = compose(poses[i], step)
            chains[robot] = poses
        return chains


def _encode_vertex(node: NodeId) -> int:
    return node.robot * ROBOT_ID_BASE + node.index


def _decode_vertex(vid: int) -> NodeId:
    return NodeId(vid // ROBOT_ID_BASE, vid % ROBOT_ID_BASE)


def _info_upper_to_matrix(vals: list[float], dim: int) -> np.ndarray:
    m = np.zeros((dim, dim))
    k = 0
    for i in range(dim):
        for j in range(i, dim):
            m[i, j] = m[j, i] = vals[k]
            k += 1
    return m


def _reduce_info(info: np.ndarray, path, lineno) -> tuple[float, float]:
    """(w_rot, w_tr) from an information matrix; translation block first."""
    if np.linalg.eigvalsh(info).min() < -1e-9:
        raise ParseError(path, lineno, "information matrix is not PSD")
    dim = info.shape[0]
    if dim == 6:
        w_tr = float(np.mean(np.diag(info)[:3]))
        w_rot = float(np.mean(np.diag(info)[3:]))
    else:  # SE2: (x, y, theta)
        w_tr = float(np.mean(np.diag(info)[:2]))
        w_rot = float(info[2, 2])
    if w_rot <= 0 or w_tr <= 0:
        raise ParseError(path, lineno, "non-positive precision after reduction")
    return w_rot, w_tr


def _se2_pose(x: float, y: float, theta: float) -> Pose3:
    return Pose3(Rot3(so3_exp(np.array([0.0, 0.0, theta]))), np.array([x, y, 0.0]))


def read_g2o(path) -> MultiRobotPoseGraph:
    """Parse VERTEX/EDGE SE3:QUAT lines (SE2 variants promoted to SE(3))."""
    path = Path(path)
    graph = MultiRobotPoseGraph()
    pending: list[tuple[int, NodeId, NodeId, Pose3, float, float]] = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            tokens = raw.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            tag = tokens[0]
            try:
                if tag == "VERTEX_SE3:QUAT":
                    vid = int(tokens[1])
                    x, y, z, qx, qy, qz, qw = map(float, tokens[2:9])
                    graph.nodes[_decode_vertex(vid)] = Pose3(
                        Rot3.from_quat(qx, qy, qz, qw), np.array([x, y, z])
                    )
                elif tag in ("VERTEX_SE2", "VERTEX_SE2:QUAT"):
                    vid = int(tokens[1])
                    x, y, theta = map(float, tokens[2:5])
                    graph.nodes[_decode_vertex(vid)] = _se2_pose(x, y, theta)
                elif tag == "EDGE_SE3:QUAT":
                    i, j = int(tokens[1]), int(tokens[2])
                    vals = list(map(float, tokens[3:]))
                    if len(vals) != 7 + 21:
                        raise ValueError(f"expected 28 numeric fields, got {len(vals)}")
                    meas = Pose3(Rot3.from_quat(*vals[3:7]), np.array(vals[:3]))
                    info = _info_upper_to_matrix(vals[7:], 6)
                    w_rot, w_tr = _reduce_info(info, path, lineno)
                    pending.append((lineno, _decode_vertex(i), _decode_vertex(j), meas, w_rot, w_tr))
                elif tag == "EDGE_SE2":
                    i, j = int(tokens[1]), int(tokens[2])
                    vals = list(map(float, tokens[3:]))
                    if len(vals) != 3 + 6:
                        raise ValueError(f"expected 9 numeric fields, got {len(vals)}")
                    meas = _se2_pose(*vals[:3])
                    info = _info_upper_to_matrix(vals[3:], 3)
                    w_rot, w_tr = _reduce_info(info, path, lineno)
                    pending.append((lineno, _decode_vertex(i), _decode_vertex(j), meas, w_rot, w_tr))
                elif tag.startswith("VERTEX") or tag.startswith("EDGE"):
                    raise ValueError(f"unsupported element {tag}")
                # other tags (FIX, params) are ignored
            except ParseError:
                raise
            except (ValueError, IndexError) as e:
                raise ParseError(path, lineno, str(e)) from e
    for lineno, src, dst, meas, w_rot, w_tr in pending:
        if src not in graph.nodes or dst not in graph.nodes:
            raise ParseError(path, lineno, "edge references undeclared vertex")
        if src.robot == dst.robot and dst.index == src.index + 1:
            kind = EdgeKind.ODOMETRY
        elif src.robot == dst.robot:
            kind = EdgeKind.INTRA_LOOP
        else:
            kind = EdgeKind.INTER_LOOP
        graph.edges.append(Edge(src, dst, meas, w_rot, w_tr, kind))
    graph.validate()
    return graph


def write_g2o(graph: MultiRobotPoseGraph, path) -> None:
    """Write vertices (node poses; identity when absent) and edges."""
    path = Path(path)
    lines = []
    for node in sorted(graph.nodes):
        pose = graph.nodes[node] or Pose3.identity()
        q = pose.rot.as_quat()
        t = pose.trans
        lines.append(
            "VERTEX_SE3:QUAT %d %.17g %.17g %.17g %.17g %.17g %.17g %.17g"
            % (_encode_vertex(node), t[0], t[1], t[2], q[0], q[1], q[2], q[3])
        )
    for e in graph.edges:
        q = e.meas.rot.as_quat()
        t = e.meas.trans
        info = np.diag([e.w_tr] * 3 + [e.w_rot] * 3)
        upper = [info[i, j] for i in range(6) for j in range(i, 6)]
        lines.append(
            "EDGE_SE3:QUAT %d %d %.17g %.17g %.17g %.17g %.17g %.17g %.17g "
            % (_encode_vertex(e.src), _encode_vertex(e.dst), t[0], t[1], t[2], q[0], q[1], q[2], q[3])
            + " ".join("%.17g" % v for v in upper)
        )
    path.write_text("\n".join(lines) + "\n")


def write_ground_truth(graph: MultiRobotPoseGraph, path) -> None:
    """Ground-truth sidecar: vertex lines only, same encoding."""
    path = Path(path)
    lines = []
    for node in sorted(graph.nodes):
        pose = graph.nodes[node]
        if pose is None:
            raise GraphError(f"node {node} has no ground-truth pose")
        q = pose.rot.as_quat()
        t = pose.trans
        lines.append(
            "VERTEX_SE3:QUAT %d %.17g %.17g %.17g %.17g %.17g %.17g %.17g"
            % (_encode_vertex(node), t[0], t[1], t[2], q[0], q[1], q[2], q[3])
        )
    path.write_text("\n".join(lines) + "\n")


def read_ground_truth(graph: MultiRobotPoseGraph, path) -> MultiRobotPoseGraph:
    """Attach poses from a ``.gt.g2o`` sidecar to a copy of ``graph``."""
    gt = read_g2o(path)
    out = graph.copy()
    for node, pose in gt.nodes.items():
        if node not in out.nodes:
            raise GraphError(f"ground truth has unknown node {node}")
        out.nodes[node] = pose
    return out


def partition(graph: MultiRobotPoseGraph, n: int) -> MultiRobotPoseGraph:
    """Cut a single-robot odometry chain into ``n`` contiguous segments.

    Segment lengths differ by at most one; edges crossing a cut (including
    the cut odometry edges themselves) become inter-robot loops.
    """
    if n < 1:
        raise GraphError("robot count must be >= 1")
    robots = graph.robots
    if len(robots) != 1:
        raise GraphError("partition expects a single-robot graph")
    (robot,) = robots
    total = len(graph.nodes)
    if n > total:
        raise GraphError(f"cannot split {total} poses into {n} robots")
    base, extra = divmod(total, n)
    sizes = [base + (1 if r < extra else 0) for r in range(n)]
    starts = np.concatenate([[0], np.cumsum(sizes)])

    def remap(node: NodeId) -> NodeId:
        g = node.index
        r = int(np.searchsorted(starts, g, side="right") - 1)
        return NodeId(r, g - int(starts[r]))

    out = MultiRobotPoseGraph()
    for node, pose in graph.nodes.items():
        out.nodes[remap(node)] = pose
    for e in graph.edges:
        src, dst = remap(e.src), remap(e.dst)
        if src.robot == dst.robot:
            kind = EdgeKind.ODOMETRY if e.kind is EdgeKind.ODOMETRY else EdgeKind.INTRA_LOOP
        else:
            kind = EdgeKind.INTER_LOOP
        out.edges.append(Edge(src, dst, e.meas, e.w_rot, e.w_tr, kind, e.gnc_weight, e.truth))
    out.validate()
    return out


def _random_rotation(rng: np.random.Generator) -> Rot3:
    """Uniform rotation via normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Rot3.from_quat(q[0], q[1], q[2], q[3])


def inject_outliers(
    graph: MultiRobotPoseGraph,
    ratio: float,
    rng_seed: int,
    translation_range: float = 10.0,
) -> MultiRobotPoseGraph:
    """Add spurious loop closures so outliers make up ``ratio`` of all loops.

    Outlier endpoints are sampled uniformly over non-adjacent pose pairs
    (|i - j| > 1 for same-robot pairs); measurements have uniformly random
    rotations and per-coordinate translations in [-range, range]. Existing
    edges are tagged as inliers; injected edges are tagged outliers.
    """
    if not 0.0 <= ratio < 1.0:
        raise GraphError("outlier ratio must lie in [0, 1)")
    if len(graph.nodes) < 3:
        raise GraphError("graph must have at least 3 nodes")
    out = graph.copy()
    for e in out.edges:
        if e.truth is None:
            e.truth = Truth.INLIER
    if ratio == 0.0:
        return out
    true_loops = sum(1 for e in out.edges if e.is_loop and e.truth is Truth.INLIER)
    k = int(round(ratio * true_loops / (1.0 - ratio)))
    if k == 0:
        return out

    rng = np.random.default_rng(rng_seed)
    nodes = sorted(out.nodes)
    taken = {e.pair() for e in out.edges}
    added = 0
    attempts = 0
    while added < k:
        attempts += 1
        if attempts > 1000 * k + 1000:
            raise GraphError("could not place requested outliers (graph too dense)")
        a, b = rng.choice(len(nodes), size=2, replace=False)
        na, nb = nodes[int(a)], nodes[int(b)]
        if na > nb:
            na, nb = nb, na
        if na.robot == nb.robot and abs(na.index - nb.index) <= 1:
            continue
        if (na, nb) in taken:
            continue
        taken.add((na, nb))
        meas = Pose3(_random_rotation(rng), rng.uniform(-translation_range, translation_range, size=3))
        kind = EdgeKind.INTRA_LOOP if na.robot == nb.robot else EdgeKind.INTER_LOOP
        # reuse the typical loop precisions so outliers are not self-identifying
        ref = next((e for e in out.edges if e.is_loop), out.edges[0])
        out.edges.append(Edge(na, nb, meas, ref.w_rot, ref.w_tr, kind, 1.0, Truth.OUTLIER))
        added += 1
    return out


def synth_grid(
    rows: int,
    cols: int,
    robots: int,
    noise_rot: float,
    noise_tr: float,
    loop_prob: float,
    rng_seed: int,
    spacing: float = 1.0,
    precision_margin: float = 2.0,
    passes: int = 1,
) -> MultiRobotPoseGraph:
    """Planar grid trajectory (boustrophedon) with noisy odometry and loops.

    Ground truth is stored on the nodes. With ``passes`` > 1 the path retraces
    the grid, so spatially coincident poses from different passes (and hence
    different robots after partitioning) can share loop closures. Loops
    connect poses within 1.5 grid spacings with probability ``loop_prob``.

    Edge precisions follow the chordal convention w_rot = 1 / (2 sigma^2)
    with sigma = precision_margin * noise (floored at 1e-3): deliberately
    conservative, mirroring how fixed covariances are chosen for real
    front-ends whose actual noise is lower than the assumed one.
    """
    if rows * cols * passes < robots:
        raise GraphError("grid too small for requested robot count")
    rng = np.random.default_rng(rng_seed)

    # snake path over the grid; heading follows the direction of travel
    cells = []
    for r in range(rows):
        rng_cols = range(cols) if r % 2 == 0 else range(cols - 1, -1, -1)
        cells.extend((r, c) for c in rng_cols)
    cells = cells * max(passes, 1)
    n = len(cells)
    positions = np.array([[c * spacing, r * spacing, 0.0] for r, c in cells])
    truth: list[Pose3] = []
    for k in range(n):
        d = positions[min(k + 1, n - 1)] - positions[k - 1 if k == n - 1 else k]
        yaw = math.atan2(d[1], d[0]) if np.linalg.norm(d) > 0 else 0.0
        truth.append(Pose3(Rot3.from_rotvec([0.0, 0.0, yaw]), positions[k]))

    sig_r = max(precision_margin * noise_rot, 1e-3)
    sig_t = max(precision_margin * noise_tr, 1e-3)
    w_rot = 1.0 / (2.0 * sig_r * sig_r)
    w_tr = 1.0 / (sig_t * sig_t)

    def noisy(rel: Pose3) -> Pose3:
        if noise_rot == 0.0 and noise_tr == 0.0:
            return rel
        xi = np.concatenate([rng.normal(0, noise_rot, 3), rng.normal(0, noise_tr, 3)])
        return boxplus(rel, xi)

    graph = MultiRobotPoseGraph()
    for k in range(n):
        graph.nodes[NodeId(0, k)] = truth[k]
    for k in range(n - 1):
        rel = compose(truth[k].inverse(), truth[k + 1])
        graph.edges.append(
            Edge(NodeId(0, k), NodeId(0, k + 1), noisy(rel), w_rot, w_tr, EdgeKind.ODOMETRY)
        )
    if loop_prob > 0:
        from scipy.spatial import cKDTree

        pairs = sorted(cKDTree(positions).query_pairs(r=1.5 * spacing + 1e-9))
        for a, b in pairs:
            if b - a <= 1:
                continue
            if rng.uniform() < loop_prob:
                rel = compose(truth[a].inverse(), truth[b])
                graph.edges.append(
                    Edge(NodeId(0, a), NodeId(0, b), noisy(rel), w_rot, w_tr, EdgeKind.INTRA_LOOP)
                )
    graph.validate()
    return graph if robots == 1 else partition(graph, robots)


def trajectory_diameter(poses: Iterable[Pose3]) -> float:
    """Largest pairwise distance between pose translations, in meters."""
    pts = np.array([p.trans for p in poses])
    if len(pts) < 2:
        return 0.0
    # O(n^2)/2 on the hull would be fancier; graphs here are small
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    return float(np.sqrt(d2.max()))
