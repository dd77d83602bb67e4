"""Trajectory and classification metrics plus the tidy CSV report schema."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose3, Rot3, compose
from .pose_graph import MultiRobotPoseGraph, NodeId, Truth
from .solver import odometry_init, solve_weighted_pgo
from .robust_init import (
    RobotDependencyGraph,
    build_spanning_tree,
    candidate_alignment,
    compose_global_init,
    tree_depth,
)


@dataclass
class AteReport:
    rmse: float
    per_robot: dict[int, float]
    alignment: Pose3


def _umeyama_rigid(est: np.ndarray, ref: np.ndarray) -> Pose3:
    """Rigid transform (no scale) minimizing |ref - (R est + t)|^2."""
    mu_e = est.mean(axis=0)
    mu_r = ref.mean(axis=0)
    H = (est - mu_e).T @ (ref - mu_r)
    u, _, vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    R = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = mu_r - R @ mu_e
    return Pose3(Rot3(R), t)


def ate(
    est: dict[NodeId, Pose3],
    ref: dict[NodeId, Pose3],
    per_robot_alignment: bool = False,
) -> AteReport:
    """Translation RMSE after optimal rigid alignment of est onto ref.

    By default all robots are aligned jointly; ``per_robot_alignment`` aligns
    each robot independently before computing its RMSE (the joint alignment
    is still reported).
    """
    if set(est) != set(ref):
        raise ValueError("estimate and reference must cover the same nodes")
    keys = sorted(est)
    if len(keys) < 3:
        raise ValueError("ATE needs at least 3 poses")
    P = np.array([est[k].trans for k in keys])
    Q = np.array([ref[k].trans for k in keys])
    T = _umeyama_rigid(P, Q)
    aligned = (T.rot.m @ P.T).T + T.trans
    err2 = np.sum((aligned - Q) ** 2, axis=1)
    rmse = float(np.sqrt(err2.mean()))

    per_robot: dict[int, float] = {}
    robots = sorted({k.robot for k in keys})
    for r in robots:
        mask = np.array([k.robot == r for k in keys])
        if per_robot_alignment:
            if mask.sum() < 3:
                per_robot[r] = float("nan")
                continue
            Tr = _umeyama_rigid(P[mask], Q[mask])
            al = (Tr.rot.m @ P[mask].T).T + Tr.trans
            per_robot[r] = float(np.sqrt(np.mean(np.sum((al - Q[mask]) ** 2, axis=1))))
        else:
            per_robot[r] = float(np.sqrt(err2[mask].mean()))
    return AteReport(rmse, per_robot, T)


def ml_reference(graph: MultiRobotPoseGraph) -> dict[NodeId, Pose3]:
    """Least-squares solution on the true-inlier subgraph.

    Requires truth tags on loop edges. The initial guess chains odometry and
    aligns robot frames deterministically through the first inlier loop of
    each spanning-tree pair, so the result does not depend on injected
    outliers or on any rng.
    """
    for e in graph.edges:
        if e.is_loop and e.truth is None:
            raise ValueError("ml_reference needs truth tags on every loop edge")
    weights = np.array(
        [0.0 if (e.is_loop and e.truth is not Truth.INLIER) else 1.0 for e in graph.edges]
    )
    chains = graph.odometry_chains()
    robots = graph.robots
    if len(robots) == 1:
        init = odometry_init(graph)
    else:
        inlier_inter = [
            (k, e)
            for k, e in graph.inter_robot_edges()
            if e.truth is Truth.INLIER
        ]
        dep = RobotDependencyGraph.from_edges(robots, [e for _, e in inlier_inter])
        tree = build_spanning_tree(dep, root=min(robots))
        frames = {min(robots): Pose3.identity()}
        # walk the tree; use the first inlier edge between each pair
        order = sorted(tree, key=lambda r: (tree_depth(tree, r), r))
        for child in order:
            parent = tree[child]
            edge = next(
                e
                for _, e in inlier_inter
                if {e.src.robot, e.dst.robot} == {parent, child}
            )
            rel = candidate_alignment(edge, chains[edge.src.robot], chains[edge.dst.robot])
            if edge.src.robot != parent:
                rel = rel.inverse()
            frames[child] = compose(frames[parent], rel)
        init = compose_global_init(chains, frames)
    return solve_weighted_pgo(graph, init, weights).poses


def end_to_end_error(est: dict[NodeId, Pose3]) -> dict[int, float]:
    """Per-robot distance between the first and last pose translations."""
    out: dict[int, float] = {}
    for r in sorted({k.robot for k in est}):
        idx = sorted(k.index for k in est if k.robot == r)
        if len(idx) < 2:
            raise ValueError(f"robot {r} has fewer than 2 poses")
        first = est[NodeId(r, idx[0])].trans
        last = est[NodeId(r, idx[-1])].trans
        out[r] = float(np.linalg.norm(first - last))
    return out


def classification_report(
    weights: dict[int, float],
    graph: MultiRobotPoseGraph,
    threshold: float = 0.5,
) -> tuple[float, float]:
    """Inlier precision/recall of ``weights`` against truth tags.

    An edge is accepted when its weight exceeds ``threshold``. Precision of
    an empty accept set is reported as 1.0.
    """
    tp = fp = fn = 0
    for k, e in graph.loop_edges():
        if e.truth is None:
            raise ValueError(f"loop edge {k} has no truth tag")
        accepted = weights.get(k, 0.0) > threshold
        if e.truth is Truth.INLIER:
            if accepted:
                tp += 1
            else:
                fn += 1
        elif accepted:
            fp += 1
    precision = tp / (tp + fp) if (tp + fp) > 0 else 1.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 1.0
    return precision, recall


REPORT_COLUMNS = [
    "method",
    "seed",
    "outlier_ratio",
    "threshold",
    "ate_m",
    "precision",
    "recall",
    "cost",
    "bytes",
    "wall_ms",
    "status",
]


@dataclass
class ReportRow:
    method: str
    seed: int
    outlier_ratio: float
    threshold: float
    ate_m: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    cost: float = float("nan")
    bytes: int = 0
    wall_ms: int = 0
    status: str = "ok"

    def as_list(self) -> list:
        return [
            self.method,
            self.seed,
            f"{self.outlier_ratio:g}",
            f"{self.threshold:g}",
            f"{self.ate_m:.9g}",
            f"{self.precision:.6g}",
            f"{self.recall:.6g}",
            f"{self.cost:.9g}",
            self.bytes,
            self.wall_ms,
            self.status,
        ]


def write_report_csv(rows: list[ReportRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(row.as_list())
