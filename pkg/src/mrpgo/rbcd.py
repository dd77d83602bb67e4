"""Block-coordinate descent on the rank-lifted relaxation of weighted PGO.

Rotations are lifted from SO(3) to Stiefel elements Y (r x 3, orthonormal
columns, default rank 5) and translations to r-vectors; the chordal cost
evaluated on lifted variables is then optimized one robot block at a time,
each robot holding its neighbors' public poses fixed. A single update is one
Riemannian gradient step with Armijo backtracking (optionally iterated to
local convergence), which makes every update non-increasing in the joint
lifted cost. Rounding back to SE(3) projects the stacked solution onto its
best rank-3 basis.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import LiftedPose, Pose3, Rot3, project_to_so3
from .pose_graph import EdgeKind, MultiRobotPoseGraph, NodeId
from .solver import EdgeArrays


class RbcdError(RuntimeError):
    pass


@dataclass
class RbcdConfig:
    rank: int = 5
    iters_per_round: int = 15
    step: str = "gradient"  # "gradient": one Armijo step; "exact": iterate to tol
    grad_tol: float = 1e-8
    armijo_c: float = 1e-4
    max_halvings: int = 30
    max_local_iters: int = 100  # only used by step="exact"

    def __post_init__(self):
        if self.rank < 3:
            raise ValueError("rank must be >= 3")
        if self.step not in ("gradient", "exact"):
            raise ValueError(f"unknown block-update method {self.step!r}")


@dataclass
class RobotBlock:
    """One robot's lifted trajectory: y_rot (n, r, 3), y_trans (n, r)."""

    robot: int
    indices: list[int]
    y_rot: np.ndarray
    y_trans: np.ndarray
    public_indices: frozenset[int]
    last_step: float = 1.0
    # previous iterate/gradient pair, kept for Barzilai-Borwein step sizing
    bb_state: tuple | None = None

    @property
    def rank(self) -> int:
        return self.y_rot.shape[1]

    def local(self, index: int) -> int:
        return self.indices.index(index)

    def lifted(self) -> dict[int, LiftedPose]:
        return {
            idx: LiftedPose(self.y_rot[k], self.y_trans[k])
            for k, idx in enumerate(self.indices)
        }

    def public_poses(self, indices=None) -> dict[NodeId, LiftedPose]:
        wanted = self.public_indices if indices is None else indices
        out = {}
        for k, idx in enumerate(self.indices):
            if idx in wanted:
                out[NodeId(self.robot, idx)] = LiftedPose(self.y_rot[k], self.y_trans[k])
        return out


def lift(
    poses: dict[NodeId, Pose3], rank: int, graph: MultiRobotPoseGraph | None = None
) -> dict[int, RobotBlock]:
    """Embed SE(3) poses into the rank-lifted space, one block per robot.

    ``graph`` supplies the inter-robot edges that define public indices;
    without it every block has an empty public set.
    """
    if rank < 3:
        raise RbcdError("rank must be >= 3")
    public: dict[int, set[int]] = {}
    if graph is not None:
        for _, e in graph.inter_robot_edges():
            public.setdefault(e.src.robot, set()).add(e.src.index)
            public.setdefault(e.dst.robot, set()).add(e.dst.index)
    blocks: dict[int, RobotBlock] = {}
    for robot in sorted({n.robot for n in poses}):
        idx = sorted(n.index for n in poses if n.robot == robot)
        y = np.zeros((len(idx), rank, 3))
        p = np.zeros((len(idx), rank))
        for k, i in enumerate(idx):
            pose = poses[NodeId(robot, i)]
            y[k, :3, :] = pose.rot.m
            p[k, :3] = pose.trans
        blocks[robot] = RobotBlock(
            robot, idx, y, p, frozenset(public.get(robot, set()))
        )
    return blocks


class LiftedProblem:
    """Edge bookkeeping for lifted cost/gradient evaluation, per robot."""

    def __init__(self, graph: MultiRobotPoseGraph, rank: int):
        self.graph = graph
        self.rank = rank
        self.arr = EdgeArrays.from_graph(graph)
        self.robots = graph.robots
        E = self.arr.num_edges
        # per-edge endpoints as (robot, index)
        self.src_nodes = [self.arr.node_ids[k] for k in self.arr.i]
        self.dst_nodes = [self.arr.node_ids[k] for k in self.arr.j]
        self.edges_of: dict[int, np.ndarray] = {}
        for robot in self.robots:
            touching = [
                k
                for k in range(E)
                if self.src_nodes[k].robot == robot or self.dst_nodes[k].robot == robot
            ]
            self.edges_of[robot] = np.array(touching, dtype=int)
        # poses robot b must send when robot a updates: b's endpoints of shared edges
        self.wanted: dict[tuple[int, int], list[NodeId]] = {}
        for a in self.robots:
            for b in self.robots:
                if a == b:
                    continue
                nodes = set()
                for k in self.edges_of[a]:
                    for node in (self.src_nodes[k], self.dst_nodes[k]):
                        if node.robot == b:
                            nodes.add(node)
                if nodes:
                    self.wanted[(a, b)] = sorted(nodes)

    def neighbors(self, robot: int) -> list[int]:
        return sorted(b for (a, b) in self.wanted if a == robot)

    def gather_public(self, robot: int, blocks: dict[int, RobotBlock]) -> dict[NodeId, LiftedPose]:
        out: dict[NodeId, LiftedPose] = {}
        for b in self.neighbors(robot):
            out.update(blocks[b].public_poses({n.index for n in self.wanted[(robot, b)]}))
        return out

    def _edge_stacks(
        self,
        robot: int,
        block: RobotBlock,
        neighbor_public: dict[NodeId, LiftedPose],
    ):
        """(edge ids, Ys, ps, Yd, pd, src_local, dst_local) for edges touching robot."""
        ks = self.edges_of[robot]
        r = block.rank
        K = ks.size
        Ys = np.empty((K, r, 3))
        ps = np.empty((K, r))
        Yd = np.empty((K, r, 3))
        pd = np.empty((K, r))
        src_local = np.full(K, -1, dtype=int)
        dst_local = np.full(K, -1, dtype=int)
        local_pos = {idx: k for k, idx in enumerate(block.indices)}
        for a, k in enumerate(ks):
            s, d = self.src_nodes[k], self.dst_nodes[k]
            if s.robot == robot:
                sl = local_pos[s.index]
                src_local[a] = sl
                Ys[a], ps[a] = block.y_rot[sl], block.y_trans[sl]
            else:
                lp = neighbor_public[s]
                Ys[a], ps[a] = lp.y_rot, lp.y_trans
            if d.robot == robot:
                dl = local_pos[d.index]
                dst_local[a] = dl
                Yd[a], pd[a] = block.y_rot[dl], block.y_trans[dl]
            else:
                lp = neighbor_public[d]
                Yd[a], pd[a] = lp.y_rot, lp.y_trans
        return ks, Ys, ps, Yd, pd, src_local, dst_local

    @staticmethod
    def _edge_costs(arrs, rot_meas, t_meas, w_rot, w_tr):
        ks, Ys, ps, Yd, pd = arrs
        dr = Yd - Ys @ rot_meas
        dt = pd - ps - np.einsum("kab,kb->ka", Ys, t_meas)
        return w_rot * np.sum(dr * dr, axis=(1, 2)) + w_tr * np.sum(dt * dt, axis=1)

    def block_cost(self, robot, block, neighbor_public, weights) -> float:
        ks, Ys, ps, Yd, pd, _, _ = self._edge_stacks(robot, block, neighbor_public)
        if ks.size == 0:
            return 0.0
        c = self._edge_costs(
            (ks, Ys, ps, Yd, pd), self.arr.rot_meas[ks], self.arr.t_meas[ks],
            self.arr.w_rot[ks], self.arr.w_tr[ks],
        )
        return float(np.sum(weights[ks] * c))

    def block_gradient(self, robot, block, neighbor_public, weights):
        """Riemannian gradient of the block-restricted cost wrt the block."""
        ks, Ys, ps, Yd, pd, src_local, dst_local = self._edge_stacks(
            robot, block, neighbor_public
        )
        n, r = block.y_trans.shape
        GY = np.zeros((n, r, 3))
        gp = np.zeros((n, r))
        if ks.size:
            rot_meas = self.arr.rot_meas[ks]
            t_meas = self.arr.t_meas[ks]
            w = weights[ks] * self.arr.w_rot[ks]
            wt = weights[ks] * self.arr.w_tr[ks]
            dr = Yd - Ys @ rot_meas  # (K,r,3)
            dt = pd - ps - np.einsum("kab,kb->ka", Ys, t_meas)  # (K,r)
            gy_src = -2.0 * w[:, None, None] * (dr @ rot_meas.transpose(0, 2, 1))
            gy_src += -2.0 * wt[:, None, None] * np.einsum("ka,kb->kab", dt, t_meas)
            gy_dst = 2.0 * w[:, None, None] * dr
            gp_src = -2.0 * wt[:, None] * dt
            gp_dst = 2.0 * wt[:, None] * dt
            s_mask = src_local >= 0
            d_mask = dst_local >= 0
            np.add.at(GY, src_local[s_mask], gy_src[s_mask])
            np.add.at(gp, src_local[s_mask], gp_src[s_mask])
            np.add.at(GY, dst_local[d_mask], gy_dst[d_mask])
            np.add.at(gp, dst_local[d_mask], gp_dst[d_mask])
        # project onto the Stiefel tangent space: G - Y sym(Y^T G)
        S = block.y_rot.transpose(0, 2, 1) @ GY
        S = 0.5 * (S + S.transpose(0, 2, 1))
        GY_tan = GY - block.y_rot @ S
        return GY_tan, gp

    def total_cost(self, blocks: dict[int, RobotBlock], weights: np.ndarray) -> float:
        N = self.arr.num_nodes
        r = next(iter(blocks.values())).rank
        Y = np.empty((N, r, 3))
        p = np.empty((N, r))
        for robot, block in blocks.items():
            for k, idx in enumerate(block.indices):
                pos = self.arr.index[NodeId(robot, idx)]
                Y[pos] = block.y_rot[k]
                p[pos] = block.y_trans[k]
        dr = Y[self.arr.j] - Y[self.arr.i] @ self.arr.rot_meas
        dt = p[self.arr.j] - p[self.arr.i] - np.einsum("kab,kb->ka", Y[self.arr.i], self.arr.t_meas)
        c = self.arr.w_rot * np.sum(dr * dr, axis=(1, 2)) + self.arr.w_tr * np.sum(dt * dt, axis=1)
        return float(np.sum(weights * c))


def _polar_retract(Y: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(Y, full_matrices=False)
    return u @ vt


def block_update(
    block: RobotBlock,
    neighbor_public: dict[NodeId, LiftedPose],
    problem: LiftedProblem,
    weights: np.ndarray,
    config: RbcdConfig,
) -> tuple[RobotBlock, float, float]:
    """Descend on the block-restricted lifted cost; external poses stay fixed.

    Returns (updated block, cost before, cost after); the cost never
    increases. With config.step == "exact" the Armijo step is iterated until
    the local gradient norm falls below config.grad_tol.
    """
    robot = block.robot
    cost0 = problem.block_cost(robot, block, neighbor_public, weights)
    if not np.isfinite(cost0):
        raise RbcdError(f"non-finite block cost for robot {robot}")
    y = block.y_rot
    p = block.y_trans
    step = block.last_step
    bb_state = block.bb_state
    cost = cost0
    iters = config.max_local_iters if config.step == "exact" else 1
    for _ in range(iters):
        work = replace(block, y_rot=y, y_trans=p)
        GY, gp = problem.block_gradient(robot, work, neighbor_public, weights)
        gnorm_sq = float(np.sum(GY * GY) + np.sum(gp * gp))
        if gnorm_sq <= config.grad_tol**2:
            break
        alpha = step * 2.0
        if bb_state is not None:
            y0, p0, GY0, gp0 = bb_state
            dxg = float(np.sum((y - y0) * (GY - GY0)) + np.sum((p - p0) * (gp - gp0)))
            dxx = float(np.sum((y - y0) ** 2) + np.sum((p - p0) ** 2))
            if np.isfinite(dxg) and dxg > 1e-300 and dxx > 0:
                alpha = min(max(dxx / dxg, 1e-12), 1e6)
        bb_state = (y, p, GY, gp)
        improved = False
        for _ in range(config.max_halvings):
            y_try = _polar_retract(y - alpha * GY)
            p_try = p - alpha * gp
            trial = replace(block, y_rot=y_try, y_trans=p_try)
            cost_try = problem.block_cost(robot, trial, neighbor_public, weights)
            if cost_try <= cost - config.armijo_c * alpha * gnorm_sq:
                y, p, cost, step = y_try, p_try, cost_try, alpha
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
    return replace(block, y_rot=y, y_trans=p, last_step=step, bb_state=bb_state), cost0, cost


def round_robin(robots: list[int], count: int) -> list[int]:
    """Deterministic activation schedule: sorted ids repeated ``count`` times."""
    order = sorted(robots)
    return [order[k % len(order)] for k in range(count)]


def rbcd_round(
    blocks: dict[int, RobotBlock],
    graph: MultiRobotPoseGraph,
    weights: np.ndarray,
    config: RbcdConfig,
    schedule: list[int] | None = None,
    problem: LiftedProblem | None = None,
    on_update=None,
) -> dict[int, RobotBlock]:
    """Run ``config.iters_per_round`` block updates in schedule order.

    ``on_update(robot, cost_before, cost_after)`` is invoked after every
    update (ledger hooks, monotonicity monitors). The joint lifted cost is
    non-increasing across every single update.
    """
    problem = problem or LiftedProblem(graph, config.rank)
    schedule = schedule or round_robin(list(blocks), config.iters_per_round)
    blocks = dict(blocks)
    for robot in schedule:
        neighbor_public = problem.gather_public(robot, blocks)
        updated, before, after = block_update(
            blocks[robot], neighbor_public, problem, weights, config
        )
        blocks[robot] = updated
        if on_update is not None:
            on_update(robot, before, after)
    return blocks


def round_solution(blocks: dict[int, RobotBlock]) -> dict[NodeId, Pose3]:
    """Project lifted blocks back to SE(3) via the best rank-3 basis.

    The stacked lifted rotations are reduced with a thin SVD; a consistent
    global sign is chosen before per-block projection to SO(3), and
    translations are mapped through the same basis.
    """
    if not blocks:
        raise RbcdError("no blocks to round")
    items: list[tuple[NodeId, int, int]] = []
    mats = []
    for robot in sorted(blocks):
        b = blocks[robot]
        for k, idx in enumerate(b.indices):
            items.append((NodeId(robot, idx), robot, k))
            mats.append(b.y_rot[k])
    stack = np.concatenate(mats, axis=1)  # (r, 3n)
    u, s, _ = np.linalg.svd(stack, full_matrices=False)
    if s[2] <= 1e-12 * max(s[0], 1e-300):
        raise RbcdError("rotation stack is rank deficient; cannot round")
    basis = u[:, :3]  # (r, 3)
    raw = [basis.T @ m for m in mats]
    dets = np.array([np.linalg.det(m) for m in raw])
    if np.sum(np.sign(dets)) < 0:
        basis = basis.copy()
        basis[:, 2] *= -1.0
        raw = [basis.T @ m for m in mats]
    out: dict[NodeId, Pose3] = {}
    for (node, robot, k), m in zip(items, raw):
        rot = project_to_so3(m)
        trans = basis.T @ blocks[robot].y_trans[k]
        out[node] = Pose3(rot, trans)
    return out


def loop_weight_vector(graph: MultiRobotPoseGraph, loop_weights: dict[int, float]) -> np.ndarray:
    """Full edge-length weight vector: odometry pinned to 1, loops as given."""
    w = np.ones(len(graph.edges))
    for k, value in loop_weights.items():
        if graph.edges[k].kind is EdgeKind.ODOMETRY:
            raise RbcdError("odometry edges are never reweighted")
        w[k] = value
    return w
