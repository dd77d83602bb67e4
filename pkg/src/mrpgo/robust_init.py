"""Robust alignment of robot reference frames before distributed optimization.

Every inter-robot loop closure yields one candidate for the relative
transform between two robots' local frames; GNC-TLS pose averaging over the
candidates rejects the ones caused by bad loop closures. Pairwise results
are then chained over a spanning tree of the robot-level dependency graph to
express every robot in one global frame.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geometry import (
    Pose3,
    Rot3,
    boxminus,
    boxplus,
    compose,
    so3_jr_inv,
)
from .gnc import GncState, TlsConfig, gnc_converged, init_mu, tls_weights
from .pose_graph import Edge, MultiRobotPoseGraph, NodeId

# fixed candidate covariance: 0.1 rad rotation, 0.5 m translation
DEFAULT_INIT_SIGMA_ROT = 0.1
DEFAULT_INIT_SIGMA_TR = 0.5


def default_init_cov() -> np.ndarray:
    return np.diag(
        [DEFAULT_INIT_SIGMA_ROT**2] * 3 + [DEFAULT_INIT_SIGMA_TR**2] * 3
    )


class InitError(ValueError):
    pass


@dataclass(frozen=True)
class RobotDependencyGraph:
    """Robots as vertices; an edge wherever at least one inter-robot loop exists."""

    vertices: tuple[int, ...]
    edges: frozenset[tuple[int, int]]

    @classmethod
    def from_graph(cls, graph: MultiRobotPoseGraph) -> "RobotDependencyGraph":
        return cls.from_edges(graph.robots, [e for _, e in graph.inter_robot_edges()])

    @classmethod
    def from_edges(cls, robots, inter_edges) -> "RobotDependencyGraph":
        pairs = set()
        for e in inter_edges:
            a, b = sorted((e.src.robot, e.dst.robot))
            pairs.add((a, b))
        return cls(tuple(sorted(robots)), frozenset(pairs))

    def neighbors(self, r: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == r:
                out.append(b)
            elif b == r:
                out.append(a)
        return sorted(out)

    def components(self) -> list[set[int]]:
        seen: set[int] = set()
        comps = []
        for v in self.vertices:
            if v in seen:
                continue
            comp = {v}
            queue = deque([v])
            while queue:
                u = queue.popleft()
                for w in self.neighbors(u):
                    if w not in comp:
                        comp.add(w)
                        queue.append(w)
            seen |= comp
            comps.append(comp)
        return comps


def build_spanning_tree(dep: RobotDependencyGraph, root: int) -> dict[int, int]:
    """BFS tree as a child -> parent map (root excluded); deterministic."""
    if root not in dep.vertices:
        raise InitError(f"root {root} is not a robot in the dependency graph")
    comps = dep.components()
    if len(comps) > 1:
        raise InitError(f"dependency graph is disconnected: components {sorted(map(sorted, comps))}")
    tree: dict[int, int] = {}
    seen = {root}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for w in dep.neighbors(u):
            if w not in seen:
                seen.add(w)
                tree[w] = u
                queue.append(w)
    return tree


def tree_depth(tree: dict[int, int], r: int) -> int:
    d = 0
    while r in tree:
        r = tree[r]
        d += 1
    return d


def support_spanning_tree(
    dep: RobotDependencyGraph, support: dict[tuple[int, int], int], root: int
) -> dict[int, int]:
    """Spanning tree preferring pairs with the largest surviving-inlier count.

    Greedy maximum-weight (Kruskal) on the dependency graph, deterministic
    under ties; degenerates to an arbitrary tree when all supports are equal.
    Pairs whose alignment kept more candidates are more trustworthy anchors
    than pairs whose candidates were all mutually inconsistent.
    """
    if root not in dep.vertices:
        raise InitError(f"root {root} is not a robot in the dependency graph")
    comps = dep.components()
    if len(comps) > 1:
        raise InitError(f"dependency graph is disconnected: components {sorted(map(sorted, comps))}")
    parent_of = {v: v for v in dep.vertices}

    def find(v):
        while parent_of[v] != v:
            parent_of[v] = parent_of[parent_of[v]]
            v = parent_of[v]
        return v

    chosen = []
    for a, b in sorted(dep.edges, key=lambda p: (-support.get(p, 0), p)):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent_of[ra] = rb
            chosen.append((a, b))
    adj: dict[int, list[int]] = {v: [] for v in dep.vertices}
    for a, b in chosen:
        adj[a].append(b)
        adj[b].append(a)
    tree: dict[int, int] = {}
    seen = {root}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for w in sorted(adj[u]):
            if w not in seen:
                seen.add(w)
                tree[w] = u
                queue.append(w)
    return tree


def candidate_alignment(
    edge: Edge, odom_src: dict[int, Pose3], odom_dst: dict[int, Pose3]
) -> Pose3:
    """Frame-to-frame transform implied by one inter-robot loop closure.

    ``odom_src``/``odom_dst`` are the odometric pose maps (index -> pose, in
    each robot's local frame) of the edge's source and destination robots.
    """
    if edge.src.index not in odom_src:
        raise InitError(f"odometry for {edge.src} missing")
    if edge.dst.index not in odom_dst:
        raise InitError(f"odometry for {edge.dst} missing")
    return compose(
        compose(odom_src[edge.src.index], edge.meas), odom_dst[edge.dst.index].inverse()
    )


@dataclass
class PoseAverage:
    pose: Pose3
    inliers: set[int]  # candidate indices with final weight > 0.5
    weights: list[float]
    low_confidence: bool = False


def _whitened_residuals(x: Pose3, candidates: list[Pose3], cov_inv_sqrt: np.ndarray):
    xi = np.stack([boxminus(x, c) for c in candidates])  # (K,6)
    return xi @ cov_inv_sqrt.T


def _lm_pose_average(
    candidates: list[Pose3],
    weights: np.ndarray,
    cov_inv_sqrt: np.ndarray,
    x0: Pose3,
    max_iters: int = 50,
    grad_tol: float = 1e-8,
) -> Pose3:
    x = x0
    lam = 1e-8
    r = _whitened_residuals(x, candidates, cov_inv_sqrt)
    cost = float(np.sum(weights[:, None] * r * r))
    stationary = False
    for _ in range(max_iters):
        if stationary:
            break
        K = len(candidates)
        J = np.zeros((K, 6, 6))
        xi = np.stack([boxminus(x, c) for c in candidates])
        for k, c in enumerate(candidates):
            J[k, :3, :3] = so3_jr_inv(xi[k, :3])
            J[k, 3:, 3:] = c.rot.m.T @ x.rot.m
        Jw = cov_inv_sqrt[None] @ J  # whitened blocks
        rw = xi @ cov_inv_sqrt.T
        H = np.einsum("kri,k,krj->ij", Jw, weights, Jw)
        g = np.einsum("kri,k,kr->i", Jw, weights, rw)
        if np.abs(2 * g).max() < grad_tol:
            break
        accepted = False
        while not accepted and not stationary:
            delta = np.linalg.solve(H + lam * np.eye(6), -g)
            x_new = boxplus(x, delta)
            r_new = _whitened_residuals(x_new, candidates, cov_inv_sqrt)
            cost_new = float(np.sum(weights[:, None] * r_new * r_new))
            if cost_new < cost:
                stationary = cost - cost_new <= 1e-14 * (cost + 1e-12)
                x, cost = x_new, cost_new
                lam = max(lam / 3.0, 1e-12)
                accepted = True
            else:
                lam *= 4.0
                if lam > 1e10:
                    stationary = True
    return x


def robust_pose_average(
    candidates: list[Pose3], cov: np.ndarray, tls: TlsConfig
) -> PoseAverage:
    """GNC-TLS average of pose candidates; LM inner solver starts at identity."""
    if not candidates:
        raise InitError("cannot average an empty candidate list")
    cov = np.asarray(cov, dtype=float)
    L = np.linalg.cholesky(cov)
    cov_inv_sqrt = scipy.linalg.solve_triangular(L, np.eye(6), lower=True)

    weights = np.ones(len(candidates))
    x = _lm_pose_average(candidates, weights, cov_inv_sqrt, Pose3.identity())
    r = _whitened_residuals(x, candidates, cov_inv_sqrt)
    r2 = np.sum(r * r, axis=1)
    if r2.max() <= 0.0:
        return PoseAverage(x, set(range(len(candidates))), [1.0] * len(candidates))

    mu = init_mu(float(r2.max()), tls.c_bar_sq)
    wmap = {k: 1.0 for k in range(len(candidates))}
    outer = 0
    while True:
        outer += 1
        prev = dict(wmap)
        weights = tls_weights(r2, mu, tls.c_bar_sq)
        wmap = {k: float(v) for k, v in enumerate(weights)}
        if gnc_converged(GncState(mu, wmap, outer), prev, tls):
            break
        x = _lm_pose_average(candidates, weights, cov_inv_sqrt, x)
        r = _whitened_residuals(x, candidates, cov_inv_sqrt)
        r2 = np.sum(r * r, axis=1)
        mu *= tls.mu_update_factor

    inliers = {k for k, w in wmap.items() if w > 0.5}
    if not inliers:
        # a disconnected initialization would stall the optimization stage,
        # so fall back to the single most central candidate and flag it
        best = int(np.argmin(r2))
        return PoseAverage(candidates[best], {best}, list(weights), low_confidence=True)
    return PoseAverage(x, inliers, list(weights))


@dataclass
class FrameAlignment:
    from_robot: int
    to_robot: int
    transform: Pose3  # to_robot's frame expressed in from_robot's frame
    inlier_edges: frozenset[int] = frozenset()
    low_confidence: bool = False


def align_robot_pair(
    graph: MultiRobotPoseGraph,
    chains: dict[int, dict[int, Pose3]],
    a: int,
    b: int,
    tls: TlsConfig,
    cov: np.ndarray | None = None,
) -> FrameAlignment:
    """Robust frame alignment for one robot pair from its inter-robot loops."""
    cov = default_init_cov() if cov is None else cov
    idx: list[int] = []
    candidates: list[Pose3] = []
    for k, e in graph.inter_robot_edges():
        if {e.src.robot, e.dst.robot} != {a, b}:
            continue
        cand = candidate_alignment(e, chains[e.src.robot], chains[e.dst.robot])
        if e.src.robot != a:
            cand = cand.inverse()
        idx.append(k)
        candidates.append(cand)
    if not candidates:
        raise InitError(f"no inter-robot loops between robots {a} and {b}")
    avg = robust_pose_average(candidates, cov, tls)
    return FrameAlignment(
        a,
        b,
        avg.pose,
        frozenset(idx[k] for k in avg.inliers),
        avg.low_confidence,
    )


def assemble_global_frames(
    tree: dict[int, int],
    pairwise: dict[tuple[int, int], FrameAlignment],
    root: int | None = None,
) -> dict[int, Pose3]:
    """Compose pairwise alignments along root-to-robot tree paths.

    The root (the vertex that is nobody's child) maps to the identity; for a
    single-robot (empty) tree it must be given explicitly.
    """
    if not tree:
        if root is None:
            raise InitError("empty tree needs an explicit root")
        return {root: Pose3.identity()}
    roots = set(tree.values()) - set(tree)
    if root is not None:
        roots &= {root}
    if len(roots) != 1:
        raise InitError(f"tree must have exactly one root, found {sorted(roots)}")
    (root,) = roots
    frames = {root: Pose3.identity()}
    pending = sorted(tree, key=lambda r: (tree_depth(tree, r), r))
    for child in pending:
        parent = tree[child]
        al = pairwise.get((parent, child))
        inv = False
        if al is None:
            al = pairwise.get((child, parent))
            inv = True
        if al is None:
            raise InitError(f"missing pairwise alignment for tree edge ({parent}, {child})")
        rel = al.transform.inverse() if inv else al.transform
        frames[child] = compose(frames[parent], rel)
    return frames


def compose_global_init(
    chains: dict[int, dict[int, Pose3]], frames: dict[int, Pose3]
) -> dict[NodeId, Pose3]:
    """Express per-robot odometric trajectories in the shared global frame."""
    init: dict[NodeId, Pose3] = {}
    for robot, chain in chains.items():
        frame = frames[robot]
        for idx, pose in chain.items():
            init[NodeId(robot, idx)] = compose(frame, pose)
    return init


def robust_initialization(
    graph: MultiRobotPoseGraph,
    chains: dict[int, dict[int, Pose3]],
    tls: TlsConfig,
    cov: np.ndarray | None = None,
) -> tuple[dict[NodeId, Pose3], dict[tuple[int, int], FrameAlignment], dict[int, int]]:
    """Full first stage: pairwise GNC averaging + spanning-tree composition.

    Returns (global initial guess, pairwise alignments, spanning tree).
    """
    dep = RobotDependencyGraph.from_graph(graph)
    root = min(dep.vertices)
    if len(dep.vertices) == 1:
        return compose_global_init(chains, {root: Pose3.identity()}), {}, {}
    pairwise = {
        (a, b): align_robot_pair(graph, chains, a, b, tls, cov) for a, b in sorted(dep.edges)
    }
    # anchor the tree on the best-supported pairs; a low-confidence pair is
    # used only when nothing better can keep the tree connected
    support = {
        pair: (0 if al.low_confidence else len(al.inlier_edges))
        for pair, al in pairwise.items()
    }
    tree = support_spanning_tree(dep, support, root)
    frames = assemble_global_frames(tree, pairwise, root)
    return compose_global_init(chains, frames), pairwise, tree
