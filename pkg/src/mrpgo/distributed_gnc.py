"""Distributed graduated non-convexity driven by the synchronous simulator.

The run is a barrier-structured protocol:

1. Pair alignment: for every robot pair with inter-robot loops, the lower-id
   robot solves GNC pose averaging locally and transmits the result (one
   alignment solve and one message per pair).
2. Tree growth: the global frame spreads from the root robot along a
   spanning tree of the dependency graph, one hop per round.
3. Outer loop until the GNC weights are stable and near-binary (or an early
   stop cap): a variable-update phase (block-coordinate updates in
   round-robin order, each consuming one public-pose message per neighbor),
   one public-pose refresh round, a weight round (one message per
   inter-robot loop, computed by the lower-id endpoint; intra-robot weights
   need no messages), and a synchronized control-parameter update. The
   control parameter is initialized once from a max-residual reduction over
   the spanning tree using control messages.

Per-robot state lives in per-robot slots; all substantive cross-robot data
flows through simulator messages. Coordinator-level bookkeeping (the phase
schedule, tree choice from pair support counts, convergence flags) is
treated as shared metadata and not byte-accounted, like the constant-size
consensus flags it corresponds to on a real transport. Public poses are
exchanged as true lifted values by default so every block update provably
decreases the joint lifted cost; the compact Pose3 wire format is available
as a config toggle (cheaper, rank-independent bytes, but no strict
monotonicity guarantee). The final rounding (a rank-3 basis consensus) runs
after the protocol ends and is likewise not byte-accounted.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import LiftedPose, Pose3, compose, project_to_so3
from .gnc import GncState, TlsConfig, gnc_converged, init_mu, tls_weight
from .netsim import (
    Ledger,
    LocalityViolation,
    Message,
    MessageKind,
    SimContext,
    Simulator,
)
from .pose_graph import MultiRobotPoseGraph, NodeId
from .rbcd import (
    LiftedProblem,
    RbcdConfig,
    RobotBlock,
    block_update,
    lift,
    round_robin,
    round_solution,
)
from .robust_init import (
    FrameAlignment,
    InitError,
    RobotDependencyGraph,
    align_robot_pair,
    build_spanning_tree,
    candidate_alignment,
    default_init_cov,
    support_spanning_tree,
    tree_depth,
)


@dataclass
class DgncConfig:
    tls: TlsConfig
    rbcd: RbcdConfig = field(default_factory=RbcdConfig)
    early_stop_total_iters: int | None = None
    full_variable_updates: bool = False
    max_full_update_sweeps: int = 200
    init_tls: TlsConfig | None = None  # stage-1 averaging threshold (default: tls)
    init_cov: np.ndarray | None = None  # stage-1 candidate covariance
    compact_public_poses: bool = False

    def __post_init__(self):
        if self.early_stop_total_iters is not None and self.early_stop_total_iters <= 0:
            raise ValueError("early_stop_total_iters must be positive")


@dataclass
class DgncResult:
    poses: dict[NodeId, Pose3]
    weights: dict[int, float]
    ledger: Ledger
    outer_iters: int
    total_rbcd_updates: int
    mu: float
    initial_guess: dict[NodeId, Pose3]
    final_cost: float


def edge_residual_sq_lifted(problem: LiftedProblem, k: int, lookup) -> float:
    """Chordal residual of edge ``k`` evaluated on lifted variables.

    ``lookup(node) -> (y_rot, y_trans)``. Equals the SE(3) chordal residual
    whenever the variables are exact lifts.
    """
    ys, ps = lookup(problem.src_nodes[k])
    yd, pd = lookup(problem.dst_nodes[k])
    dr = yd - ys @ problem.arr.rot_meas[k]
    dt = pd - ps - ys @ problem.arr.t_meas[k]
    return float(
        problem.arr.w_rot[k] * np.sum(dr * dr) + problem.arr.w_tr[k] * np.dot(dt, dt)
    )


def loop_owner(edge) -> int:
    return min(edge.src.robot, edge.dst.robot)


def distributed_weight_update(
    blocks: dict[int, RobotBlock],
    graph: MultiRobotPoseGraph,
    mu: float,
    tls: TlsConfig,
    problem: LiftedProblem | None = None,
) -> tuple[dict[int, float], list[tuple[int, int, int, float]]]:
    """Closed-form weight pass as each owning robot would compute it.

    Returns (weights by edge index, weight messages as (from, to, edge, w)):
    intra-robot loops produce no messages; each inter-robot loop produces
    exactly one, from the lower-id endpoint to the other.
    """
    problem = problem or LiftedProblem(graph, next(iter(blocks.values())).rank)

    def lookup(node: NodeId):
        b = blocks[node.robot]
        k = b.local(node.index)
        return b.y_rot[k], b.y_trans[k]

    weights: dict[int, float] = {}
    messages: list[tuple[int, int, int, float]] = []
    for k, e in graph.loop_edges():
        r2 = edge_residual_sq_lifted(problem, k, lookup)
        w = tls_weight(r2, mu, tls.c_bar_sq)
        weights[k] = w
        if e.is_inter_robot:
            owner = loop_owner(e)
            other = e.dst.robot if owner == e.src.robot else e.src.robot
            messages.append((owner, other, k, w))
    return weights, messages


class _Phase(Enum):
    PAIR_ALIGN = "pair_align"
    TREE_GROW = "tree_grow"
    VAR = "var"
    REFRESH = "refresh"
    MU_REDUCE = "mu_reduce"
    MU_BCAST = "mu_bcast"
    WEIGHT = "weight"
    DONE = "done"


@dataclass
class _RobotState:
    frame: Pose3 | None = None
    block: RobotBlock | None = None
    neighbor_public: dict[NodeId, LiftedPose] = field(default_factory=dict)
    alignments: dict[tuple[int, int], FrameAlignment] = field(default_factory=dict)
    weights: dict[int, float] = field(default_factory=dict)
    mu: float | None = None
    partial_max: float = 0.0
    last_sweep_decrease: float = 0.0


def _compact(lp: LiftedPose) -> Pose3:
    """Best-effort per-pose rounding for the compact wire format."""
    u, _, _ = np.linalg.svd(lp.y_rot, full_matrices=False)
    m = u.T @ lp.y_rot
    if np.linalg.det(m) < 0:
        u = u.copy()
        u[:, 2] *= -1.0
        m = u.T @ lp.y_rot
    return Pose3(project_to_so3(m), u.T @ lp.y_trans)


class _DgncProtocol:
    """State machine realizing the phases above; one compute() per robot/round."""

    def __init__(
        self,
        graph: MultiRobotPoseGraph,
        chains: dict[int, dict[int, Pose3]],
        config: DgncConfig,
        naive_init: bool,
        monitor=None,
    ):
        self.graph = graph
        self.chains = chains
        self.config = config
        self.naive = naive_init
        self.monitor = monitor
        self.robots = graph.robots
        self.root = min(self.robots)
        self.problem = LiftedProblem(graph, config.rbcd.rank)
        self.dep = RobotDependencyGraph.from_graph(graph)
        self.pairs = sorted(self.dep.edges)
        self.pair_edges: dict[tuple[int, int], list[int]] = {p: [] for p in self.pairs}
        for k, e in graph.inter_robot_edges():
            a, b = sorted((e.src.robot, e.dst.robot))
            self.pair_edges[(a, b)].append(k)
        self.loop_keys = [k for k, _ in graph.loop_edges()]
        self.owned: dict[int, list[int]] = {r: [] for r in self.robots}
        for k, e in graph.loop_edges():
            self.owned[loop_owner(e)].append(k)

        self.states = {r: _RobotState() for r in self.robots}
        self.tree: dict[int, int] = {}
        self.depth_max = 0
        self.phase_round = 0
        self.outer = 0
        self.total_updates = 0
        self.schedule: list[int] = []
        self.sweeps_this_outer = 0
        self.mu_initialized = False
        self.prev_weights: dict[int, float] = {k: 1.0 for k in self.loop_keys}
        self.result_weights: dict[int, float] = {k: 1.0 for k in self.loop_keys}
        self.initial_guess: dict[NodeId, Pose3] = {}
        if len(self.robots) == 1:
            self.states[self.root].frame = Pose3.identity()
            self._start_var_phase()
        else:
            self.phase = _Phase.PAIR_ALIGN

    # -- per-robot helpers ---------------------------------------------------

    def _absorb(self, robot: int, inbox: list[Message]) -> None:
        st = self.states[robot]
        for m in inbox:
            if m.kind is MessageKind.FRAME_ALIGNMENT_RESULT:
                pair = (min(m.sender, robot), max(m.sender, robot))
                st.alignments[pair] = FrameAlignment(m.sender, robot, m.payload)
            elif m.kind is MessageKind.SPANNING_TREE_GROW:
                st.frame = m.payload
            elif m.kind is MessageKind.PUBLIC_POSES:
                for node, value in m.payload:
                    if isinstance(value, Pose3):
                        value = LiftedPose.from_pose(value, self.config.rbcd.rank)
                    st.neighbor_public[node] = value
            elif m.kind is MessageKind.WEIGHT_UPDATE:
                for k, w in m.payload:
                    st.weights[k] = w
            elif m.kind is MessageKind.CONTROL:
                if self.tree.get(robot) == m.sender:
                    st.mu = m.payload[0]  # parent broadcasts the control parameter
                else:
                    st.partial_max = max(st.partial_max, m.payload[0])

    def _ensure_block(self, robot: int) -> None:
        st = self.states[robot]
        if st.block is not None:
            return
        if st.frame is None:
            raise InitError(f"robot {robot} has no global frame yet")
        poses = {
            NodeId(robot, idx): compose(st.frame, pose)
            for idx, pose in self.chains[robot].items()
        }
        self.initial_guess.update(poses)
        st.block = lift(poses, self.config.rbcd.rank, self.graph)[robot]

    def _weight_vector(self, robot: int) -> np.ndarray:
        w = np.ones(len(self.graph.edges))
        for k, value in self.states[robot].weights.items():
            w[k] = value
        return w

    def _public_payload(self, sender: int, receiver: int):
        self._ensure_block(sender)
        st = self.states[sender]
        wanted = {n.index for n in self.problem.wanted.get((receiver, sender), [])}
        poses = st.block.public_poses(wanted)
        if self.config.compact_public_poses:
            return [(node, _compact(lp)) for node, lp in sorted(poses.items())]
        return sorted(poses.items())

    def _lookup_for(self, robot: int):
        st = self.states[robot]

        def lookup(node: NodeId):
            if node.robot == robot:
                k = st.block.local(node.index)
                return st.block.y_rot[k], st.block.y_trans[k]
            lp = st.neighbor_public[node]
            return lp.y_rot, lp.y_trans

        return lookup

    def _start_var_phase(self) -> None:
        self.phase = _Phase.VAR
        self.phase_round = 0
        k = self.config.rbcd.iters_per_round
        cap = self.config.early_stop_total_iters
        if cap is not None:
            k = min(k, cap - self.total_updates)
        self.schedule = round_robin(self.robots, max(k, 0))
        for st in self.states.values():
            st.last_sweep_decrease = 0.0

    # -- simulator interface ---------------------------------------------------

    def compute(self, robot: int, round_no: int, inbox: list[Message], ctx: SimContext):
        self._absorb(robot, inbox)
        st = self.states[robot]
        out: list[tuple[int, MessageKind, object]] = []

        if self.phase is _Phase.PAIR_ALIGN:
            for pair in self.pairs:
                a, b = pair
                if a != robot:
                    continue
                if self.naive:
                    ks = self.pair_edges[pair]
                    k = ks[int(ctx.rng.integers(len(ks)))]
                    e = self.graph.edges[k]
                    cand = candidate_alignment(
                        e, self.chains[e.src.robot], self.chains[e.dst.robot]
                    )
                    if e.src.robot != a:
                        cand = cand.inverse()
                    alignment = FrameAlignment(a, b, cand, frozenset([k]))
                else:
                    cov = self.config.init_cov
                    alignment = align_robot_pair(
                        self.graph,
                        self.chains,
                        a,
                        b,
                        self.config.init_tls or self.config.tls,
                        default_init_cov() if cov is None else cov,
                    )
                st.alignments[pair] = alignment
                out.append((b, MessageKind.FRAME_ALIGNMENT_RESULT, alignment.transform))
            if robot == self.root:
                st.frame = Pose3.identity()

        elif self.phase is _Phase.TREE_GROW:
            out.extend(self._grow(robot))

        elif self.phase is _Phase.VAR:
            v = self.phase_round
            if v >= 1 and self.schedule[v - 1] == robot:
                self._ensure_block(robot)
                updated, before, after = block_update(
                    st.block,
                    st.neighbor_public,
                    self.problem,
                    self._weight_vector(robot),
                    self.config.rbcd,
                )
                if after > before + 1e-9:
                    raise RuntimeError(
                        f"lifted cost increased in a block update ({before} -> {after})"
                    )
                st.block = updated
                st.last_sweep_decrease = max(st.last_sweep_decrease, before - after)
                self.total_updates += 1
                if self.monitor is not None:
                    self.monitor(robot, before, after)
            if v < len(self.schedule):
                nxt = self.schedule[v]
                if robot != nxt and (nxt, robot) in self.problem.wanted:
                    out.append((nxt, MessageKind.PUBLIC_POSES, self._public_payload(robot, nxt)))

        elif self.phase is _Phase.REFRESH:
            for b in self.problem.neighbors(robot):
                out.append((b, MessageKind.PUBLIC_POSES, self._public_payload(robot, b)))

        elif self.phase is _Phase.MU_REDUCE:
            if self.phase_round == 0:
                self._ensure_block(robot)
                lookup = self._lookup_for(robot)
                local = [
                    edge_residual_sq_lifted(self.problem, k, lookup)
                    for k in self.owned[robot]
                ]
                st.partial_max = max(local, default=0.0)
            depth = tree_depth(self.tree, robot)
            if depth > 0 and depth == self.depth_max - self.phase_round:
                out.append((self.tree[robot], MessageKind.CONTROL, [st.partial_max]))

        elif self.phase is _Phase.MU_BCAST:
            if robot == self.root and self.phase_round == 0:
                st.mu = init_mu(max(st.partial_max, 1e-300), self.config.tls.c_bar_sq)
            if st.mu is not None and tree_depth(self.tree, robot) == self.phase_round:
                for child, parent in sorted(self.tree.items()):
                    if parent == robot:
                        out.append((child, MessageKind.CONTROL, [st.mu]))

        elif self.phase is _Phase.WEIGHT:
            lookup = self._lookup_for(robot)
            for k in self.owned[robot]:
                e = self.graph.edges[k]
                r2 = edge_residual_sq_lifted(self.problem, k, lookup)
                w = tls_weight(r2, st.mu, self.config.tls.c_bar_sq)
                st.weights[k] = w
                if e.is_inter_robot:
                    other = e.dst.robot if robot == e.src.robot else e.src.robot
                    out.append((other, MessageKind.WEIGHT_UPDATE, [(k, w)]))

        return out

    def _grow(self, robot: int):
        st = self.states[robot]
        if st.frame is None or tree_depth(self.tree, robot) != self.phase_round:
            return []
        out = []
        for child, parent in sorted(self.tree.items()):
            if parent != robot:
                continue
            pair = (min(robot, child), max(robot, child))
            alignment = st.alignments.get(pair)
            if alignment is None:
                raise InitError(f"missing alignment for tree edge {pair}")
            rel = alignment.transform
            if alignment.from_robot != robot:
                rel = rel.inverse()
            out.append((child, MessageKind.SPANNING_TREE_GROW, compose(st.frame, rel)))
        return out

    def finished(self, round_no: int) -> bool:
        cfg = self.config
        if self.phase is _Phase.PAIR_ALIGN:
            support: dict[tuple[int, int], int] = {}
            for pair in self.pairs:
                al = self.states[pair[0]].alignments[pair]
                support[pair] = 0 if al.low_confidence else len(al.inlier_edges)
            if self.naive:
                self.tree = build_spanning_tree(self.dep, self.root)
            else:
                self.tree = support_spanning_tree(self.dep, support, self.root)
            self.depth_max = max((tree_depth(self.tree, r) for r in self.robots), default=0)
            self.phase = _Phase.TREE_GROW
            self.phase_round = 0
            return False
        if self.phase is _Phase.TREE_GROW:
            self.phase_round += 1
            if self.phase_round >= self.depth_max:
                self._start_var_phase()
            return False
        if self.phase is _Phase.VAR:
            self.phase_round += 1
            if self.phase_round <= len(self.schedule):
                return False
            cap = cfg.early_stop_total_iters
            if cap is not None and self.total_updates >= cap:
                self.phase = _Phase.DONE
                return True
            if cfg.full_variable_updates:
                self.sweeps_this_outer += 1
                decrease = max(st.last_sweep_decrease for st in self.states.values())
                if decrease > 1e-12 and self.sweeps_this_outer < cfg.max_full_update_sweeps:
                    self._start_var_phase()
                    return False
            self.sweeps_this_outer = 0
            self.phase = _Phase.REFRESH
            self.phase_round = 0
            return False
        if self.phase is _Phase.REFRESH:
            self.phase = _Phase.MU_REDUCE if not self.mu_initialized else _Phase.WEIGHT
            self.phase_round = 0
            return False
        if self.phase is _Phase.MU_REDUCE:
            self.phase_round += 1
            if self.phase_round >= max(self.depth_max, 1):
                self.phase = _Phase.MU_BCAST
                self.phase_round = 0
            return False
        if self.phase is _Phase.MU_BCAST:
            self.phase_round += 1
            if self.phase_round >= max(self.depth_max, 1):
                self.mu_initialized = True
                self.phase = _Phase.WEIGHT
                self.phase_round = 0
            return False
        if self.phase is _Phase.WEIGHT:
            self.outer += 1
            weights = {}
            for r in self.robots:
                for k in self.owned[r]:
                    weights[k] = self.states[r].weights[k]
            self.result_weights = weights
            mu = self.states[self.root].mu
            state = GncState(mu=mu, weights=weights, outer_iter=self.outer)
            if gnc_converged(state, self.prev_weights, cfg.tls):
                self.phase = _Phase.DONE
                return True
            self.prev_weights = dict(weights)
            for st in self.states.values():
                st.mu *= cfg.tls.mu_update_factor  # synchronized at the barrier
            self._start_var_phase()
            return False
        return self.phase is _Phase.DONE

    def outputs(self):
        for r in self.robots:
            self._ensure_block(r)
        return {r: self.states[r].block for r in self.robots}


def max_protocol_rounds(graph: MultiRobotPoseGraph, config: DgncConfig) -> int:
    n = max(len(graph.robots), 1)
    outer = config.tls.max_outer_iters + 2
    sweeps = config.max_full_update_sweeps if config.full_variable_updates else 1
    per_outer = sweeps * (config.rbcd.iters_per_round + 2) + 4 + 2 * n
    return 4 + n + outer * per_outer


def _run(
    graph: MultiRobotPoseGraph,
    local_odometry: dict[int, dict[int, Pose3]] | None,
    config: DgncConfig,
    sim: Simulator | None,
    seed: int,
    naive_init: bool,
    monitor=None,
) -> DgncResult:
    graph.validate()
    dep = RobotDependencyGraph.from_graph(graph)
    comps = dep.components()
    if len(comps) > 1:
        raise InitError(
            f"robot dependency graph is disconnected: {sorted(map(sorted, comps))}"
        )
    chains = local_odometry or graph.odometry_chains()
    sim = sim or Simulator()

    acc: dict[int, set[int]] = {}
    for _, e in graph.inter_robot_edges():
        acc.setdefault(e.src.robot, set()).add(e.src.index)
        acc.setdefault(e.dst.robot, set()).add(e.dst.index)
    public_of = {r: frozenset(v) for r, v in acc.items()}

    def only_public_poses(msg: Message) -> None:
        if msg.kind is not MessageKind.PUBLIC_POSES:
            return
        allowed = public_of.get(msg.sender, frozenset())
        for node, _ in msg.payload:
            if node.robot != msg.sender or node.index not in allowed:
                raise LocalityViolation(
                    f"robot {msg.sender} attempted to transmit non-public pose {node}"
                )

    sim.register_send_check(only_public_poses)

    protocol = _DgncProtocol(graph, chains, config, naive_init, monitor)
    blocks, ledger = sim.run_rounds(
        graph.robots, protocol, max_protocol_rounds(graph, config), seed
    )
    poses = round_solution(blocks)
    anchor = poses[NodeId(protocol.root, 0)].inverse()
    poses = {n: compose(anchor, p) for n, p in poses.items()}
    w = np.ones(len(graph.edges))
    for k, value in protocol.result_weights.items():
        w[k] = value
    final_cost = protocol.problem.total_cost(blocks, w)
    initial_guess = dict(protocol.initial_guess)
    init_anchor = initial_guess.get(NodeId(protocol.root, 0))
    if init_anchor is not None:
        a = init_anchor.inverse()
        initial_guess = {n: compose(a, p) for n, p in initial_guess.items()}
    mu = protocol.states[protocol.root].mu
    return DgncResult(
        poses=poses,
        weights=dict(protocol.result_weights),
        ledger=ledger,
        outer_iters=protocol.outer,
        total_rbcd_updates=protocol.total_updates,
        mu=float(mu) if mu is not None else float("nan"),
        initial_guess=initial_guess,
        final_cost=final_cost,
    )


def run_dgnc(
    graph: MultiRobotPoseGraph,
    local_odometry: dict[int, dict[int, Pose3]] | None = None,
    config: DgncConfig | None = None,
    sim: Simulator | None = None,
    seed: int = 0,
    monitor=None,
) -> DgncResult:
    """Robust-initialization variant (the full two-stage method)."""
    config = config or DgncConfig(tls=TlsConfig.from_probability(0.5, 6))
    return _run(graph, local_odometry, config, sim, seed, naive_init=False, monitor=monitor)


def run_naive_init_dgnc(
    graph: MultiRobotPoseGraph,
    local_odometry: dict[int, dict[int, Pose3]] | None = None,
    config: DgncConfig | None = None,
    sim: Simulator | None = None,
    seed: int = 0,
    monitor=None,
) -> DgncResult:
    """Ablation: stage 1 replaced by one randomly chosen loop per tree edge."""
    config = config or DgncConfig(tls=TlsConfig.from_probability(0.5, 6))
    return _run(graph, local_odometry, config, sim, seed, naive_init=True, monitor=monitor)
