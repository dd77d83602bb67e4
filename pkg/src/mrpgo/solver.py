"""Centralized weighted pose-graph optimization on the chordal cost.

The cost is sum_e w_e * ( w_rot |Rj - Ri Rm|_F^2 + w_tr |tj - ti - Ri tm|^2 )
over all edges, where w_e is an optional per-edge (GNC) weight. Rotation
updates use right-multiplied rotation-vector perturbations; translations are
updated additively. The damped Gauss-Newton (Levenberg-Marquardt) iteration
assembles sparse normal equations from vectorized per-edge Jacobian blocks;
the gauge is fixed by pinning the first node.

The linear solves go through CHOLMOD (via cvxopt) with a symbolic
factorization reused across iterations; edges whose weight is exactly zero
are pruned from the system. A SuperLU fallback keeps the module usable
without cvxopt.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .geometry import Pose3, Rot3, skew, so3_exp
from .pose_graph import MultiRobotPoseGraph, NodeId

try:
    from cvxopt import cholmod as _cholmod
    from cvxopt import matrix as _cvx_matrix
    from cvxopt import spmatrix as _cvx_spmatrix

    _HAVE_CHOLMOD = True
except ImportError:  # pragma: no cover
    _HAVE_CHOLMOD = False

_BASIS = np.stack([skew(e) for e in np.eye(3)])  # so(3) generators


class SolverDivergence(RuntimeError):
    """Raised when the iteration produces a non-finite cost.

    ``last_poses`` carries the final iterate for diagnosis.
    """

    def __init__(self, message: str, last_poses: dict[NodeId, Pose3]):
        super().__init__(message)
        self.last_poses = last_poses


@dataclass
class EdgeArrays:
    """Vectorized view of a pose graph, shared by cost/residual/solver code."""

    node_ids: list[NodeId]
    index: dict[NodeId, int]
    i: np.ndarray  # (E,) source node positions
    j: np.ndarray  # (E,) target node positions
    rot_meas: np.ndarray  # (E,3,3)
    t_meas: np.ndarray  # (E,3)
    w_rot: np.ndarray  # (E,)
    w_tr: np.ndarray  # (E,)
    loop_mask: np.ndarray  # (E,) bool

    @classmethod
    def from_graph(cls, graph: MultiRobotPoseGraph) -> "EdgeArrays":
        node_ids = sorted(graph.nodes)
        index = {n: k for k, n in enumerate(node_ids)}
        E = len(graph.edges)
        i = np.zeros(E, dtype=int)
        j = np.zeros(E, dtype=int)
        rot_meas = np.zeros((E, 3, 3))
        t_meas = np.zeros((E, 3))
        w_rot = np.zeros(E)
        w_tr = np.zeros(E)
        loop_mask = np.zeros(E, dtype=bool)
        for k, e in enumerate(graph.edges):
            i[k] = index[e.src]
            j[k] = index[e.dst]
            rot_meas[k] = e.meas.rot.m
            t_meas[k] = e.meas.trans
            w_rot[k] = e.w_rot
            w_tr[k] = e.w_tr
            loop_mask[k] = e.is_loop
        return cls(node_ids, index, i, j, rot_meas, t_meas, w_rot, w_tr, loop_mask)

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return self.i.size

    def stack_poses(self, poses: dict[NodeId, Pose3]) -> tuple[np.ndarray, np.ndarray]:
        R = np.stack([poses[n].rot.m for n in self.node_ids])
        t = np.stack([poses[n].trans for n in self.node_ids])
        return R, t

    def unstack_poses(self, R: np.ndarray, t: np.ndarray) -> dict[NodeId, Pose3]:
        return {n: Pose3(Rot3(R[k]), t[k]) for k, n in enumerate(self.node_ids)}


def residual_sq(arr: EdgeArrays, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Per-edge squared precision-weighted chordal residuals (no GNC weights)."""
    dr = R[arr.j] - R[arr.i] @ arr.rot_meas
    dt = t[arr.j] - t[arr.i] - np.einsum("eab,eb->ea", R[arr.i], arr.t_meas)
    return arr.w_rot * np.sum(dr * dr, axis=(1, 2)) + arr.w_tr * np.sum(dt * dt, axis=1)


def graph_cost(arr: EdgeArrays, R: np.ndarray, t: np.ndarray, weights: np.ndarray | None = None) -> float:
    r2 = residual_sq(arr, R, t)
    if weights is not None:
        r2 = r2 * weights
    return float(np.sum(r2))


def cost_of(graph: MultiRobotPoseGraph, poses: dict[NodeId, Pose3], weights: np.ndarray | None = None) -> float:
    """Weighted chordal cost of a pose assignment (convenience wrapper)."""
    arr = EdgeArrays.from_graph(graph)
    R, t = arr.stack_poses(poses)
    return graph_cost(arr, R, t, weights)


def _batch_project_so3(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    det = np.linalg.det(u @ vt)
    u = u.copy()
    u[:, :, 2] *= np.sign(det)[:, None]
    return u @ vt


class _Linearizer:
    """Jacobian/Hessian assembly for a fixed active-edge subset.

    All index bookkeeping and the CHOLMOD symbolic factorization are computed
    once; only values change across iterations.
    """

    def __init__(self, arr: EdgeArrays, active: np.ndarray, sw_r: np.ndarray, sw_t: np.ndarray):
        self.n = arr.num_nodes
        self.i = arr.i[active]
        self.j = arr.j[active]
        self.rot_meas = arr.rot_meas[active]
        self.t_meas = arr.t_meas[active]
        self.sw_r = sw_r[active]
        self.sw_t = sw_t[active]
        E = self.i.size
        self.E = E
        # constant Jacobian pieces
        self.b_rm = _BASIS[None] @ self.rot_meas[:, None]  # (E,3,3,3): B_k @ Rm
        m = np.einsum("kab,eb->eka", _BASIS, self.t_meas)  # (E,3[k],3[a]) = B_k tm
        self.d_exp_tm = m.transpose(0, 2, 1)  # (E,3,3): column k = B_k tm

        gcol = np.empty((E, 12), dtype=np.int64)
        gcol[:, 0:3] = 6 * self.i[:, None] + np.arange(3)
        gcol[:, 3:6] = 6 * self.i[:, None] + np.arange(3, 6)
        gcol[:, 6:9] = 6 * self.j[:, None] + np.arange(3)
        gcol[:, 9:12] = 6 * self.j[:, None] + np.arange(3, 6)
        self.gcol = gcol
        rows = np.broadcast_to(gcol[:, :, None], (E, 12, 12)).ravel()
        cols = np.broadcast_to(gcol[:, None, :], (E, 12, 12)).ravel()
        # gauge: drop entries touching node 0's block, keep lower triangle only
        # (CHOLMOD wants one triangle; SuperLU path rebuilds the full matrix)
        keep = (rows >= 6) & (cols >= 6)
        self.rows = rows[keep]
        self.cols = cols[keep]
        self.keep = keep
        dim = 6 * self.n
        pattern, inverse = np.unique(
            self.rows * dim + self.cols, return_inverse=True
        )
        self.inverse = inverse
        self.nnz_rows = (pattern // dim).astype(np.int64)
        self.nnz_cols = (pattern % dim).astype(np.int64)
        self.dim = dim
        self.diag_positions = np.nonzero(self.nnz_rows == self.nnz_cols)[0]
        self._factor = None
        if _HAVE_CHOLMOD:
            tri = self.nnz_rows >= self.nnz_cols  # lower triangle (uplo='L')
            self.tri = tri
            pin_r = np.arange(6)
            all_rows = np.concatenate([self.nnz_rows[tri], pin_r])
            all_cols = np.concatenate([self.nnz_cols[tri], pin_r])
            # cvxopt stores entries in CCS order; build in that order so the
            # value vector can be overwritten in place each iteration
            order = np.lexsort((all_rows, all_cols))
            self._ccs_order = order
            self._ntri = int(tri.sum())
            self._A = _cvx_spmatrix(
                np.ones(all_rows.size)[order],
                all_rows[order].tolist(),
                all_cols[order].tolist(),
                (dim, dim),
            )
            self._factor = _cholmod.symbolic(self._A)

    def residuals_and_jacobian(self, R: np.ndarray, t: np.ndarray):
        Ri = R[self.i]
        Rj = R[self.j]
        E = self.E
        r_rot = self.sw_r[:, None, None] * (Rj - Ri @ self.rot_meas)
        r_t = self.sw_t[:, None] * (t[self.j] - t[self.i] - np.einsum("eab,eb->ea", Ri, self.t_meas))
        re = np.concatenate([r_rot.reshape(E, 9), r_t], axis=1)

        Je = np.zeros((E, 12, 12))
        jp_i = -(Ri[:, None] @ self.b_rm)  # (E,3[k],3,3)
        Je[:, 0:9, 0:3] = (self.sw_r[:, None, None, None] * jp_i.transpose(0, 2, 3, 1)).reshape(E, 9, 3)
        jp_j = Rj[:, None] @ _BASIS[None]
        Je[:, 0:9, 6:9] = (self.sw_r[:, None, None, None] * jp_j.transpose(0, 2, 3, 1)).reshape(E, 9, 3)
        Je[:, 9:12, 0:3] = -self.sw_t[:, None, None] * (Ri @ self.d_exp_tm)
        Je[:, 9:12, 3:6] = -self.sw_t[:, None, None] * np.eye(3)
        Je[:, 9:12, 9:12] = self.sw_t[:, None, None] * np.eye(3)
        return re, Je

    def assemble(self, re: np.ndarray, Je: np.ndarray):
        """Returns (gradient g = J^T r over all 6n dims, packed H values)."""
        ge = np.einsum("era,er->ea", Je, re)
        g = np.zeros(self.dim)
        np.add.at(g, self.gcol.ravel(), ge.ravel())
        He = (Je.transpose(0, 2, 1) @ Je).ravel()[self.keep]
        hvals = np.bincount(self.inverse, weights=He, minlength=self.nnz_rows.size)
        return g, hvals

    def solve(self, hvals: np.ndarray, lam: float, g: np.ndarray) -> np.ndarray:
        damp = np.zeros_like(hvals)
        diag_vals = hvals[self.diag_positions]
        damp[self.diag_positions] = lam * np.maximum(diag_vals, 1e-12) + 1e-12
        vals = hvals + damp
        rhs = -g
        rhs[:6] = 0.0
        if self._factor is not None:
            full_vals = np.concatenate([vals[self.tri], np.ones(6)])[self._ccs_order]
            self._A.V = _cvx_matrix(full_vals)
            try:
                _cholmod.numeric(self._A, self._factor)
                x = _cvx_matrix(rhs)
                _cholmod.solve(self._factor, x)
                return np.array(x).ravel()
            except ArithmeticError:
                pass  # not positive definite at this damping; fall through
        H = scipy.sparse.coo_matrix(
            (vals, (self.nnz_rows, self.nnz_cols)), shape=(self.dim, self.dim)
        ).tocsc()
        H = H + scipy.sparse.coo_matrix(
            (np.ones(6), (np.arange(6), np.arange(6))), shape=(self.dim, self.dim)
        )
        lu = scipy.sparse.linalg.splu(H.tocsc(), permc_spec="MMD_AT_PLUS_A")
        return lu.solve(rhs)


class ChordalLM:
    """Reusable LM workspace for one graph; cheap to call with new weights."""

    def __init__(self, arr: EdgeArrays, grad_tol: float = 1e-6, max_iters: int = 100):
        self.arr = arr
        self.grad_tol = grad_tol
        self.max_iters = max_iters
        self._lin: _Linearizer | None = None
        self._active_key: bytes | None = None
        self._lam = 1e-6  # damping carried across solves (same graph)

    def _linearizer(self, weights: np.ndarray) -> tuple[_Linearizer, np.ndarray]:
        active = weights > 0.0
        key = np.packbits(active).tobytes()
        if self._lin is None or key != self._active_key:
            sw_r = np.sqrt(self.arr.w_rot * weights)
            sw_t = np.sqrt(self.arr.w_tr * weights)
            self._lin = _Linearizer(self.arr, active, sw_r, sw_t)
            self._active_key = key
            self._active = active
        else:
            sw_r = np.sqrt(self.arr.w_rot * weights)
            sw_t = np.sqrt(self.arr.w_tr * weights)
            self._lin.sw_r = sw_r[self._active]
            self._lin.sw_t = sw_t[self._active]
        return self._lin, active

    def solve(
        self,
        R0: np.ndarray,
        t0: np.ndarray,
        weights: np.ndarray | None = None,
        max_iters: int | None = None,
    ) -> tuple[np.ndarray, np.ndarray, float, float, int, bool]:
        arr = self.arr
        w = np.ones(arr.num_edges) if weights is None else np.asarray(weights, dtype=float)
        lin, _ = self._linearizer(w)
        max_iters = self.max_iters if max_iters is None else max_iters

        R = R0.copy()
        t = t0.copy()
        cost = graph_cost(arr, R, t, w)
        if not np.isfinite(cost):
            raise SolverDivergence("non-finite cost at the initial guess", arr.unstack_poses(R, t))
        lam = self._lam
        grad_inf = np.inf
        it = 0
        converged = False
        stationary = False
        while it < max_iters and not stationary:
            it += 1
            re, Je = lin.residuals_and_jacobian(R, t)
            g, hvals = lin.assemble(re, Je)
            grad_inf = float(np.abs(2.0 * g).max()) if g.size else 0.0
            if grad_inf < self.grad_tol:
                converged = True
                break
            accepted = False
            while not accepted and not stationary:
                delta = lin.solve(hvals, lam, g)
                step = delta.reshape(arr.num_nodes, 6)
                R_new = _batch_project_so3(R @ so3_exp(step[:, :3]))
                t_new = t + step[:, 3:]
                cost_new = graph_cost(arr, R_new, t_new, w)
                if not np.isfinite(cost_new):
                    raise SolverDivergence("non-finite cost during LM", arr.unstack_poses(R, t))
                if cost_new < cost:
                    # stop once the decrease is below float resolution
                    stationary = cost - cost_new <= 1e-13 * (cost + 1e-12)
                    R, t, cost = R_new, t_new, cost_new
                    lam = max(lam / 3.0, 1e-12)
                    accepted = True
                elif cost_new <= cost * (1.0 + 1e-13):
                    stationary = True  # flat to machine precision
                else:
                    lam *= 4.0
                    if lam > 1e10:
                        stationary = True  # damping exhausted
        self._lam = min(lam, 1e-2)
        # a step below float64 cost resolution is convergence in the ftol sense
        return R, t, cost, grad_inf, it, converged or stationary


@dataclass
class PgoResult:
    poses: dict[NodeId, Pose3]
    cost: float
    grad_inf: float
    iterations: int
    converged: bool


def solve_arrays(
    arr: EdgeArrays,
    R0: np.ndarray,
    t0: np.ndarray,
    weights: np.ndarray | None = None,
    grad_tol: float = 1e-6,
    max_iters: int = 100,
) -> tuple[np.ndarray, np.ndarray, float, float, int, bool]:
    """One-shot LM on stacked arrays; returns (R, t, cost, grad_inf, iters, ok)."""
    return ChordalLM(arr, grad_tol, max_iters).solve(R0, t0, weights)


def solve_weighted_pgo(
    graph: MultiRobotPoseGraph,
    init: dict[NodeId, Pose3],
    weights: np.ndarray | None = None,
    grad_tol: float = 1e-6,
    max_iters: int = 100,
) -> PgoResult:
    """Weighted least-squares PGO from ``init``; weights follow edge order."""
    arr = EdgeArrays.from_graph(graph)
    missing = [n for n in arr.node_ids if n not in init]
    if missing:
        raise ValueError(f"initial guess missing {len(missing)} nodes (e.g. {missing[0]})")
    R0, t0 = arr.stack_poses(init)
    R, t, cost, grad_inf, it, ok = solve_arrays(arr, R0, t0, weights, grad_tol, max_iters)
    return PgoResult(arr.unstack_poses(R, t), cost, grad_inf, it, ok)


def odometry_init(graph: MultiRobotPoseGraph) -> dict[NodeId, Pose3]:
    """Chain odometry per robot from the identity (each robot's own frame)."""
    init = {}
    for robot, chain in graph.odometry_chains().items():
        for idx, pose in chain.items():
            init[NodeId(robot, idx)] = pose
    return init
