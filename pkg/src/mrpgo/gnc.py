"""Graduated non-convexity with the truncated-least-squares surrogate.

The closed-form weight update, the control-parameter schedule, and the
convergence test are shared by the centralized baseline here and by the
distributed solver. Weights live in [0, 1]; odometry edges are never
reweighted (they are treated as outlier-free).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from .geometry import Pose3
from .pose_graph import MultiRobotPoseGraph, NodeId
from .solver import ChordalLM, EdgeArrays, residual_sq, SolverDivergence


def threshold_from_probability(p: float, dof: int) -> float:
    """Squared TLS threshold: chi-square quantile at confidence ``p``."""
    if not 0.0 < p < 1.0:
        raise ValueError("probability must lie in (0, 1)")
    if dof < 1:
        raise ValueError("dof must be a positive integer")
    return float(scipy.stats.chi2.ppf(p, dof))


@dataclass
class TlsConfig:
    """Truncated-least-squares GNC settings.

    c_bar_sq is the squared residual threshold separating inliers from
    outliers in the limit; mu is multiplied by mu_update_factor each outer
    iteration.
    """

    c_bar_sq: float
    mu_update_factor: float = 1.4
    max_outer_iters: int = 100
    weight_convergence_tol: float = 1e-4

    def __post_init__(self):
        if self.c_bar_sq <= 0:
            raise ValueError("c_bar_sq must be positive")
        if self.mu_update_factor <= 1:
            raise ValueError("mu_update_factor must exceed 1")

    @classmethod
    def from_probability(cls, p: float, dof: int, **kw) -> "TlsConfig":
        return cls(c_bar_sq=threshold_from_probability(p, dof), **kw)


@dataclass
class GncState:
    mu: float
    weights: dict[int, float] = field(default_factory=dict)
    outer_iter: int = 0


def tls_weights(residual_sq_vals: np.ndarray, mu: float, c_bar_sq: float) -> np.ndarray:
    """Vectorized closed-form TLS weight update.

    w = 0 above ((mu+1)/mu) c^2, w = 1 below (mu/(mu+1)) c^2, and
    (c/r) sqrt(mu (mu+1)) - mu in between.
    """
    r2 = np.asarray(residual_sq_vals, dtype=float)
    if mu <= 0:
        raise ValueError("mu must be positive")
    if c_bar_sq <= 0:
        raise ValueError("c_bar_sq must be positive")
    hi = (mu + 1.0) / mu * c_bar_sq
    lo = mu / (mu + 1.0) * c_bar_sq
    r = np.sqrt(np.maximum(r2, 1e-300))
    mid = np.sqrt(c_bar_sq) / r * np.sqrt(mu * (mu + 1.0)) - mu
    w = np.where(r2 >= hi, 0.0, np.where(r2 <= lo, 1.0, np.clip(mid, 0.0, 1.0)))
    return w


def tls_weight(residual_sq_val: float, mu: float, c_bar_sq: float) -> float:
    return float(tls_weights(np.array([residual_sq_val]), mu, c_bar_sq)[0])


def init_mu(max_residual_sq: float, c_bar_sq: float) -> float:
    """Initial control parameter c^2 / (2 r_max^2 - c^2), clamped to >= 1e-6."""
    if max_residual_sq <= 0:
        raise ValueError("max residual must be positive")
    denom = 2.0 * max_residual_sq - c_bar_sq
    if denom <= 0:
        return 1e6  # every residual already well inside the inlier region
    return max(c_bar_sq / denom, 1e-6)


def gnc_converged(state: GncState, prev_weights: dict[int, float], config: TlsConfig) -> bool:
    """Weights stable and near-binary, or the outer-iteration cap reached."""
    if state.outer_iter >= config.max_outer_iters:
        return True
    if set(state.weights) != set(prev_weights):
        raise ValueError("weight maps must share keys")
    tol = config.weight_convergence_tol
    for k, w in state.weights.items():
        if abs(w - prev_weights[k]) >= tol:
            return False
        if min(w, 1.0 - w) >= tol:
            return False
    return True


@dataclass
class GncPgoResult:
    poses: dict[NodeId, Pose3]
    weights: dict[int, float]  # loop-edge index -> final weight
    mu: float
    outer_iters: int
    cost: float


def centralized_gnc_pgo(
    graph: MultiRobotPoseGraph,
    tls: TlsConfig,
    init: dict[NodeId, Pose3],
    inner_solver=None,
    inner_grad_tol: float = 1e-6,
    inner_max_iters: int = 100,
) -> GncPgoResult:
    """GNC-TLS over the chordal PGO cost with a damped Gauss-Newton inner solver.

    Alternates full variable updates with closed-form weight updates and the
    mu schedule until the weights are stable and near-binary. Odometry edges
    keep weight 1 throughout. ``inner_solver`` may override the default
    least-squares step; it receives (arr, R, t, weights) and returns (R, t).
    """
    arr = EdgeArrays.from_graph(graph)
    missing = [n for n in arr.node_ids if n not in init]
    if missing:
        raise ValueError(f"initial guess missing {len(missing)} nodes")
    loop_idx = np.nonzero(arr.loop_mask)[0]

    workspace = ChordalLM(arr, inner_grad_tol, inner_max_iters)

    def default_inner(arr_, R_, t_, w_):
        R2, t2, _, _, _, _ = workspace.solve(R_, t_, w_)
        return R2, t2

    inner = inner_solver or default_inner

    R, t = arr.stack_poses(init)
    w = np.ones(arr.num_edges)
    R, t = inner(arr, R, t, w)

    r2 = residual_sq(arr, R, t)
    if loop_idx.size == 0:
        final_cost = float(np.sum(r2))
        return GncPgoResult(arr.unstack_poses(R, t), {}, 1.0, 0, final_cost)

    mu = init_mu(float(r2[loop_idx].max()), tls.c_bar_sq)
    weights = {int(k): 1.0 for k in loop_idx}
    outer = 0
    while True:
        outer += 1
        prev = dict(weights)
        w_loops = tls_weights(r2[loop_idx], mu, tls.c_bar_sq)
        weights = {int(k): float(v) for k, v in zip(loop_idx, w_loops)}
        state = GncState(mu=mu, weights=weights, outer_iter=outer)
        if gnc_converged(state, prev, tls):
            break
        w = np.ones(arr.num_edges)
        w[loop_idx] = w_loops
        try:
            R, t = inner(arr, R, t, w)
        except SolverDivergence:
            raise
        r2 = residual_sq(arr, R, t)
        mu *= tls.mu_update_factor

    w = np.ones(arr.num_edges)
    w[loop_idx] = [weights[int(k)] for k in loop_idx]
    final_cost = float(np.sum(w * r2))
    return GncPgoResult(arr.unstack_poses(R, t), weights, mu, outer, final_cost)
