"""Rigid-body geometry on SO(3)/SE(3) plus the rank-lifted (Stiefel) pose type.

Conventions used throughout the package:

- Rotations are 3x3 matrices; quaternions appear only at file-format
  boundaries.
- Tangent vectors are 6-vectors ordered [rotation-vector, translation].
- Perturbations act on the right: ``a = b (+) xi`` means
  ``rot_a = rot_b @ Exp(xi_rot)`` and ``trans_a = trans_b + rot_b @ xi_trans``,
  so ``a (-) b`` returns ``[Log(rot_b^T rot_a), rot_b^T (trans_a - trans_b)]``.

All functions are pure; the pose types are immutable value objects and safe
to share across threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class GeometryError(ValueError):
    """Raised when a geometric precondition is violated."""


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix [v]x such that [v]x w = v cross w."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues exponential, vectorized over leading dimensions.

    ``phi`` has shape (..., 3); returns (..., 3, 3).
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    theta2 = theta * theta
    small = theta < 1e-8
    # sin(t)/t and (1-cos(t))/t^2 with series fallbacks near zero
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    px, py, pz = phi[..., 0], phi[..., 1], phi[..., 2]
    zeros = np.zeros_like(px)
    hat = np.stack(
        [
            np.stack([zeros, -pz, py], axis=-1),
            np.stack([pz, zeros, -px], axis=-1),
            np.stack([-py, px, zeros], axis=-1),
        ],
        axis=-2,
    )
    eye = np.broadcast_to(np.eye(3), hat.shape)
    return eye + a[..., None, None] * hat + b[..., None, None] * (hat @ hat)


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation-vector logarithm, vectorized; inverse of :func:`so3_exp`.

    Near-pi rotations fall back to the diagonal (axis-extraction) formula.
    """
    rot = np.asarray(rot, dtype=float)
    single = rot.ndim == 2
    R = rot.reshape(-1, 3, 3)
    tr = np.clip((R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2] - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(tr)
    v = 0.5 * np.stack(
        [R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=-1
    )
    theta2 = theta * theta
    small = theta < 1e-7
    near_pi = (np.pi - theta) < 1e-5
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(
            small,
            1.0 + theta2 / 6.0,
            theta / np.where(small | near_pi, 1.0, np.sin(theta)),
        )
    out = v * factor[:, None]
    if np.any(near_pi):
        for k in np.nonzero(near_pi)[0]:
            out[k] = _log_near_pi(R[k], theta[k], v[k])
    out = out.reshape(rot.shape[:-2] + (3,))
    return out[0] if single and out.ndim == 2 else out


def _log_near_pi(R: np.ndarray, theta: float, v: np.ndarray) -> np.ndarray:
    # R = I + sin(t)[a]x + (1-cos(t))[a]x^2; near pi recover the axis from
    # the dominant diagonal of (R + I)/2 = cos^2-ish + aa^T(1-cos)/2 form.
    A = (R + np.eye(3)) * 0.5
    d = np.diag(A)
    i = int(np.argmax(d))
    axis = np.zeros(3)
    axis[i] = np.sqrt(max(d[i], 0.0))
    if axis[i] < 1e-12:
        return v  # degenerate, should not happen for a valid rotation
    for j in range(3):
        if j != i:
            axis[j] = A[i, j] / axis[i]
    axis /= np.linalg.norm(axis)
    # choose the sign consistent with the (possibly tiny) sin(theta) part
    if np.dot(axis, v) < 0.0:
        axis = -axis
    return axis * theta


def so3_jr_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse of the SO(3) right Jacobian at ``phi``.

    Satisfies Log(Exp(phi) Exp(delta)) = phi + Jr_inv(phi) delta + O(|delta|^2).
    """
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + (1.0 / 12.0) * (K @ K)
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coef * (K @ K)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Rot3:
    """Rotation matrix wrapper; validates orthonormality and det = +1."""

    m: np.ndarray

    def __post_init__(self):
        m = _freeze(self.m)
        if m.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise GeometryError("rotation contains non-finite entries")
        err = np.abs(m.T @ m - np.eye(3)).max()
        if err > 1e-6:
            raise GeometryError(f"matrix is not orthonormal (|R^T R - I| = {err:.2e})")
        if abs(np.linalg.det(m) - 1.0) > 1e-6:
            raise GeometryError("matrix has det != +1 (reflection)")
        object.__setattr__(self, "m", m)

    @staticmethod
    def identity() -> "Rot3":
        return Rot3(np.eye(3))

    @staticmethod
    def from_rotvec(phi) -> "Rot3":
        return Rot3(so3_exp(np.asarray(phi, dtype=float)))

    @staticmethod
    def from_quat(qx: float, qy: float, qz: float, qw: float) -> "Rot3":
        """Quaternion (x, y, z, w) to rotation matrix; normalizes the input."""
        q = np.array([qx, qy, qz, qw], dtype=float)
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise GeometryError("zero-norm quaternion")
        x, y, z, w = q / n
        return Rot3(
            np.array(
                [
                    [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                    [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                    [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
                ]
            )
        )

    def as_quat(self) -> np.ndarray:
        """Rotation as quaternion (x, y, z, w), w >= 0."""
        m = self.m
        t = np.trace(m)
        if t > 0:
            s = np.sqrt(t + 1.0) * 2.0
            w = 0.25 * s
            x = (m[2, 1] - m[1, 2]) / s
            y = (m[0, 2] - m[2, 0]) / s
            z = (m[1, 0] - m[0, 1]) / s
        else:
            i = int(np.argmax(np.diag(m)))
            if i == 0:
                s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
                x, y, z, w = 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s
            elif i == 1:
                s = np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2.0
                x, y, z, w = (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s
            else:
                s = np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2.0
                x, y, z, w = (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s
        q = np.array([x, y, z, w])
        return q if w >= 0 else -q

    def log(self) -> np.ndarray:
        return so3_log(self.m)

    def inverse(self) -> "Rot3":
        return Rot3(self.m.T)

    def __matmul__(self, other: "Rot3") -> "Rot3":
        return Rot3(self.m @ other.m)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.m @ np.asarray(v, dtype=float)


@dataclass(frozen=True)
class Pose3:
    """Rigid-body transform (rotation + translation in meters)."""

    rot: Rot3
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = _freeze(self.trans)
        if t.shape != (3,):
            raise GeometryError(f"translation must be a 3-vector, got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation contains non-finite entries")
        object.__setattr__(self, "trans", t)

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(Rot3.identity(), np.zeros(3))

    @staticmethod
    def from_rt(rot_m: np.ndarray, trans) -> "Pose3":
        return Pose3(Rot3(rot_m), np.asarray(trans, dtype=float))

    def inverse(self) -> "Pose3":
        rt = self.rot.m.T
        return Pose3(Rot3(rt), -(rt @ self.trans))

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.rot.m @ np.asarray(point, dtype=float) + self.trans

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rot.m
        m[:3, 3] = self.trans
        return m


def compose(a: Pose3, b: Pose3) -> Pose3:
    """Group composition a * b."""
    return Pose3(Rot3(a.rot.m @ b.rot.m), a.rot.m @ b.trans + a.trans)


def inverse(a: Pose3) -> Pose3:
    return a.inverse()


def boxplus(b: Pose3, xi: np.ndarray) -> Pose3:
    """Right-perturb ``b`` by tangent vector ``xi`` = [rotvec, translation]."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (6,):
        raise GeometryError(f"tangent vector must have length 6, got {xi.shape}")
    return Pose3(Rot3(b.rot.m @ so3_exp(xi[:3])), b.trans + b.rot.m @ xi[3:])


def boxminus(a: Pose3, b: Pose3) -> np.ndarray:
    """Tangent-space relative pose: 6-vector xi with ``boxplus(b, xi) == a``."""
    rel_rot = b.rot.m.T @ a.rot.m
    rel_trans = b.rot.m.T @ (a.trans - b.trans)
    return np.concatenate([so3_log(rel_rot), rel_trans])


def chordal_residual(xi: Pose3, xj: Pose3, meas: Pose3, w_rot: float, w_tr: float) -> float:
    """Precision-weighted chordal distance of measurement ``meas`` from xi to xj.

    Returns ( w_rot |Rj - Ri Rm|_F^2 + w_tr |tj - ti - Ri tm|_2^2 )^(1/2).
    """
    if w_rot <= 0 or w_tr <= 0:
        raise GeometryError("weights must be positive")
    dr = xj.rot.m - xi.rot.m @ meas.rot.m
    dt = xj.trans - xi.trans - xi.rot.m @ meas.trans
    return float(np.sqrt(w_rot * np.sum(dr * dr) + w_tr * np.dot(dt, dt)))


def geodesic_residual(x: Pose3, meas: Pose3, cov: np.ndarray) -> float:
    """Mahalanobis norm of the tangent residual ``x (-) meas`` under ``cov``."""
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (6, 6):
        raise GeometryError(f"covariance must be 6x6, got {cov.shape}")
    if np.abs(cov - cov.T).max() > 1e-9:
        raise GeometryError("covariance must be symmetric")
    try:
        factor = scipy.linalg.cho_factor(cov)
    except scipy.linalg.LinAlgError as e:
        raise GeometryError("covariance must be positive definite") from e
    xi = boxminus(x, meas)
    return float(np.sqrt(xi @ scipy.linalg.cho_solve(factor, xi)))


def project_to_so3(m: np.ndarray) -> Rot3:
    """Nearest rotation in Frobenius norm (SVD with det-sign correction)."""
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise GeometryError("input must be a finite 3x3 matrix")
    u, s, vt = np.linalg.svd(m)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise GeometryError("matrix is rank deficient; projection is not unique")
    d = np.sign(np.linalg.det(u @ vt))
    # flip the column paired with the smallest singular value
    u = u.copy()
    u[:, 2] *= d
    return Rot3(u @ vt)


@dataclass(frozen=True)
class LiftedPose:
    """Rank-lifted pose: Stiefel rotation ``y_rot`` (r x 3, orthonormal
    columns) and translation ``y_trans`` in the lifted space (r,)."""

    y_rot: np.ndarray
    y_trans: np.ndarray

    def __post_init__(self):
        y = _freeze(self.y_rot)
        t = _freeze(self.y_trans)
        if y.ndim != 2 or y.shape[1] != 3 or y.shape[0] < 3:
            raise GeometryError(f"lifted rotation must be (r, 3) with r >= 3, got {y.shape}")
        if t.shape != (y.shape[0],):
            raise GeometryError("lifted translation rank mismatch")
        err = np.abs(y.T @ y - np.eye(3)).max()
        if err > 1e-6:
            raise GeometryError(f"lifted rotation columns not orthonormal ({err:.2e})")
        object.__setattr__(self, "y_rot", y)
        object.__setattr__(self, "y_trans", t)

    @property
    def rank(self) -> int:
        return self.y_rot.shape[0]

    @staticmethod
    def from_pose(pose: Pose3, rank: int) -> "LiftedPose":
        if rank < 3:
            raise GeometryError("rank must be >= 3")
        y = np.zeros((rank, 3))
        y[:3, :] = pose.rot.m
        t = np.zeros(rank)
        t[:3] = pose.trans
        return LiftedPose(y, t)
