import numpy as np
import pytest
from scipy.spatial.transform import Rotation as ScipyRotation

from mrpgo.geometry import (
    GeometryError,
    LiftedPose,
    Pose3,
    Rot3,
    boxminus,
    boxplus,
    chordal_residual,
    compose,
    geodesic_residual,
    project_to_so3,
    so3_exp,
    so3_jr_inv,
    so3_log,
)

from conftest import random_pose, rz


class TestCompose:
    def test_identity(self):
        e = Pose3.identity()
        out = compose(e, e)
        assert np.allclose(out.rot.m, np.eye(3))
        assert np.allclose(out.trans, 0)

    def test_inverse_roundtrip(self, rng):
        for _ in range(20):
            a = random_pose(rng)
            out = compose(a, a.inverse())
            assert np.allclose(out.rot.m, np.eye(3), atol=1e-12)
            assert np.allclose(out.trans, 0, atol=1e-12)

    def test_hand_computed(self):
        # (Rz(90deg), [1,0,0]) * (I, [1,0,0]): rotated [1,0,0] lands on [0,1,0]
        a = Pose3(rz(np.pi / 2), np.array([1.0, 0.0, 0.0]))
        b = Pose3(Rot3.identity(), np.array([1.0, 0.0, 0.0]))
        out = compose(a, b)
        assert np.allclose(out.rot.m, rz(np.pi / 2).m, atol=1e-12)
        assert np.allclose(out.trans, [1.0, 1.0, 0.0], atol=1e-12)

    def test_associativity(self, rng):
        for _ in range(30):
            a, b, c = (random_pose(rng) for _ in range(3))
            left = compose(compose(a, b), c)
            right = compose(a, compose(b, c))
            assert np.abs(left.rot.m - right.rot.m).max() < 1e-12
            assert np.abs(left.trans - right.trans).max() < 1e-12


class TestBoxOps:
    def test_zero_at_same_pose(self, rng):
        x = random_pose(rng)
        assert np.allclose(boxminus(x, x), np.zeros(6), atol=1e-12)

    def test_pure_translation(self):
        a = Pose3(Rot3.identity(), np.array([1.0, 0.0, 0.0]))
        xi = boxminus(a, Pose3.identity())
        assert np.allclose(xi, [0, 0, 0, 1, 0, 0], atol=1e-12)

    def test_pure_rotation_about_z(self):
        theta = 0.3
        a = Pose3(rz(theta), np.zeros(3))
        xi = boxminus(a, Pose3.identity())
        assert np.allclose(xi, [0, 0, theta, 0, 0, 0], atol=1e-12)

    def test_roundtrip(self, rng):
        for _ in range(200):
            a = random_pose(rng)
            b = random_pose(rng)
            back = boxplus(b, boxminus(a, b))
            assert np.abs(back.rot.m - a.rot.m).max() < 1e-9
            assert np.abs(back.trans - a.trans).max() < 1e-9


class TestSo3Maps:
    def test_log_matches_scipy(self, rng):
        # cross-check our hand-rolled log against an independent implementation
        for _ in range(100):
            phi = rng.normal(0, 1.0, 3)
            if np.linalg.norm(phi) > np.pi - 0.05:
                continue
            R = so3_exp(phi)
            ours = so3_log(R)
            theirs = ScipyRotation.from_matrix(R).as_rotvec()
            assert np.allclose(ours, theirs, atol=1e-9)

    def test_log_near_pi(self):
        for axis in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([1.0, 1.0, 0]) / np.sqrt(2)):
            phi = axis * (np.pi - 1e-6)
            back = so3_log(so3_exp(phi))
            assert np.allclose(back, phi, atol=1e-5)

    def test_jr_inv_first_order(self, rng):
        for _ in range(20):
            phi = rng.normal(0, 0.8, 3)
            delta = rng.normal(0, 1e-6, 3)
            lhs = so3_log(so3_exp(phi) @ so3_exp(delta))
            rhs = phi + so3_jr_inv(phi) @ delta
            assert np.allclose(lhs, rhs, atol=1e-10)


class TestChordalResidual:
    def test_exact_measurement_zero(self, rng):
        xi = random_pose(rng)
        meas = random_pose(rng)
        xj = compose(xi, meas)
        assert chordal_residual(xi, xj, meas, 2.0, 3.0) < 1e-12
        assert chordal_residual(Pose3.identity(), Pose3.identity(), Pose3.identity(), 1.0, 1.0) == 0.0

    def test_unit_translation(self):
        xj = Pose3(Rot3.identity(), np.array([1.0, 0, 0]))
        r = chordal_residual(Pose3.identity(), xj, Pose3.identity(), 1.0, 1.0)
        assert abs(r - 1.0) < 1e-12

    def test_gauge_invariance(self, rng):
        for _ in range(30):
            xi, xj, meas, g = (random_pose(rng) for _ in range(4))
            r1 = chordal_residual(xi, xj, meas, 1.7, 0.4)
            r2 = chordal_residual(compose(g, xi), compose(g, xj), meas, 1.7, 0.4)
            assert abs(r1 - r2) < 1e-9

    def test_rejects_bad_weights(self):
        e = Pose3.identity()
        with pytest.raises(GeometryError):
            chordal_residual(e, e, e, 0.0, 1.0)


class TestGeodesicResidual:
    COV = np.diag([0.1**2] * 3 + [0.5**2] * 3)

    def test_zero_at_measurement(self, rng):
        x = random_pose(rng)
        assert geodesic_residual(x, x, self.COV) < 1e-12

    def test_translation_offset(self):
        x = Pose3(Rot3.identity(), np.array([1.0, 0, 0]))
        r = geodesic_residual(x, Pose3.identity(), self.COV)
        assert abs(r - 2.0) < 1e-12  # 1 m / 0.5 m

    def test_rotation_offset(self):
        x = Pose3(rz(0.1), np.zeros(3))
        r = geodesic_residual(x, Pose3.identity(), self.COV)
        assert abs(r - 1.0) < 1e-12  # 0.1 rad / 0.1 rad

    def test_non_spd_rejected(self):
        bad = np.diag([1.0, 1, 1, 1, 1, -1e-3])
        with pytest.raises(GeometryError):
            geodesic_residual(Pose3.identity(), Pose3.identity(), bad)


class TestProjectToSo3:
    def test_rotation_fixed_point(self, rng):
        R = random_pose(rng).rot
        out = project_to_so3(R.m)
        assert np.abs(out.m - R.m).max() < 1e-12

    def test_scale_invariance(self, rng):
        R = random_pose(rng).rot
        out = project_to_so3(1.7 * R.m)
        assert np.abs(out.m - R.m).max() < 1e-12

    def test_small_perturbation(self, rng):
        for _ in range(20):
            R = random_pose(rng).rot
            noisy = R.m + 1e-3 * rng.normal(size=(3, 3))
            out = project_to_so3(noisy)
            assert np.abs(out.m - R.m).max() < 2e-3

    def test_output_invariants(self, rng):
        for _ in range(50):
            m = rng.normal(size=(3, 3))
            out = project_to_so3(m)
            assert np.abs(out.m.T @ out.m - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(out.m) - 1.0) < 1e-9

    def test_reflection_corrected(self, rng):
        R = random_pose(rng).rot.m.copy()
        R[:, 0] *= -1  # det = -1
        out = project_to_so3(R)
        assert abs(np.linalg.det(out.m) - 1.0) < 1e-9

    def test_rank_deficient_rejected(self):
        m = np.outer([1.0, 0, 0], [1.0, 0, 0])
        with pytest.raises(GeometryError):
            project_to_so3(m)


class TestQuaternions:
    def test_roundtrip(self, rng):
        for _ in range(50):
            R = random_pose(rng).rot
            q = R.as_quat()
            back = Rot3.from_quat(*q)
            assert np.abs(back.m - R.m).max() < 1e-12


class TestLiftedPose:
    def test_lift_at_rank3_is_rotation(self, rng):
        p = random_pose(rng)
        lp = LiftedPose.from_pose(p, 3)
        assert np.allclose(lp.y_rot, p.rot.m)
        assert np.allclose(lp.y_trans, p.trans)

    def test_padding_orthonormal(self, rng):
        p = random_pose(rng)
        lp = LiftedPose.from_pose(p, 5)
        assert lp.rank == 5
        assert np.abs(lp.y_rot.T @ lp.y_rot - np.eye(3)).max() < 1e-12
        assert np.allclose(lp.y_trans[3:], 0)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(GeometryError):
            LiftedPose(np.ones((5, 3)), np.zeros(5))


class TestValidation:
    def test_rot3_rejects_non_orthonormal(self):
        with pytest.raises(GeometryError):
            Rot3(np.eye(3) * 1.5)

    def test_rot3_rejects_reflection(self):
        m = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(GeometryError):
            Rot3(m)

    def test_pose3_rejects_bad_translation(self):
        with pytest.raises(GeometryError):
            Pose3(Rot3.identity(), np.array([1.0, 2.0]))
