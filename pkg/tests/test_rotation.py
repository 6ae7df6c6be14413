"""Quaternion helpers vs scipy's rotations and finite differences."""

import numpy as np
from scipy.spatial.transform import Rotation

from recx import rotation as rot
from recx.diffarray import finite_difference_gradient


def _random_quats(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 4)) * 2.0


def test_quat_to_matrix_matches_scipy():
    for q in _random_quats(20, seed=1):
        r = rot.quat_to_matrix(q)
        # scipy uses (x, y, z, w) ordering
        r_ref = Rotation.from_quat(np.r_[q[1:], q[0]]).as_matrix()
        np.testing.assert_allclose(r, r_ref, atol=1e-12)


def test_matrix_round_trip():
    for q in _random_quats(20, seed=2):
        r = rot.quat_to_matrix(q)
        q2 = rot.matrix_to_quat(r)
        np.testing.assert_allclose(rot.quat_to_matrix(q2), r, atol=1e-10)


def test_matrix_jacobian_matches_finite_differences():
    for q in _random_quats(5, seed=3):
        _, jac = rot.quat_to_matrix_jacobian(q)
        for a in range(3):
            for b in range(3):
                num = finite_difference_gradient(
                    lambda v: rot.quat_to_matrix(v)[a, b], q.copy())
                np.testing.assert_allclose(jac[a, b], num, atol=1e-8)


def test_slerp_endpoints_and_midpoint():
    q0, q1 = rot.quat_normalize(_random_quats(2, seed=4))
    np.testing.assert_allclose(rot.quat_slerp(q0, q1, 0.0), q0, atol=1e-12)
    mid = rot.quat_slerp(q0, q1, 0.5)
    a0 = rot.quat_angle(q0, mid)
    a1 = rot.quat_angle(mid, q1)
    np.testing.assert_allclose(a0, a1, atol=1e-9)


def test_look_at_geometry():
    eye = np.array([1.5, 0.8, -2.0])
    target = np.array([0.1, -0.2, 0.3])
    r, t = rot.look_at(eye, target)
    np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-12)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    # target lands on the optical axis, camera center maps to origin
    pc = r @ target + t
    np.testing.assert_allclose(pc[:2], 0.0, atol=1e-12)
    assert pc[2] > 0
    np.testing.assert_allclose(r @ eye + t, 0.0, atol=1e-12)
