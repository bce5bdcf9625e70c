import math
import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from conftest import random_pose
from ivba.geometry import (
    BranchCutWarning,
    CameraIntrinsics,
    Landmark,
    Pose,
    ProjectionError,
    StereoObservation,
    exp_map,
    hat,
    log_map,
    project_stereo,
    project_to_so3,
    reprojection_error,
    reprojection_jacobians,
    se3_exp_batch,
    so3_exp,
    triangulate_stereo,
)


def twist_matrix(xi):
    T = np.zeros((4, 4))
    T[:3, :3] = hat(xi[3:])
    T[:3, 3] = xi[:3]
    return T


finite = st.floats(-3.0, 3.0, allow_nan=False)
twists = arrays(np.float64, 6, elements=finite).filter(lambda x: np.linalg.norm(x[3:]) < math.pi - 0.1)


# -- exp / log --------------------------------------------------------------------


def test_exp_zero_is_identity():
    assert exp_map(np.zeros(6)).allclose(Pose.identity(), 0.0)


def test_exp_pure_translation():
    P = exp_map([1, 0, 0, 0, 0, 0])
    np.testing.assert_array_equal(P.t, [1, 0, 0])
    np.testing.assert_array_equal(P.R, np.eye(3))


def test_log_identity_and_translation():
    np.testing.assert_array_equal(log_map(Pose.identity()), np.zeros(6))
    np.testing.assert_allclose(log_map(Pose(np.eye(3), [0, 2, 0])), [0, 2, 0, 0, 0, 0], atol=0)


def test_roundtrip_quarter_turn():
    xi = np.array([0, 0, 0, 0, 0, math.pi / 2])
    np.testing.assert_allclose(log_map(exp_map(xi)), xi, atol=1e-9)


def test_roundtrip_1000_random_poses_at_half_radian(rng):
    for _ in range(1000):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        xi = np.r_[rng.normal(0, 2, 3), 0.5 * axis]
        P = exp_map(xi)
        Q = exp_map(log_map(P))
        assert P.allclose(Q, 1e-9)


@given(twists)
def test_exp_matches_matrix_exponential(xi):
    T = scipy.linalg.expm(twist_matrix(xi))
    np.testing.assert_allclose(exp_map(xi).matrix(), T, atol=1e-9)


@given(twists)
def test_log_exp_roundtrip(xi):
    np.testing.assert_allclose(log_map(exp_map(xi)), xi, atol=1e-9)


@given(arrays(np.float64, 3, elements=finite))
def test_so3_exp_matches_scipy(phi):
    np.testing.assert_allclose(so3_exp(phi), Rotation.from_rotvec(phi).as_matrix(), atol=1e-12)


@given(arrays(np.float64, 6, elements=finite))
def test_rotation_is_orthonormal(xi):
    R = exp_map(xi).R
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


@given(arrays(np.float64, 6, elements=finite))
def test_compose_inverse_is_identity(xi):
    P = exp_map(xi)
    assert (P @ P.inverse()).allclose(Pose.identity(), 1e-9)
    assert (P.inverse() @ P).allclose(Pose.identity(), 1e-9)


def test_batch_exp_matches_scalar(rng):
    xi = rng.normal(0, 1, (50, 6))
    xi[:5, 3:] *= 1e-7  # small-angle branch
    R, t = se3_exp_batch(xi)
    for k in range(50):
        P = exp_map(xi[k])
        np.testing.assert_allclose(R[k], P.R, atol=1e-12)
        np.testing.assert_allclose(t[k], P.t, atol=1e-12)


def test_log_near_pi_warns():
    P = Pose(so3_exp(np.array([0.0, 0.0, math.pi])), np.zeros(3))
    with pytest.warns(BranchCutWarning):
        xi = log_map(P)
    assert abs(np.linalg.norm(xi[3:]) - math.pi) < 1e-9


def test_log_just_below_branch_cut_is_accurate():
    phi = np.array([0.0, 1.0, 0.0]) * (math.pi - 1e-4)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        np.testing.assert_allclose(log_map(Pose(so3_exp(phi))), np.r_[0, 0, 0, phi], atol=1e-8)


@given(arrays(np.float64, 7, elements=finite).filter(lambda a: np.linalg.norm(a[3:]) > 0.1))
def test_tq_roundtrip_is_exact(a):
    tq = list(a[:3]) + list(a[3:] / np.linalg.norm(a[3:]))
    assert Pose.from_tq(tq).to_tq() == [float(x) for x in tq]
    P = Pose.from_tq(tq)
    assert Pose.from_tq(Pose(P.R, P.t).to_tq()).allclose(P, 1e-12)


def test_project_to_so3_recovers_rotation(rng):
    R = exp_map(rng.normal(size=6)).R
    np.testing.assert_allclose(project_to_so3(R + 1e-6 * rng.normal(size=(3, 3))), R, atol=1e-5)
    assert abs(np.linalg.det(project_to_so3(rng.normal(size=(3, 3)))) - 1) < 1e-12


# -- projection -------------------------------------------------------------


def test_project_on_axis(intr):
    np.testing.assert_allclose(project_stereo(Pose.identity(), intr, [0, 0, 1]), [320, 240, 310])


def test_project_off_axis(intr):
    np.testing.assert_allclose(project_stereo(Pose.identity(), intr, [0.5, 0, 1]), [370, 240, 360])


def test_project_behind_camera(intr):
    with pytest.raises(ProjectionError):
        project_stereo(Pose.identity(), intr, [0, 0, -1])
    with pytest.raises(ProjectionError):
        project_stereo(Pose.identity(), intr, [0, 0, 5e-4])


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0, 0, 0.1, 10, 10)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 0, 0, 0.0, 10, 10)


def _visible_case(rng, intr):
    cw = random_pose(rng, 0.5, 0.3)
    pc = np.r_[rng.uniform(-2, 2, 2), rng.uniform(2, 10)]
    return cw, cw.inverse().apply(pc)


def test_reprojection_error_noiseless_and_offset(rng, intr):
    cw, p = _visible_case(rng, intr)
    z = project_stereo(cw, intr, p)
    lm = Landmark(3, p)
    obs = StereoObservation(0, 3, *z)
    np.testing.assert_allclose(reprojection_error(obs, cw, intr, lm), 0.0, atol=1e-9)
    obs2 = StereoObservation(0, 3, z[0] + 1, z[1], z[2])
    np.testing.assert_allclose(reprojection_error(obs2, cw, intr, lm), [1, 0, 0], atol=1e-9)


def test_reprojection_error_matches_pinhole_oracle(rng, intr):
    for _ in range(100):
        cw, p = _visible_case(rng, intr)
        z = rng.uniform(0, 640, 3)
        pc = cw.R @ p + cw.t
        expect = z - np.array([
            intr.fx * pc[0] / pc[2] + intr.cx,
            intr.fy * pc[1] / pc[2] + intr.cy,
            intr.fx * (pc[0] - intr.baseline) / pc[2] + intr.cx,
        ])
        got = reprojection_error(StereoObservation(0, 0, *z), cw, intr, Landmark(0, p))
        np.testing.assert_allclose(got, expect, atol=1e-9)


def test_gauge_invariance(rng, intr):
    for _ in range(200):
        cw, p = _visible_case(rng, intr)
        G = random_pose(rng, 3.0, 1.0)
        obs = StereoObservation(0, 0, *rng.uniform(0, 640, 3))
        e1 = reprojection_error(obs, cw, intr, Landmark(0, p))
        e2 = reprojection_error(obs, cw @ G.inverse(), intr, Landmark(0, G.apply(p)))
        np.testing.assert_allclose(e1, e2, atol=1e-9)


def fd_jacobian_errors(rng, intr, n=1000, h=1e-6):
    """Worst relative error of the analytic Jacobians against central
    differences over ``n`` random visible configurations."""
    worst = 0.0
    for _ in range(n):
        cw, p = _visible_case(rng, intr)
        obs = StereoObservation(0, 0, *rng.uniform(0, 640, 3))
        lm = Landmark(0, p)
        Jx, Jl = reprojection_jacobians(cw, intr, p)
        num_x = np.zeros((3, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            ep = reprojection_error(obs, exp_map(d) @ cw, intr, lm)
            em = reprojection_error(obs, exp_map(-d) @ cw, intr, lm)
            num_x[:, k] = (ep - em) / (2 * h)
        num_l = np.zeros((3, 3))
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            num_l[:, k] = (reprojection_error(obs, cw, intr, Landmark(0, p + d))
                           - reprojection_error(obs, cw, intr, Landmark(0, p - d))) / (2 * h)
        for A, N in ((Jx, num_x), (Jl, num_l)):
            worst = max(worst, np.linalg.norm(A - N) / max(np.linalg.norm(N), 1e-12))
    return worst


def test_jacobians_match_finite_differences(rng, intr):
    assert fd_jacobian_errors(rng, intr, 200) < 1e-4


def test_triangulation_inverts_projection(rng, intr):
    for _ in range(50):
        pc = np.r_[rng.uniform(-2, 2, 2), rng.uniform(1, 10)]
        z = project_stereo(Pose.identity(), intr, pc)
        np.testing.assert_allclose(triangulate_stereo(z, intr), pc, atol=1e-9)
    assert triangulate_stereo(np.array([300.0, 200.0, 300.0]), intr) is None
