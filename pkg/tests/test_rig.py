import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghsa.avatario.synthetic import default_camera, make_toy_rig
from ghsa.coremath import axis_angle_to_rot
from ghsa.errors import InvalidAsset
from ghsa.gaussmodel import GaussianSet, build_covariance
from ghsa.rig import (DeformNet, FrameParams, Posed, bone_transforms, bone_transforms_jacobian,
                      deform_gaussians, deform_net_eval, lbs, lbs_transform, nearest_vertex_exact,
                      pseudo_gt_lookup, softmax)

from helpers import mlp_oracle

RIG = make_toy_rig(0)


def frame(theta=None, psi=None):
    theta = np.zeros(RIG.n_pose * 3) if theta is None else theta
    psi = np.zeros(RIG.n_expr) if psi is None else psi
    return FrameParams(theta, psi, default_camera(), np.zeros((4, 2)))


def zeros_E_P():
    return np.zeros((RIG.n_expr, 3)), np.zeros((RIG.n_pose * 9, 3))


def test_zero_init_net_outputs():
    net = DeformNet(RIG, hidden=16, depth=2, rng=0, dtype=np.float64)
    E, P, w = deform_net_eval(net, np.array([0.1, 0.2, -0.3]))
    assert not E.any() and not P.any()
    np.testing.assert_array_equal(w, np.full(RIG.n_joints, 1 / RIG.n_joints))


def test_perturbed_net_against_matmul_oracle():
    rng = np.random.default_rng(0)
    net = DeformNet(RIG, hidden=16, depth=3, rng=1, dtype=np.float64)
    for W in net.mlp.weights:
        W += rng.normal(scale=0.2, size=W.shape)
    mu = rng.normal(size=(5, 3)) * 0.1
    E, P, w = deform_net_eval(net, mu)
    out = mlp_oracle(net.mlp, mu)
    a, b = RIG.n_expr * 3, RIG.n_expr * 3 + RIG.n_pose * 27
    np.testing.assert_allclose(E.reshape(5, -1), out[:, :a], atol=1e-6)
    np.testing.assert_allclose(P.reshape(5, -1), out[:, a:b], atol=1e-6)
    logits = out[:, b:]
    ref = np.exp(logits - logits.max(1, keepdims=True))
    np.testing.assert_allclose(w, ref / ref.sum(1, keepdims=True), atol=1e-6)


def test_net_is_deterministic():
    net = DeformNet(RIG, hidden=16, depth=2, rng=3)
    mu = np.array([[0.01, 0.02, 0.03], [0.01, 0.02, 0.03]], np.float32)
    E, P, w = net(mu)
    np.testing.assert_array_equal(w[0], w[1])
    np.testing.assert_array_equal(E[0], E[1])


def test_static_bone_stays_put():
    rng = np.random.default_rng(1)
    fr = frame(rng.normal(size=RIG.n_pose * 3), rng.normal(size=RIG.n_expr))
    W = np.zeros(RIG.n_joints)
    W[RIG.static_bone] = 1
    R, T = lbs_transform(RIG, fr, [0.1, -0.3, 0.0], *zeros_E_P(), W)
    np.testing.assert_array_equal(R, np.eye(3))
    np.testing.assert_array_equal(T, 0)


def test_single_bone_rotation_about_joint():
    rng = np.random.default_rng(2)
    aa = rng.normal(size=3) * 0.4
    theta = np.zeros(RIG.n_pose * 3)
    theta[:3] = aa  # first posed joint is the neck, a root
    j = RIG.rest_joints[RIG.pose_joints[0]]
    W = np.zeros(RIG.n_joints)
    W[RIG.pose_joints[0]] = 1
    mu = rng.normal(size=3) * 0.1
    R, T = lbs_transform(RIG, frame(theta), mu, *zeros_E_P(), W)
    Rj = axis_angle_to_rot(aa)
    np.testing.assert_allclose(R @ mu + T, Rj @ (mu - j) + j, atol=1e-14)


def test_blend_of_two_translations():
    t1, t2 = np.array([0.1, 0.0, -0.2]), np.array([0.3, 0.4, 0.0])
    G = np.zeros((2, 3, 4))
    G[:, :, :3] = np.eye(3)
    G[0, :, 3], G[1, :, 3] = t1, t2
    posed = Posed(G, np.zeros(0), np.zeros(0))
    R, T, _, _ = lbs(posed, np.zeros((1, 3)), np.zeros((1, 0, 3)), np.zeros((1, 0, 3)),
                     np.array([[0.5, 0.5]]))
    np.testing.assert_allclose(R[0], np.eye(3))
    np.testing.assert_allclose(T[0], (t1 + t2) / 2)


def test_child_inherits_parent_rotation():
    theta = np.zeros(RIG.n_pose * 3)
    theta[:3] = [0, 0, 0.5]
    G, _, joints = bone_transforms(RIG, theta, np.zeros(RIG.n_expr))
    # head is a child of the neck and has no own rotation here
    np.testing.assert_allclose(G[2], G[1], atol=1e-15)


def test_bone_jacobian_complex_step_matches_differences():
    rng = np.random.default_rng(3)
    theta, psi = rng.normal(size=RIG.n_pose * 3) * 0.3, rng.normal(size=RIG.n_expr)
    dG_t, _, dG_p, _ = bone_transforms_jacobian(RIG, theta, psi)
    h = 1e-6
    for i in (0, 4, 8):
        e = np.zeros_like(theta)
        e[i] = h
        fd = (bone_transforms(RIG, theta + e, psi)[0] - bone_transforms(RIG, theta - e, psi)[0]) / (2 * h)
        np.testing.assert_allclose(dG_t[..., i], fd, atol=1e-8)
    e = np.zeros_like(psi)
    e[2] = h
    fd = (bone_transforms(RIG, theta, psi + e)[0] - bone_transforms(RIG, theta, psi - e)[0]) / (2 * h)
    np.testing.assert_allclose(dG_p[..., 2], fd, atol=1e-8)


def gaussians(rng, n):
    return GaussianSet(rng.normal(size=(n, 3)) * 0.1, rng.uniform(0.005, 0.03, (n, 3)),
                       rng.normal(size=(n, 4)), rng.uniform(0.1, 1, n), np.zeros((n, 16, 3)))


def test_identity_frame_leaves_gaussians_unchanged():
    rng = np.random.default_rng(4)
    g = gaussians(rng, 10)
    net = DeformNet(RIG, hidden=8, depth=2, rng=0, dtype=np.float64)
    d = deform_gaussians(g, RIG, frame(), net)
    np.testing.assert_allclose(d.mu, g.mu, atol=1e-15)
    np.testing.assert_allclose(d.cov, build_covariance(g.scale, g.quat), atol=1e-15)


def test_global_rotation_preserves_covariance_spectrum():
    rng = np.random.default_rng(5)
    g = gaussians(rng, 10)
    net = DeformNet(RIG, hidden=8, depth=2, rng=0, dtype=np.float64)
    net.mlp.weights[-1][:, -RIG.n_joints:] = 0
    net.mlp.biases[-1][-RIG.n_joints:] = [0, 50, 0, 0]  # everything on the neck bone
    theta = np.zeros(RIG.n_pose * 3)
    theta[:3] = [0.2, -0.5, 0.3]
    d = deform_gaussians(g, RIG, frame(theta), net)
    ev0 = np.linalg.eigvalsh(build_covariance(g.scale, g.quat))
    np.testing.assert_allclose(np.linalg.eigvalsh(d.cov), ev0, rtol=1e-9, atol=1e-15)


def test_random_frame_covariance_is_conjugated():
    rng = np.random.default_rng(6)
    g = gaussians(rng, 8)
    net = DeformNet(RIG, hidden=8, depth=2, rng=0, dtype=np.float64)
    for W in net.mlp.weights:
        W += rng.normal(scale=0.3, size=W.shape)
    fr = frame(rng.normal(size=RIG.n_pose * 3) * 0.3, rng.normal(size=RIG.n_expr))
    d = deform_gaussians(g, RIG, fr, net)
    for i in range(len(g)):
        E, P, w = deform_net_eval(net, g.mu[i])
        R, T = lbs_transform(RIG, fr, g.mu[i], E, P, w)
        S = build_covariance(g.scale[i], g.quat[i])
        np.testing.assert_allclose(d.cov[i], R @ S @ R.T, atol=1e-14)
        np.testing.assert_allclose(d.mu[i], R @ g.mu[i] + T, atol=1e-14)


def test_lookup_at_vertex():
    E, P, W = pseudo_gt_lookup(RIG, RIG.ref_verts[17])
    np.testing.assert_array_equal(W, RIG.ref_weights[17])
    np.testing.assert_array_equal(E, RIG.ref_expr[17])


def test_lookup_tie_goes_to_lowest_index():
    verts = np.array([[0.0, 0, 0], [2.0, 0, 0], [5.0, 0, 0]])
    assert nearest_vertex_exact(verts, [[1.0, 0, 0]])[0] == 0
    assert nearest_vertex_exact(verts[::-1], [[1.0, 0, 0]])[0] == 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_lookup_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 3)) * 0.2
    idx = nearest_vertex_exact(RIG.ref_verts, pts)
    for p, i in zip(pts, idx):
        d = [np.sum((p - v) ** 2) for v in RIG.ref_verts]
        assert i == int(np.argmin(d))


def test_lookup_empty_mesh():
    with pytest.raises(InvalidAsset):
        nearest_vertex_exact(np.zeros((0, 3)), np.zeros((1, 3)))


def test_softmax_rows_sum_to_one():
    w = softmax(np.random.default_rng(7).normal(size=(6, 4)) * 30)
    np.testing.assert_allclose(w.sum(1), 1, atol=1e-15)
