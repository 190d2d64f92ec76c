import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghsa.anchors import (MIN_OPACITY, MIN_SCALE, AnchorSet, clamp_anchor_params,
                          clamp_anchor_params_, frustum_cleanup, init_anchors)
from ghsa.avatario.synthetic import default_camera, make_toy_rig
from ghsa.errors import InsufficientAnchors
from ghsa.gaussmodel import GaussianSet
from ghsa.rig import DeformNet, FrameParams

RIG = make_toy_rig(0)
NET = DeformNet(RIG, hidden=8, depth=2, rng=0, dtype=np.float64)
CAM = default_camera()
REST = FrameParams(np.zeros(RIG.n_pose * 3), np.zeros(RIG.n_expr), CAM, np.zeros((4, 2)))


def grid_gaussians(n_side=64):
    xs = np.linspace(-0.2, 0.2, n_side)
    X, Y = np.meshgrid(xs, xs - 0.05)
    mu = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], 1)
    n = len(mu)
    return GaussianSet(mu, np.full((n, 3), 0.004), np.tile([1.0, 0, 0, 0], (n, 1)),
                       np.full(n, 0.3), np.zeros((n, 16, 3)))


def test_all_inside_head_mask():
    g = grid_gaussians(8)
    with pytest.raises(InsufficientAnchors):
        init_anchors(g, REST, np.ones((128, 128)), RIG, NET, 50, n_anchors=4)


def test_fallback_shrinks_count():
    g = grid_gaussians(4)
    with pytest.warns(UserWarning):
        anc, sel = init_anchors(g, REST, np.zeros((128, 128)), RIG, NET, 50, n_anchors=100,
                                fallback=True)
    assert len(anc) == 16


def min_pairwise(p):
    d = np.sum((p[:, None] - p[None]) ** 2, -1)
    np.fill_diagonal(d, np.inf)
    return np.sqrt(d.min())


def test_fps_spread_beats_random_subsets():
    g = grid_gaussians(64)
    anc, sel = init_anchors(g, REST, np.zeros((128, 128)), RIG, NET, 50, n_anchors=1024)
    assert len(np.unique(sel)) == 1024
    rng = np.random.default_rng(0)
    best_random = max(min_pairwise(g.mu[rng.choice(len(g), 1024, replace=False)])
                      for _ in range(100))
    assert min_pairwise(anc.mu) >= best_random


def test_target_is_projection_plus_padding():
    g = GaussianSet(np.array([[0.1, -0.1, 0.0]]), np.full((1, 3), 0.01),
                    np.array([[1.0, 0, 0, 0]]), np.array([0.01]), np.zeros((1, 16, 3)))
    anc, _ = init_anchors(g, REST, None, RIG, NET, 50, n_anchors=1)
    # x_c = (0.1, 0.05, 0.8), f = 200, c = 63.5
    np.testing.assert_allclose(anc.target_uv[0], [88.5 + 50, 76.0 + 50], atol=1e-12)
    assert anc.opacity[0] == MIN_OPACITY


def test_seed_is_lowest_point_in_image():
    g = grid_gaussians(8)
    anc, sel = init_anchors(g, REST, np.zeros((128, 128)), RIG, NET, 50, n_anchors=3)
    assert g.mu[sel[0], 1] == g.mu[:, 1].min()


def test_clamp_examples():
    a = AnchorSet(np.zeros((3, 3)), np.array([1e-6, 0.5, 1e-4]), np.zeros((3, 3)),
                  np.array([0.01, 0.7, 0.05]), np.zeros((3, 2)))
    c = clamp_anchor_params(a)
    np.testing.assert_array_equal(c.opacity, [0.05, 0.7, 0.05])
    np.testing.assert_array_equal(c.scale, [1e-4, 0.5, 1e-4])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_clamp_is_idempotent_floor(seed):
    rng = np.random.default_rng(seed)
    n = 10
    a = AnchorSet(np.zeros((n, 3)), 10.0 ** rng.uniform(-7, 0, n), np.zeros((n, 3)),
                  rng.uniform(-0.5, 1.5, n), np.zeros((n, 2)))
    c = clamp_anchor_params(a)
    assert np.all(c.opacity >= MIN_OPACITY) and np.all(c.scale >= MIN_SCALE)
    c2 = clamp_anchor_params(c)
    np.testing.assert_array_equal(c2.opacity, c.opacity)
    clamp_anchor_params_(a)
    np.testing.assert_array_equal(a.opacity, c.opacity)


def anchors_at(mu):
    n = len(mu)
    return AnchorSet(np.asarray(mu, float), np.full(n, 0.01), np.zeros((n, 3)), np.full(n, 0.5),
                     np.zeros((n, 2)))


def test_cleanup_keeps_visible():
    a = anchors_at(grid_gaussians(5).mu)
    out, keep = frustum_cleanup(a, REST, RIG, NET)
    assert keep.all() and len(out) == 25


def test_cleanup_drops_behind_camera():
    a = anchors_at([[0.0, 0.0, 0.0], [0.0, 0.0, 1.5]])
    out, keep = frustum_cleanup(a, REST, RIG, NET)
    assert keep.tolist() == [True, False]


def test_cleanup_matches_rectangle_test():
    rng = np.random.default_rng(1)
    mu = np.stack([rng.uniform(-0.6, 0.6, 200), rng.uniform(-0.6, 0.6, 200),
                   rng.uniform(-0.5, 1.2, 200)], 1)
    _, keep = frustum_cleanup(anchors_at(mu), REST, RIG, NET)
    pc = mu @ CAM.R.T + CAM.t
    px = CAM.fx * pc[:, 0] / pc[:, 2] + CAM.cx
    py = CAM.fy * pc[:, 1] / pc[:, 2] + CAM.cy
    ref = (pc[:, 2] > 0.01) & (px >= 0) & (px <= 127) & (py >= 0) & (py <= 127)
    np.testing.assert_array_equal(keep, ref)
    assert 0 < ref.sum() < 200
