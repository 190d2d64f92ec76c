import numpy as np
import pytest

from ghsa import nn
from ghsa.anchors import AnchorSet, project_canonical
from ghsa.avatario.synthetic import PLATE_Z, init_gaussians
from ghsa.coremath import apply_homography, bilinear_sample
from ghsa.errors import DegenerateConfiguration, InsufficientAnchors
from ghsa.fastpath import (BakedAvatar, FastRenderer, bake, bake_texture, euclidean_align,
                           homography_anisotropy, ransac_filter, ransac_homography,
                           refresh_correspondences, render_fast, texture_mask)
from ghsa.gaussmodel import GaussianSet
from ghsa.model import Avatar, render
from ghsa.neuraltex import frame_encoding

from helpers import SMALL, mlp_oracle, small_scene

PAD = SMALL["padding"]


@pytest.fixture(scope="module")
def scene():
    return small_scene(n_frames=12)


def plate_points(n, seed=0):
    rng = np.random.default_rng(seed)
    return np.stack([rng.uniform(-0.2, 0.2, n), rng.uniform(-0.25, -0.12, n),
                     np.full(n, PLATE_Z)], 1)


def neck_only(rig, n):
    """Cached deformation that moves points rigidly with the neck bone."""
    W = np.zeros((n, rig.n_joints))
    W[:, 1] = 1
    return np.zeros((n, rig.n_expr, 3)), np.zeros((n, rig.n_pose * 9, 3)), W


def canonical_targets(rig, frame, mu):
    from ghsa.fastpath import project_cached
    pix, _, _, _ = project_cached(rig, frame, mu, *neck_only(rig, len(mu)))
    return pix + PAD


def anchor_set(mu, target):
    n = len(mu)
    return AnchorSet(mu, np.full(n, 0.01), np.zeros((n, 3)), np.full(n, 0.5), target)


def small_avatar(scene, seed=0):
    return Avatar.create(scene.rig, init_gaussians(scene.rig, seed=seed), 32, 32, padding=PAD,
                         latent_dim=SMALL["latent_dim"], hidden=8, tex_hidden=8, depth=2,
                         seed=seed, dtype=np.float64)


# -- texture baking -------------------------------------------------------------

def test_zero_fine_net_bakes_coarse_texture(scene):
    av = small_avatar(scene)
    rng = np.random.default_rng(0)
    av.tex.coarse[:] = rng.random(av.tex.coarse.shape)
    mask = np.ones(av.tex.coarse.shape[:2])
    mask[:3] = 0
    flat = bake_texture(av.tex, av.fnet, av.frame_encoding(scene.frames[0]), mask)
    np.testing.assert_array_equal(flat[3:], av.tex.coarse[3:])
    np.testing.assert_array_equal(flat[:3], 1.0)


def test_full_foreground_mask_whitens_nothing(scene):
    av = small_avatar(scene)
    av.tex.coarse[:] = 0.25
    flat = bake_texture(av.tex, av.fnet, av.frame_encoding(scene.frames[0]),
                        np.ones(av.tex.coarse.shape[:2]))
    assert np.all(flat == 0.25)


def test_missing_mask_warns(scene):
    av = small_avatar(scene)
    with pytest.warns(UserWarning):
        bake_texture(av.tex, av.fnet, av.frame_encoding(scene.frames[0]))


def test_random_fine_net_per_texel(scene):
    av = small_avatar(scene)
    rng = np.random.default_rng(1)
    for W in av.fnet.mlp.weights:
        W += rng.normal(scale=0.4, size=W.shape)
    av.tex.coarse[:] = rng.random(av.tex.coarse.shape)
    fenc = av.frame_encoding(scene.frames[0])
    flat = bake_texture(av.tex, av.fnet, fenc, np.ones(av.tex.coarse.shape[:2]))
    for y, x in [(0, 0), (5, 17), (47, 47), (20, 3)]:
        f = 0.5 * np.tanh(mlp_oracle(av.fnet.mlp, av.tex.latent[y, x][None], fenc)[0])
        np.testing.assert_allclose(flat[y, x], np.clip(av.tex.coarse[y, x] + f, 0, 1),
                                   atol=1e-12)


def test_texture_mask_extends_edges():
    m = np.zeros((4, 5))
    m[3] = 1
    t = texture_mask(m, 2)
    assert t.shape == (8, 9)
    assert np.all(t[-3:] == 1) and np.all(t[:5] == 0)


# -- correspondences ------------------------------------------------------------

def test_zero_warp_targets_are_padded_projections(scene):
    av = small_avatar(scene)
    fr = scene.frames[0]
    mu = plate_points(10)
    a = refresh_correspondences(anchor_set(mu, np.zeros((10, 2))), fr, scene.rig, av.deform,
                                av.wnet, av.tex)
    pix, _ = project_canonical(mu, scene.rig, fr, av.deform)
    np.testing.assert_allclose(a.target_uv, pix + PAD, atol=1e-12)


def test_refresh_drops_anchor_behind_camera(scene):
    av = small_avatar(scene)
    mu = plate_points(6)
    mu[2, 2] = 2.0
    a = refresh_correspondences(anchor_set(mu, np.zeros((6, 2))), scene.frames[0], scene.rig,
                                av.deform, av.wnet, av.tex)
    assert len(a) == 5
    assert not np.any(np.all(a.mu == mu[2], axis=1))


def test_refresh_random_warp_oracle(scene):
    av = small_avatar(scene)
    rng = np.random.default_rng(2)
    for W in av.wnet.mlp.weights:
        W += rng.normal(scale=0.3, size=W.shape)
    fr = scene.frames[0]
    mu = plate_points(8)
    a = refresh_correspondences(anchor_set(mu, np.zeros((8, 2))), fr, scene.rig, av.deform,
                                av.wnet, av.tex)
    pix, _ = project_canonical(mu, scene.rig, fr, av.deform)
    from ghsa.neuraltex import encode_pixels
    ref = pix + PAD + mlp_oracle(av.wnet.mlp, encode_pixels(pix, 32, 32),
                                 frame_encoding(fr, scene.rig))
    np.testing.assert_allclose(a.target_uv, ref, atol=1e-9)


def test_refresh_needs_four_anchors(scene):
    av = small_avatar(scene)
    mu = plate_points(5)
    mu[:2, 2] = 2.0
    with pytest.raises(InsufficientAnchors):
        refresh_correspondences(anchor_set(mu, np.zeros((5, 2))), scene.frames[0], scene.rig,
                                av.deform, av.wnet, av.tex)


# -- RANSAC -------------------------------------------------------------------------

def test_ransac_homography_separates_outliers():
    rng = np.random.default_rng(3)
    H0 = np.array([[1.1, 0.05, 4.0], [-0.03, 0.95, -2.0], [1e-4, -2e-4, 1.0]])
    src = rng.uniform(0, 128, (60, 2))
    dst = apply_homography(H0, src)
    bad = rng.choice(60, 6, replace=False)
    dst[bad] += rng.normal(size=(6, 2)) * 50 + 30
    H, inl = ransac_homography(src, dst, rng=0)
    assert set(np.flatnonzero(~inl)) == set(bad)
    np.testing.assert_allclose(H, H0, atol=1e-8)


def test_ransac_needs_four():
    with pytest.raises(DegenerateConfiguration):
        ransac_homography(np.zeros((3, 2)), np.zeros((3, 2)))


def test_filter_keeps_consistent_anchors(scene):
    mu = plate_points(40)
    a = anchor_set(mu, canonical_targets(scene.rig, scene.frames[0], mu))
    out, keep = ransac_filter(a, scene.frames, scene.rig, *neck_only(scene.rig, 40))
    assert keep.all()


def test_filter_removes_exactly_the_perturbed_tenth(scene):
    mu = plate_points(50, seed=4)
    t = canonical_targets(scene.rig, scene.frames[0], mu)
    rng = np.random.default_rng(5)
    bad = rng.choice(50, 5, replace=False)
    ang = rng.uniform(0, 2 * np.pi, 5)
    t[bad] += 50 * np.c_[np.cos(ang), np.sin(ang)]
    out, keep = ransac_filter(anchor_set(mu, t), scene.frames, scene.rig,
                              *neck_only(scene.rig, 50))
    assert set(np.flatnonzero(~keep)) == set(bad)
    assert len(out) == 45


def test_filter_uses_every_frame_when_short(scene, monkeypatch):
    import ghsa.fastpath as fp
    mu = plate_points(20)
    a = anchor_set(mu, canonical_targets(scene.rig, scene.frames[0], mu))
    calls = []
    real = fp.project_cached
    monkeypatch.setattr(fp, "project_cached", lambda *a: calls.append(1) or real(*a))
    ransac_filter(a, scene.frames, scene.rig, *neck_only(scene.rig, 20), n_frames=100)
    assert len(calls) == len(scene.frames)
    calls.clear()
    ransac_filter(a, scene.frames, scene.rig, *neck_only(scene.rig, 20), n_frames=5)
    assert len(calls) == 5


# -- fast rendering ---------------------------------------------------------------

def baked_plate(scene, head=None, texture=None, n=30):
    rig = scene.rig
    mu = plate_points(n, seed=6)
    E, P, W = neck_only(rig, n)
    t = canonical_targets(rig, scene.frames[0], mu)
    if head is None:
        head = GaussianSet.empty()
    hE, hP, hW = neck_only(rig, len(head))
    if texture is None:
        texture = np.random.default_rng(7).random((32 + 2 * PAD, 32 + 2 * PAD, 3))
    return BakedAvatar(rig, head, hE, hP, hW, mu, E, P, W, t, texture, PAD)


def test_canonical_homography_is_padding_shift(scene):
    b = baked_plate(scene)
    H = FastRenderer(b).fit_homography(scene.frames[0])
    np.testing.assert_allclose(H / H[2, 2], FastRenderer(b).identity(), atol=1e-9)


def test_empty_head_is_pure_texture(scene):
    b = baked_plate(scene)
    img = render_fast(b, scene.frames[0]).rgb
    ys, xs = np.mgrid[0:32, 0:32]
    ref = bilinear_sample(b.texture, np.stack([xs.ravel(), ys.ravel()], 1) + PAD)
    np.testing.assert_allclose(img, np.clip(ref, 0, 1).reshape(32, 32, 3), atol=1e-9)


def test_image_translation_moves_texture(scene):
    b = baked_plate(scene)
    fr = scene.frames[0]
    shifted = fr.with_params(cam=type(fr.cam)(fr.cam.R, fr.cam.t, fr.cam.fx, fr.cam.fy,
                                             fr.cam.cx + 3, fr.cam.cy - 2, 32, 32))
    H = FastRenderer(b).fit_homography(shifted)
    # a view pixel moved by (3, -2) reads the texel its source pixel used to
    np.testing.assert_allclose(apply_homography(H, np.array([[13.0, 8.0]])), [[10 + PAD, 10 + PAD]],
                               atol=1e-8)


def test_degenerate_frame_reuses_last_homography(scene):
    b = baked_plate(scene)
    r = FastRenderer(b)
    first = r.fit_homography(scene.frames[3])
    b.anchor_mu = b.anchor_mu[:3]
    b.anchor_E, b.anchor_P, b.anchor_W = b.anchor_E[:3], b.anchor_P[:3], b.anchor_W[:3]
    b.target_uv = b.target_uv[:3]
    with pytest.warns(UserWarning):
        again = r.fit_homography(scene.frames[4])
    np.testing.assert_array_equal(again, first)
    with pytest.warns(UserWarning):
        fresh = FastRenderer(b).fit_homography(scene.frames[4])
    np.testing.assert_array_equal(fresh, FastRenderer(b).identity())


def test_anisotropy():
    assert homography_anisotropy(np.eye(3)) == 1.0
    assert homography_anisotropy(np.diag([6.0, 1.0, 1.0])) == pytest.approx(6.0)


def test_fast_matches_network_render_on_canonical_frame(scene):
    av = small_avatar(scene)
    rng = np.random.default_rng(8)
    av.tex.coarse[:] = rng.random(av.tex.coarse.shape)
    av.head.logit_op[:] = 0.0
    fr = scene.frames[0]
    mu = plate_points(40)
    n = len(mu)
    av.anchors = anchor_set(mu, np.zeros((n, 2)))
    # deformation net routes every point to the neck bone, so the plate is rigid
    av.deform.mlp.biases[-1][-scene.rig.n_joints:] = [0, 60, 0, 0]
    b = bake(av, fr, np.ones(av.tex.coarse.shape[:2]), scene.frames, seed=0)
    assert b.n_anchors == n
    before = nn.mlp_query_count()
    fast = render_fast(b, fr).rgb
    assert nn.mlp_query_count() == before
    np.testing.assert_allclose(fast, render(av, fr), atol=1e-9)


# -- alignment ------------------------------------------------------------------

def test_align_identity_and_translation():
    p = np.random.default_rng(9).uniform(0, 50, (10, 2))
    np.testing.assert_allclose(euclidean_align(p, p), np.eye(3), atol=1e-12)
    M = euclidean_align(p, p + [4.0, -1.5])
    np.testing.assert_allclose(M[:2, 2], [4.0, -1.5], atol=1e-12)
    np.testing.assert_allclose(M[:2, :2], np.eye(2), atol=1e-12)


def test_align_recovers_rigid_motion():
    rng = np.random.default_rng(10)
    p = rng.uniform(0, 100, (30, 2))
    a = 0.7
    R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    M = euclidean_align(p, p @ R.T + [5.0, 9.0])
    np.testing.assert_allclose(M[:2, :2], R, atol=1e-9)
    np.testing.assert_allclose(M[:2, 2], [5.0, 9.0], atol=1e-9)


def test_align_needs_two():
    with pytest.raises(InsufficientAnchors):
        euclidean_align(np.zeros((1, 2)), np.zeros((1, 2)))
