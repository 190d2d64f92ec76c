"""Procedural toy rig and a noiseless synthetic head-and-shoulders sequence.

The rig has four joints (static, neck, head, jaw), eight expression
coefficients and three posed joints. The reference mesh is a head ellipsoid,
a neck cylinder and a flat shoulder plate. The plate is skinned rigidly to
the neck bone, so its image-space motion between any two frames is exactly
the homography induced by that plane.

Ground truth images are a Gaussian-cloud head (deformed through the
reference mesh's blendshapes and weights) composited over the plate, which
carries an antialiased checker pattern, on a white background.
"""

from dataclasses import dataclass, field

import numpy as np

from ..coremath import SH_C0, apply_homography
from ..gaussmodel import Camera, GaussianSet, build_covariance, conic_from_cov2d
from ..gaussmodel import project_gaussians, to_camera
from ..renderer import composite, splat_layer
from ..rig import FrameParams, Rig, bone_transforms, lbs, pose_rig, pseudo_gt_lookup

HEAD_CENTER = np.array([0.0, 0.06, 0.0])
HEAD_RADII = np.array([0.075, 0.095, 0.085])
NECK_RADIUS = 0.035
NECK_Y = (-0.09, 0.0)
PLATE_Z = -0.02
PLATE_X = 0.36
PLATE_BOTTOM = -0.42
NOSE = np.array([0.0, 0.045, 0.088])


def plate_top(x):
    """Upper silhouette of the shoulder plate (sloping shoulders)."""
    return -0.068 - 0.55 * np.asarray(x) ** 2


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)], 1)


def _smooth_field(pts, rng, n_terms=3, amp=1.0):
    """Sum of a few low-frequency sinusoids, one 3-vector per point."""
    out = np.zeros((len(pts), 3))
    for _ in range(n_terms):
        k = rng.normal(size=3) * 20.0
        ph = rng.uniform(0, 2 * np.pi)
        d = rng.normal(size=3)
        out += np.sin(pts @ k + ph)[:, None] * d
    return amp * out / n_terms


def head_vertices(n=640):
    return HEAD_CENTER + _fibonacci_sphere(n) * HEAD_RADII


def neck_vertices(n_ring=16, n_rows=6):
    ang = np.linspace(0, 2 * np.pi, n_ring, endpoint=False)
    ys = np.linspace(NECK_Y[0], NECK_Y[1], n_rows)
    return np.array([[NECK_RADIUS * np.cos(a), y, NECK_RADIUS * np.sin(a)]
                     for y in ys for a in ang])


def plate_vertices(spacing=0.015):
    xs = np.arange(-PLATE_X, PLATE_X + 1e-9, spacing)
    ys = np.arange(PLATE_BOTTOM, -0.06, spacing)
    g = np.array([[x, y, PLATE_Z] for y in ys for x in xs])
    return g[g[:, 1] <= plate_top(g[:, 0])]


def make_toy_rig(seed=0):
    """Build the four-joint toy rig with its reference mesh."""
    rng = np.random.default_rng(seed)
    names = ["static", "neck", "head", "jaw"]
    parents = np.array([-1, -1, 1, 2])
    rest = np.array([[0.0, -0.2, 0.0], [0.0, -0.03, 0.0], [0.0, 0.03, 0.0],
                     [0.0, 0.035, 0.02]])
    n_e = 8
    reg = np.zeros((12, n_e))
    # expressions nudge the jaw joint a little
    reg[9:12] = rng.normal(scale=1e-3, size=(3, n_e))

    hv = head_vertices()
    nv = neck_vertices()
    pv = plate_vertices()
    verts = np.concatenate([hv, nv, pv])
    nh, nn, npl = len(hv), len(nv), len(pv)
    W = np.zeros((len(verts), 4))
    # head: jaw region blends to the jaw bone, the underside to the neck
    rel = (hv - HEAD_CENTER) / HEAD_RADII
    jaw = np.clip((-rel[:, 1] - 0.2) * 2.5, 0, 1) * np.clip(rel[:, 2] * 2.0 + 0.3, 0, 1)
    neckw = np.clip((-rel[:, 1] - 0.75) * 3.0, 0, 0.6)
    W[:nh, 3] = jaw * (1 - neckw)
    W[:nh, 1] = neckw
    W[:nh, 2] = 1 - W[:nh, 1] - W[:nh, 3]
    t = (nv[:, 1] - NECK_Y[0]) / (NECK_Y[1] - NECK_Y[0])
    W[nh:nh + nn, 2] = 0.5 * t
    W[nh:nh + nn, 1] = 1 - 0.5 * t
    W[nh + nn:, 1] = 1.0

    E = np.zeros((len(verts), n_e, 3))
    face = np.clip(rel[:, 2], 0, 1)[:, None]
    for k in range(n_e):
        E[:nh, k] = _smooth_field(hv, rng, amp=0.004) * face
    P = np.zeros((len(verts), 27, 3))
    jaw_pose = rng.normal(scale=0.002, size=(9, 3))
    P[:nh, 18:27] = jaw[:, None, None] * jaw_pose[None]
    return Rig(joint_names=names, parents=parents, rest_joints=rest, joint_regressor=reg,
               pose_joints=np.array([1, 2, 3]), headneck=np.array([0, 1]), static_bone=0,
               ref_verts=verts, ref_weights=W, ref_expr=E, ref_pose=P)


def default_camera(height=128, width=128):
    f = 200.0 * width / 128.0
    return Camera(np.diag([1.0, -1.0, -1.0]), np.array([0.0, -0.05, 0.8]), f, f,
                  (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def ground_truth_head(rig, n=420, seed=0):
    """Head and neck Gaussians with smooth colours (view independent)."""
    rng = np.random.default_rng(seed + 1)
    nh = int(n * 0.85)
    dirs = _fibonacci_sphere(nh)
    mu_h = HEAD_CENTER + dirs * HEAD_RADII * 0.97
    ang = rng.uniform(0, 2 * np.pi, n - nh)
    ys = rng.uniform(NECK_Y[0], NECK_Y[1], n - nh)
    mu_n = np.stack([NECK_RADIUS * 0.95 * np.cos(ang), ys, NECK_RADIUS * 0.95 * np.sin(ang)], 1)
    mu = np.concatenate([mu_h, mu_n])
    rel = np.concatenate([dirs, np.zeros((n - nh, 3))])
    skin = np.array([0.86, 0.66, 0.55])
    col = np.tile(skin, (n, 1)) + 0.06 * np.sin(mu @ np.array([[31.0], [17.0], [23.0]]))
    hair = (rel[:, 1] > 0.35) | ((rel[:, 2] < -0.2) & (rel[:, 1] > -0.3))
    col[hair] = np.array([0.28, 0.18, 0.12])
    for sx in (-1, 1):
        eye = np.linalg.norm(rel - np.array([0.35 * sx, 0.08, 0.93]), axis=1) < 0.22
        col[eye] = np.array([0.12, 0.1, 0.1])
    mouth = (np.abs(rel[:, 0]) < 0.35) & (np.abs(rel[:, 1] + 0.45) < 0.1) & (rel[:, 2] > 0.6)
    col[mouth] = np.array([0.7, 0.25, 0.25])
    col = np.clip(col, 0, 1)
    scale = np.full((n, 3), 0.011)
    scale[:nh, :] = np.array([0.013, 0.013, 0.006])
    # orient the flat axis along the surface normal of the ellipsoid
    quat = np.zeros((n, 4))
    quat[:, 0] = 1
    normals = np.concatenate([dirs / HEAD_RADII, np.zeros((n - nh, 3))])
    normals[nh:, 0] = np.cos(ang)
    normals[nh:, 2] = np.sin(ang)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    z = np.array([0.0, 0.0, 1.0])
    for i in range(n):
        v = np.cross(z, normals[i])
        s = np.linalg.norm(v)
        c = z @ normals[i]
        if s < 1e-9:
            continue
        half = np.arctan2(s, c) / 2
        quat[i] = np.concatenate([[np.cos(half)], np.sin(half) * v / s])
    scale[nh:] = np.array([0.012, 0.012, 0.005])
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = (col - 0.5) / SH_C0
    return GaussianSet(mu, scale, quat, np.full(n, 0.92), sh)


def render_head_gt(rig, gaussians, frame):
    """Render the GT head through the reference-mesh deformation."""
    E, P, W = pseudo_gt_lookup(rig, gaussians.mu)
    posed = pose_rig(rig, frame)
    R, _, mu_d, _ = lbs(posed, gaussians.mu, E, P, W)
    cov = build_covariance(gaussians.scale, gaussians.quat)
    mu_c, cov_c = to_camera(mu_d, R @ cov @ np.swapaxes(R, 1, 2), frame.cam)
    mu2d, cov2d, depth, valid = project_gaussians(mu_c, cov_c, frame.cam)
    rgb = np.maximum(0.5 + SH_C0 * gaussians.sh[:, 0], 0)
    layer, _ = splat_layer(mu2d, conic_from_cov2d(cov2d), rgb, gaussians.opacity, depth,
                           valid, frame.cam.height, frame.cam.width, cov2d=cov2d)
    return layer


CHECKER_A = np.array([0.26, 0.32, 0.56])
CHECKER_B = np.array([0.52, 0.58, 0.78])


def checker(x, y, cell):
    k = (np.floor(x / cell) + np.floor(y / cell)).astype(np.int64) & 1
    return np.where(k[..., None] == 1, CHECKER_A, CHECKER_B)


def neck_transform(rig, theta, psi):
    G, _, _ = bone_transforms(rig, theta, psi)
    return G[1]


def render_body_gt(rig, frame, cell=0.033, supersample=4, return_mask=False):
    """Ray-cast the plate: antialiased checker on white.

    With ``return_mask`` also returns the plate's pixel coverage.
    """
    cam = frame.cam
    G = neck_transform(rig, frame.theta, frame.psi)
    Rn, tn = G[:, :3], G[:, 3]
    # plate plane in world: point Rn p0 + tn, normal Rn e_z
    h, w = cam.height, cam.width
    s = supersample
    off = (np.arange(s) + 0.5) / s - 0.5
    ys, xs = np.mgrid[0:h, 0:w]
    ox, oy = np.meshgrid(off, off)
    px = xs[..., None] + ox.ravel()
    py = ys[..., None] + oy.ravel()
    d_cam = np.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, np.ones_like(px)], -1)
    d_world = d_cam @ cam.R  # R^T d
    o = cam.position
    n_w = Rn[:, 2]
    p0 = Rn @ np.array([0, 0, PLATE_Z]) + tn
    denom = d_world @ n_w
    lam = ((p0 - o) @ n_w) / denom
    hit = o + lam[..., None] * d_world
    local = (hit - tn) @ Rn  # R^T (x - t)
    lx, ly = local[..., 0], local[..., 1]
    inside = (ly <= plate_top(lx)) & (np.abs(lx) <= PLATE_X) & (ly >= PLATE_BOTTOM) & (lam > 0)
    col = checker(lx, ly - 0.0055, cell)
    col = np.where(inside[..., None], col, 1.0)
    if return_mask:
        return col.mean(axis=2), inside.mean(axis=2)
    return col.mean(axis=2)


def plane_homography(rig, frame_a, frame_b):
    """Image homography taking plate pixels of ``frame_a`` to ``frame_b``."""
    def plate_to_image(frame):
        cam = frame.cam
        G = neck_transform(rig, frame.theta, frame.psi)
        K = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1.0]])
        A = cam.R @ G[:, :3]
        b = cam.R @ G[:, 3] + cam.t
        # plate-local (x, y, PLATE_Z, 1) -> camera
        M = np.stack([A[:, 0], A[:, 1], A[:, 2] * PLATE_Z + b], axis=1)
        return K @ M
    Ha = plate_to_image(frame_a)
    Hb = plate_to_image(frame_b)
    H = Hb @ np.linalg.inv(Ha)
    return H / H[2, 2]


def landmark_points(rig):
    """Canonical 3D landmark positions (neck, left/right shoulder, nose)."""
    return np.array([[0.0, -0.075, PLATE_Z], [0.2, plate_top(0.2), PLATE_Z],
                     [-0.2, plate_top(-0.2), PLATE_Z], NOSE])


def project_landmarks(rig, frame):
    G, _, _ = bone_transforms(rig, frame.theta, frame.psi)
    pts = landmark_points(rig)
    posed = np.empty_like(pts)
    posed[:3] = pts[:3] @ G[1, :, :3].T + G[1, :, 3]
    posed[3] = G[2, :, :3] @ pts[3] + G[2, :, 3]
    pix, _ = frame.cam.project_points(posed)
    return pix


@dataclass
class SyntheticConfig:
    n_frames: int = 100
    height: int = 128
    width: int = 128
    neck_amp: float = 0.06
    head_amp: float = 0.25
    jaw_amp: float = 0.15
    expr_amp: float = 1.0
    motion: bool = True
    n_head_gaussians: int = 420
    test_every: int = 5
    checker_px: float = 8.0


@dataclass
class SyntheticScene:
    rig: Rig
    frames: list
    gt_head: GaussianSet
    homographies: list
    config: SyntheticConfig
    test_ids: list = field(default_factory=list)
    train_ids: list = field(default_factory=list)

    @property
    def train(self):
        return [self.frames[i] for i in self.train_ids]

    @property
    def test(self):
        return [self.frames[i] for i in self.test_ids]


def frame_motion(cfg, rng, n_e):
    """Smooth pose/expression trajectories (one row per frame)."""
    t = np.linspace(0, 1, cfg.n_frames)
    if not cfg.motion:
        return np.zeros((cfg.n_frames, 9)), np.zeros((cfg.n_frames, n_e))

    def wave(amp, n_terms=3):
        out = np.zeros_like(t)
        for k in range(n_terms):
            f = rng.uniform(0.6, 2.2)
            ph = rng.uniform(0, 2 * np.pi)
            out += np.sin(2 * np.pi * f * t + ph) / n_terms
        return amp * out / max(np.abs(out).max(), 1e-12)

    theta = np.zeros((cfg.n_frames, 9))
    for a in range(3):
        theta[:, a] = wave(cfg.neck_amp)
        theta[:, 3 + a] = wave(cfg.head_amp * (1.0 if a != 2 else 0.5))
    theta[:, 6] = np.abs(wave(cfg.jaw_amp))
    psi = np.stack([wave(cfg.expr_amp) for _ in range(n_e)], 1)
    # the first frame is canonical; start every trajectory from rest
    theta -= theta[0]
    psi -= psi[0]
    return theta, psi


def make_synthetic(config=None, seed=0):
    """Generate the synthetic sequence. Deterministic for a fixed seed."""
    cfg = config or SyntheticConfig()
    rig = make_toy_rig(seed)
    rng = np.random.default_rng(seed + 7)
    cam = default_camera(cfg.height, cfg.width)
    gt_head = ground_truth_head(rig, cfg.n_head_gaussians, seed)
    theta, psi = frame_motion(cfg, rng, rig.n_expr)
    cell = cfg.checker_px * 0.82 / cam.fx
    frames = []
    for i in range(cfg.n_frames):
        fr = FrameParams(theta[i], psi[i], cam, np.full((4, 2), np.nan), index=i,
                         timestamp=i / 25.0)
        fr.ldmk = project_landmarks(rig, fr)
        head = render_head_gt(rig, gt_head, fr)
        body, cover = render_body_gt(rig, fr, cell, return_mask=True)
        img = composite(None, head, body).rgb
        fr.image = img.astype(np.float32)
        fr.head_mask = head.alpha.astype(np.float32)
        # foreground (head or body) matte, used to clean the baked texture
        fr.extra["fg_mask"] = np.maximum(cover, head.alpha).astype(np.float32)
        frames.append(fr)
    Hs = [plane_homography(rig, frames[0], f) for f in frames]
    test = [i for i in range(cfg.n_frames) if i % cfg.test_every == cfg.test_every - 1]
    train = [i for i in range(cfg.n_frames) if i not in set(test)]
    return SyntheticScene(rig, frames, gt_head, Hs, cfg, test, train)


def init_gaussians(rig, sh_degree=3, opacity=0.1, seed=0):
    """Initial regular Gaussians: one per reference-mesh vertex."""
    rng = np.random.default_rng(seed + 3)
    v = rig.ref_verts + rng.normal(scale=1e-4, size=rig.ref_verts.shape)
    n = len(v)
    # isotropic size from the nearest-neighbour spacing
    d = np.sqrt(np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=2))
    np.fill_diagonal(d, np.inf)
    nn = np.sort(d, axis=1)[:, :3].mean(axis=1)
    scale = np.repeat(np.clip(nn * 0.6, 1e-3, 0.02)[:, None], 3, axis=1)
    quat = np.zeros((n, 4))
    quat[:, 0] = 1
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    return GaussianSet(v, scale, quat, np.full(n, opacity), sh)


def check_homographies(scene, n_points=32, seed=0):
    """Max reprojection gap between the analytic plane homography and plate points."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.2, 0.2, n_points)
    y = rng.uniform(-0.25, -0.1, n_points)
    pts = np.stack([x, y, np.full(n_points, PLATE_Z)], 1)
    worst = 0.0
    f0 = scene.frames[0]

    def proj(fr):
        G = neck_transform(scene.rig, fr.theta, fr.psi)
        return fr.cam.project_points(pts @ G[:, :3].T + G[:, 3])[0]

    p0 = proj(f0)
    for H, fr in zip(scene.homographies, scene.frames):
        worst = max(worst, float(np.abs(apply_homography(H, p0) - proj(fr)).max()))
    return worst
