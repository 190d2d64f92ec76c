"""Network-free inference.

Baking caches everything the networks would produce for a fixed canonical
frame: deformation outputs per Gaussian, and a flat RGB body texture. At
render time the body is moved by one homography per frame, fitted from the
anchor Gaussians' projections to their texture targets.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import _raster
from .anchors import AnchorSet, in_frame, project_canonical
from .coremath import (apply_homography, hartley_normalization, procrustes_2d, sh_basis,
                       sh_degree_of, svd_least_squares_homography)
from .errors import DegenerateConfiguration, InsufficientAnchors
from .gaussmodel import GaussianSet, build_covariance
from .neuraltex import FINE_SCALE, frame_encoding, pixel_grid, warp
from .renderer import composite, splat_layer
from .rig import lbs, pose_rig

log = logging.getLogger(__name__)

RANSAC_THRESHOLD = 3.0
RANSAC_ITERS = 500
OUTLIER_FRACTION = 0.5
RANSAC_FRAMES = 100
MAX_ANISOTROPY = 5.0


@dataclass
class BakedAvatar:
    """Everything :func:`render_fast` needs. Holds no network weights."""

    rig: object
    head: GaussianSet
    head_E: np.ndarray
    head_P: np.ndarray
    head_W: np.ndarray
    anchor_mu: np.ndarray
    anchor_E: np.ndarray
    anchor_P: np.ndarray
    anchor_W: np.ndarray
    target_uv: np.ndarray
    texture: np.ndarray
    padding: int
    canonical: int = 0

    @property
    def n_anchors(self):
        return len(self.anchor_mu)


def bake_texture(tex, fnet, frame_enc, bg_mask=None):
    """Flat texture ``coarse + fine`` evaluated once per texel.

    Texels where ``bg_mask`` (texture-space foreground, 1 = keep) is below
    0.5 are set to white. Clamping to [0, 1] happens before whitening.
    """
    h, w = tex.coarse.shape[:2]
    raw = fnet.mlp.forward(tex.latent.reshape(h * w, -1), frame_enc)[0]
    flat = tex.coarse.astype(np.float64) + FINE_SCALE * np.tanh(raw.reshape(h, w, 3))
    flat = np.clip(flat, 0.0, 1.0)
    if bg_mask is None:
        warnings.warn("no background mask; texture left uncleaned", stacklevel=2)
    else:
        bg_mask = np.asarray(bg_mask)
        if bg_mask.shape != (h, w):
            raise ValueError(f"mask shape {bg_mask.shape} != texture {(h, w)}")
        flat[bg_mask < 0.5] = 1.0
    return flat


def texture_mask(image_mask, padding):
    """Lift a canonical-frame foreground matte into texture space.

    The padding band copies the nearest image border value, so a body that
    leaves the frame stays foreground beyond the image edge.
    """
    return np.pad(np.asarray(image_mask, float), padding, mode="edge")


def refresh_correspondences(anchors, frame, rig, net, wnet, tex, include_nose=False):
    """Drop anchors outside the canonical view and retarget the rest to
    their warped canonical projections."""
    pix, depth = project_canonical(anchors.mu, rig, frame, net)
    keep = in_frame(pix, depth, frame.cam.width, frame.cam.height)
    if keep.sum() < 4:
        raise InsufficientAnchors(f"only {int(keep.sum())} anchors in the canonical view")
    out = anchors.subset(keep)
    dt = wnet.mlp.dtype
    fenc = frame_encoding(frame, rig, include_nose).astype(dt)
    xt, _, _ = warp(pix[keep].astype(dt), fenc, wnet, tex)
    out.target_uv = np.asarray(xt, np.float64)
    return out


def ransac_homography(src, dst, threshold=RANSAC_THRESHOLD, iters=RANSAC_ITERS, rng=None):
    """Robust homography ``src -> dst``. Returns ``(H, inlier_mask)``.

    Hypotheses come from random 4-point samples in Hartley-normalised
    coordinates; the best one is refitted on its inliers once.
    """
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    n = len(src)
    if n < 4:
        raise DegenerateConfiguration(f"need 4 correspondences, got {n}")
    rng = np.random.default_rng(rng)
    Ts = hartley_normalization(src)
    Td = hartley_normalization(dst)
    s = src @ Ts[:2, :2].T + Ts[:2, 2]
    d = dst @ Td[:2, :2].T + Td[:2, 2]
    # sample 4 distinct indices per hypothesis
    idx = np.argpartition(rng.random((iters, n)), 3, axis=1)[:, :4]
    x, y = s[idx, 0], s[idx, 1]
    u, v = d[idx, 0], d[idx, 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    r1 = np.stack([-x, -y, -o, z, z, z, u * x, u * y, u], -1)
    r2 = np.stack([z, z, z, -x, -y, -o, v * x, v * y, v], -1)
    A = np.concatenate([r1, r2], axis=1)
    _, _, Vt = np.linalg.svd(A)
    Hn = Vt[:, -1].reshape(iters, 3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    ph = np.einsum("kij,nj->kni", H, np.c_[src, np.ones(n)])
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = ph[..., :2] / ph[..., 2:3]
        err = np.linalg.norm(proj - dst, axis=-1)
    inl = np.nan_to_num(err, nan=np.inf) < threshold
    best = int(np.argmax(inl.sum(axis=1)))
    mask = inl[best]
    if mask.sum() < 4:
        raise DegenerateConfiguration("no consensus among correspondences")
    Hf = svd_least_squares_homography(src[mask], dst[mask])
    err = np.linalg.norm(apply_homography(Hf, src) - dst, axis=1)
    mask = np.nan_to_num(err, nan=np.inf) < threshold
    return Hf, mask


def project_cached(rig, frame, mu, E, P, W):
    """Skin canonical points with cached deformation outputs and project."""
    posed = pose_rig(rig, frame)
    R, _, mu_d, _ = lbs(posed, np.asarray(mu, float), E, P, W)
    pix, depth = frame.cam.project_points(mu_d)
    return pix, depth, R, mu_d


def ransac_filter(anchors, frames, rig, E, P, W, threshold=RANSAC_THRESHOLD,
                  iters=RANSAC_ITERS, outlier_fraction=OUTLIER_FRACTION,
                  n_frames=RANSAC_FRAMES, seed=0):
    """Remove anchors that disagree with the per-frame homography too often.

    Uses ``n_frames`` distinct frames (all of them when fewer exist).
    ``E, P, W`` are the cached deformation outputs of the anchors. Returns
    ``(anchors, keep)``.
    """
    rng = np.random.default_rng(seed)
    frames = list(frames)
    if len(frames) > n_frames:
        pick = np.sort(rng.choice(len(frames), n_frames, replace=False))
        frames = [frames[i] for i in pick]
    n = len(anchors)
    bad = np.zeros(n)
    used = 0
    for fr in frames:
        pix, depth, _, _ = project_cached(rig, fr, anchors.mu, E, P, W)
        ok = depth > 0
        try:
            _, inl = ransac_homography(pix[ok], anchors.target_uv[ok], threshold, iters, rng)
        except DegenerateConfiguration as exc:
            warnings.warn(f"frame {fr.index} skipped: {exc}", stacklevel=2)
            continue
        outl = np.ones(n, bool)
        outl[np.flatnonzero(ok)[inl]] = False
        bad += outl
        used += 1
    if used == 0:
        return anchors, np.ones(n, bool)
    keep = bad / used <= outlier_fraction
    return anchors.subset(keep), keep


def bake(av, frame, bg_mask=None, frames=None, ransac=True, seed=0):
    """Snapshot a trained :class:`~ghsa.model.Avatar` for network-free rendering.

    ``frame`` is the canonical training frame; ``frames`` (training frames)
    feed the RANSAC anchor filter.
    """
    dt = np.float64
    head = av.head.gaussians()
    head = GaussianSet(*(np.asarray(a, dt) for a in
                         (head.mu, head.scale, head.quat, head.opacity, head.sh)))
    E, P, W, _ = av.deform.forward(head.mu)
    fenc = av.frame_encoding(frame)
    texture = bake_texture(av.tex, av.fnet, fenc, bg_mask)
    anchors = refresh_correspondences(av.anchors, frame, av.rig, av.deform, av.wnet, av.tex,
                                      av.include_nose)
    aE, aP, aW, _ = av.deform.forward(anchors.mu)
    aE, aP, aW = (np.asarray(a, dt) for a in (aE, aP, aW))
    if ransac and frames:
        anchors, keep = ransac_filter(anchors, frames, av.rig, aE, aP, aW, seed=seed)
        aE, aP, aW = aE[keep], aP[keep], aW[keep]
        if len(anchors) < 4:
            raise InsufficientAnchors(f"{len(anchors)} anchors left after filtering")
    return BakedAvatar(av.rig, head, np.asarray(E, dt), np.asarray(P, dt), np.asarray(W, dt),
                       np.asarray(anchors.mu, dt), aE, aP, aW, anchors.target_uv.copy(),
                       texture, av.tex.padding, frame.index)


def homography_anisotropy(H):
    s = np.linalg.svd(H[:2, :2] / H[2, 2], compute_uv=False)
    return float(s[0] / max(s[1], 1e-300))


class FastRenderer:
    """Stateful wrapper remembering the last good homography for fallbacks."""

    def __init__(self, baked):
        self.baked = baked
        self.last_H = None
        self._grid = {}

    def identity(self):
        p = self.baked.padding
        return np.array([[1.0, 0, p], [0, 1.0, p], [0, 0, 1.0]])

    def fit_homography(self, frame):
        b = self.baked
        pix, depth, _, _ = project_cached(b.rig, frame, b.anchor_mu, b.anchor_E, b.anchor_P,
                                          b.anchor_W)
        ok = (depth > 0) & np.all(np.isfinite(pix), axis=1)
        try:
            H = svd_least_squares_homography(pix[ok], b.target_uv[ok])
            if not np.all(np.isfinite(H)) or abs(np.linalg.det(H)) < 1e-10:
                raise DegenerateConfiguration("singular homography")
        except DegenerateConfiguration as exc:
            H = self.last_H if self.last_H is not None else self.identity()
            warnings.warn(f"frame {frame.index}: {exc}; reusing previous homography",
                          stacklevel=3)
            return H
        if homography_anisotropy(H) > MAX_ANISOTROPY:
            warnings.warn(f"frame {frame.index}: extreme body pose (homography anisotropy "
                          f"{homography_anisotropy(H):.1f})", stacklevel=3)
        self.last_H = H
        return H

    def head_layer(self, frame):
        b = self.baked
        cam = frame.cam
        h = b.head
        from .model import _geometry
        if len(h) == 0:
            return None
        posed = pose_rig(b.rig, frame)
        R, _, mu_d, _ = lbs(posed, h.mu, b.head_E, b.head_P, b.head_W)
        cov = build_covariance(h.scale, h.quat)
        cov_d = R @ cov @ np.swapaxes(R, 1, 2)
        geo = _geometry(mu_d, cov, cov_d, cam)
        view = mu_d - cam.position
        dirs = view / np.linalg.norm(view, axis=1, keepdims=True)
        basis, _ = sh_basis(dirs, sh_degree_of(h.sh.shape[1]))
        rgb = np.maximum(0.5 + np.einsum("nk,nkc->nc", basis, h.sh), 0.0)
        layer, _ = splat_layer(geo.mu2d, geo.conic, rgb, h.opacity, geo.depth, geo.valid,
                               cam.height, cam.width, cov2d=geo.cov2d)
        return layer

    def body(self, frame, H):
        cam = frame.cam
        key = (cam.height, cam.width)
        if key not in self._grid:
            self._grid[key] = pixel_grid(cam.height, cam.width, np.float64)
        xt = apply_homography(H, self._grid[key])
        out = np.empty((len(xt), 3))
        _raster.bilinear_forward(self.baked.texture, np.ascontiguousarray(xt), out)
        return out.reshape(cam.height, cam.width, 3)

    def render(self, frame):
        H = self.fit_homography(frame)
        fb = composite(None, self.head_layer(frame), self.body(frame, H))
        return fb


def render_fast(baked, frame, renderer=None):
    """Render one frame from a :class:`BakedAvatar`. Returns a Framebuffer."""
    return (renderer or FastRenderer(baked)).render(frame)


def euclidean_align(warped, target):
    """Rigid 2D transform (3x3, homogeneous) taking warped anchor pixels onto
    their texture targets."""
    warped = np.asarray(warped, float)
    if len(warped) < 2:
        raise InsufficientAnchors("need at least 2 anchors")
    R, t = procrustes_2d(warped, target)
    M = np.eye(3)
    M[:2, :2] = R
    M[:2, 2] = t
    return M


def render_reenact(av, frame, align=True):
    """Full-network render with the extra rigid correction used when driving
    an avatar with another subject's motion."""
    from .model import forward
    from .neuraltex import textured_color

    r = forward(av, frame, stage=3)
    if not align or av.anchors is None or len(av.anchors) < 2:
        return r.image
    ok = r.anchor_valid
    M = euclidean_align(r.anchor_xt[ok], av.anchors.target_uv[ok])
    cam = frame.cam
    xy, enc = av.pixel_inputs(cam.height, cam.width)
    fenc = av.frame_encoding(frame)
    # rigid correction applied after the learned warp
    color, _ = textured_color(xy, fenc, av.tex, av.wnet, av.fnet, pix_enc=enc, post=M)
    body = color.reshape(cam.height, cam.width, 3)
    return composite(None, r.head_layer, body).rgb
