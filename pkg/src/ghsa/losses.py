"""Training losses. Each returns ``(value, gradient(s))``."""

import numpy as np

from .errors import ShapeError


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def loss_rgb(render, gt):
    """Mean squared error over pixels and channels."""
    _same_shape(render, gt)
    diff = np.asarray(render, float) - np.asarray(gt, float)
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def _norm_term(x, ref, lam):
    d = (x - ref).reshape(len(x), -1).astype(float)
    n = np.linalg.norm(d, axis=1)
    safe = np.where(n > 0, n, 1.0)
    g = np.where(n[:, None] > 0, d / safe[:, None], 0.0)
    return lam * float(n.sum()), (lam * g).reshape(x.shape)


def loss_flame(E, P, W, E_gt, P_gt, W_gt, lam_E=1000.0, lam_P=1000.0, lam_W=1.0,
               n_regular=None):
    """Weighted (non-squared) L2 distance to pseudo ground truth.

    Sums over every row given (regular and anchor Gaussians) and divides by
    ``n_regular`` (defaults to the row count).
    """
    n = len(E) if n_regular is None else n_regular
    if n <= 0:
        n = max(len(E), 1)
    le, ge = _norm_term(E, E_gt, lam_E)
    lp, gp = _norm_term(P, P_gt, lam_P)
    lw, gw = _norm_term(W, W_gt, lam_W)
    return (le + lp + lw) / n, (ge / n, gp / n, gw / n)


def loss_head(alpha, alpha_head):
    """Penalise head-layer alpha that spills outside the head matte."""
    _same_shape(alpha, alpha_head)
    over = np.maximum(np.asarray(alpha, float) - alpha_head, 0.0)
    return float(np.mean(over ** 2)), 2.0 * over / over.size


def loss_warp(delta):
    """Mean over pixels of the L1 norm of the warp offset."""
    delta = np.asarray(delta, float).reshape(-1, 2)
    m = max(len(delta), 1)
    return float(np.abs(delta).sum() / m), np.sign(delta) / m


def loss_anchor_alpha(opacity):
    opacity = np.asarray(opacity, float)
    if opacity.size == 0:
        return 0.0, np.zeros(0)
    return float(np.mean(np.abs(opacity))), np.sign(opacity) / opacity.size


def loss_anchor(warped, target, valid=None):
    """Squared gap between warped anchor pixels and their texture targets.

    Mean over anchors and over both coordinates. ``valid`` masks out
    anchors that could not be projected.
    """
    warped = np.asarray(warped, float)
    target = np.asarray(target, float)
    _same_shape(warped, target)
    r = warped - target
    if valid is not None:
        r = np.where(np.asarray(valid)[:, None], r, 0.0)
    if r.size == 0:
        return 0.0, r
    return float(np.mean(r ** 2)), 2.0 * r / r.size


def loss_anchor_for(anchors, frame, rig, net, wnet, tex):
    """Anchor loss evaluated from scratch for one frame (no gradients)."""
    from .anchors import project_canonical
    from .neuraltex import frame_encoding, warp

    pix, depth = project_canonical(anchors.mu, rig, frame, net)
    fenc = frame_encoding(frame, rig).astype(wnet.mlp.dtype)
    xt, _, _ = warp(pix.astype(wnet.mlp.dtype), fenc, wnet, tex)
    return loss_anchor(xt, anchors.target_uv, depth > 0)[0]


# ---------------------------------------------------------------------------
# perceptual stand-in

LUMA = np.array([0.299, 0.587, 0.114])


class PyramidGradientFeatures:
    """Luminance finite differences on a small image pyramid.

    A deterministic stand-in for a pretrained feature network: features are
    horizontal and vertical differences of luminance at ``levels`` scales
    (2x2 average pooling between scales). Bounded inputs give bounded
    features, and the map is linear so it is trivially Lipschitz.
    """

    name = "pyramid-gradient"

    def __init__(self, levels=3):
        self.levels = levels

    def __call__(self, img):
        return self.features(img)[0]

    def features(self, img):
        y = np.asarray(img, float) @ LUMA
        feats, shapes = [], []
        for _ in range(self.levels):
            feats.append((np.diff(y, axis=1), np.diff(y, axis=0)))
            shapes.append(y.shape)
            h, w = (y.shape[0] // 2) * 2, (y.shape[1] // 2) * 2
            if h < 2 or w < 2:
                break
            y = 0.25 * (y[0:h:2, 0:w:2] + y[1:h:2, 0:w:2] + y[0:h:2, 1:w:2] + y[1:h:2, 1:w:2])
        return feats, shapes

    def backward(self, shapes, d_feats, image_shape):
        """Map gradients on features back to the RGB image."""
        d_y = None
        for lvl in range(len(shapes) - 1, -1, -1):
            h, w = shapes[lvl]
            g = np.zeros((h, w))
            gx, gy = d_feats[lvl]
            g[:, 1:] += gx
            g[:, :-1] -= gx
            g[1:, :] += gy
            g[:-1, :] -= gy
            if d_y is not None:
                hh, ww = d_y.shape
                up = 0.25 * np.repeat(np.repeat(d_y, 2, axis=0), 2, axis=1)
                g[:2 * hh, :2 * ww] += up
            d_y = g
        return d_y[..., None] * LUMA


def loss_vgg(render, gt, extractor=None):
    """Sum over pyramid levels of the mean absolute feature difference."""
    _same_shape(render, gt)
    ex = extractor or PyramidGradientFeatures()
    fr, shapes = ex.features(render)
    fg, _ = ex.features(gt)
    total = 0.0
    d_feats = []
    for (ax, ay), (bx, by) in zip(fr, fg):
        dx = ax - bx
        dy = ay - by
        m = dx.size + dy.size
        total += (np.abs(dx).sum() + np.abs(dy).sum()) / m
        d_feats.append((np.sign(dx) / m, np.sign(dy) / m))
    return float(total), ex.backward(shapes, d_feats, np.shape(render))
