"""Canonical body texture, the pose-conditioned warp field and fine-colour net.

An image-plane pixel ``x_v`` is sent to texture space as
``x_t = x_v + (P, P) + MLP_w(gamma(x_v), frame)``; the body colour there is
``T_c(x_t) + 0.5 tanh(MLP_f(T_f(x_t), frame))``. ``frame`` is the shared
encoding of head/neck rotation, camera position and body landmarks.
"""

from dataclasses import dataclass

import numpy as np

from . import _raster
from .coremath import positional_encode, positional_encode_backward
from .nn import MLP

PIXEL_FREQS = 10
LANDMARK_FREQS = 10
POSE_FREQS = 2
CAMERA_FREQS = 2
FINE_SCALE = 0.5


@dataclass
class NeuralTexture:
    """Coarse RGB and latent textures of size ``(H + 2P, W + 2P)``."""

    coarse: np.ndarray
    latent: np.ndarray
    padding: int
    height: int
    width: int

    @classmethod
    def create(cls, height, width, padding=50, latent_dim=32, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        shape = (height + 2 * padding, width + 2 * padding)
        coarse = np.ones(shape + (3,), dtype)
        latent = rng.uniform(0.0, 1.0, size=shape + (latent_dim,)).astype(dtype)
        return cls(coarse, latent, padding, height, width)

    @property
    def latent_dim(self):
        return self.latent.shape[-1]

    def to_texture_frame(self, xy):
        """Identity map from the image plane into the padded texture."""
        return np.asarray(xy) + self.padding


def pixel_grid(height, width, dtype=np.float32):
    """``(H*W, 2)`` pixel-centre coordinates ``(x, y)`` in row-major order."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(dtype)


def normalize_pixels(xy, height, width):
    scale = np.array([2.0 / max(width - 1, 1), 2.0 / max(height - 1, 1)])
    return (np.asarray(xy) * scale - 1.0).astype(np.asarray(xy).dtype)


def encode_pixels(xy, height, width):
    return positional_encode(normalize_pixels(xy, height, width), PIXEL_FREQS)


def encode_pixels_backward(xy, height, width, d_enc):
    scale = np.array([2.0 / max(width - 1, 1), 2.0 / max(height - 1, 1)])
    d_norm = positional_encode_backward(normalize_pixels(xy, height, width), PIXEL_FREQS, d_enc)
    return d_norm * scale


def sample(tex, xy):
    """Bilinear lookup of ``(M, 2)`` points (compiled twin of ``coremath.bilinear_sample``)."""
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    out = np.empty((len(xy), tex.shape[2]), tex.dtype)
    _raster.bilinear_forward(tex, xy, out)
    return out


def sample_backward(tex, xy, d_out, need_tex=True):
    """Returns ``(d_tex, d_xy)``; the texel scatter runs in a fixed serial order."""
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    d_tex = np.zeros(tex.shape if need_tex else (1, 1, 1), np.float64)
    d_xy = np.empty((len(xy), 2), np.float64)
    _raster.bilinear_backward(tex, xy, np.ascontiguousarray(d_out, np.float64), d_tex, d_xy,
                              need_tex)
    dt = np.result_type(tex.dtype, d_out.dtype)
    return (d_tex.astype(dt) if need_tex else None), d_xy.astype(dt)


# ---------------------------------------------------------------------------
# per-frame conditioning

def landmark_slots(include_nose):
    return 4 if include_nose else 3


def frame_inputs(frame, rig, include_nose=False):
    """Raw conditioning values ``(head/neck theta, camera position, landmarks)``."""
    theta = frame.theta.reshape(rig.n_pose, 3)[rig.headneck].ravel()
    ldmk = frame.ldmk[:landmark_slots(include_nose)]
    if np.any(~np.isfinite(ldmk)):
        raise ValueError(f"frame {frame.index}: missing landmark values")
    return theta, frame.cam.position, ldmk


def frame_encoding_dim(rig, include_nose=False):
    nt = len(rig.headneck) * 3
    return (nt * 2 * POSE_FREQS + 3 * 2 * CAMERA_FREQS
            + landmark_slots(include_nose) * 2 * 2 * LANDMARK_FREQS)


def frame_encoding(frame, rig, include_nose=False):
    theta, t, ldmk = frame_inputs(frame, rig, include_nose)
    h, w = frame.cam.height, frame.cam.width
    return np.concatenate([
        positional_encode(theta, POSE_FREQS),
        positional_encode(t, CAMERA_FREQS),
        positional_encode(normalize_pixels(ldmk, h, w).ravel(), LANDMARK_FREQS),
    ])


def frame_encoding_backward(frame, rig, d_enc, include_nose=False):
    """Gradient of the conditioning vector w.r.t. ``(theta_hn, cam_pos, ldmk)``."""
    theta, t, ldmk = frame_inputs(frame, rig, include_nose)
    h, w = frame.cam.height, frame.cam.width
    a = len(theta) * 2 * POSE_FREQS
    b = a + 3 * 2 * CAMERA_FREQS
    d_theta = positional_encode_backward(theta, POSE_FREQS, d_enc[:a])
    d_t = positional_encode_backward(t, CAMERA_FREQS, d_enc[a:b])
    ln = normalize_pixels(ldmk, h, w).ravel()
    d_ln = positional_encode_backward(ln, LANDMARK_FREQS, d_enc[b:]).reshape(-1, 2)
    d_ldmk = d_ln * np.array([2.0 / max(w - 1, 1), 2.0 / max(h - 1, 1)])
    return d_theta, d_t, d_ldmk


# ---------------------------------------------------------------------------
# networks

class WarpNet:
    """MLP_w: (gamma(x_v), frame encoding) -> pixel offset into the texture."""

    def __init__(self, frame_dim, hidden=128, depth=4, rng=None, dtype=np.float32):
        self.mlp = MLP(2 * 2 * PIXEL_FREQS, 2, hidden, depth, rng=rng, dtype=dtype,
                       shared_dim=frame_dim)


class FineNet:
    """MLP_f: (T_f(x_t), frame encoding) -> pose-dependent colour residual."""

    def __init__(self, latent_dim, frame_dim, hidden=128, depth=4, rng=None, dtype=np.float32):
        self.mlp = MLP(latent_dim, 3, hidden, depth, rng=rng, dtype=dtype, shared_dim=frame_dim)


@dataclass
class TextureCache:
    view_xy: np.ndarray
    pix_enc: np.ndarray
    delta: np.ndarray
    tex_xy: np.ndarray
    latent: np.ndarray
    fine: np.ndarray
    warp_cache: tuple
    fine_cache: tuple
    height: int
    width: int


def warp(view_xy, frame_enc, wnet, tex, pix_enc=None):
    """Texture coordinates for image-plane pixels. Returns ``(x_t, delta, cache)``."""
    if pix_enc is None:
        pix_enc = encode_pixels(view_xy, tex.height, tex.width)
    delta, cache = wnet.mlp.forward(pix_enc, frame_enc)
    tex_xy = tex.to_texture_frame(view_xy) + delta
    return tex_xy, delta, cache


def textured_color(view_xy, frame_enc, tex, wnet, fnet, pix_enc=None, post=None):
    """Body colour ``C^t`` at image-plane pixels (unclamped).

    ``post`` is an optional 3x3 affine map applied to the warped texture
    coordinates (inference only; the backward ignores it). Returns
    ``(color, cache)``.
    """
    view_xy = np.asarray(view_xy, dtype=tex.coarse.dtype)
    tex_xy, delta, wcache = warp(view_xy, frame_enc, wnet, tex, pix_enc)
    if post is not None:
        post = np.asarray(post, float)
        tex_xy = (tex_xy @ post[:2, :2].T + post[:2, 2]).astype(tex_xy.dtype)
    coarse = sample(tex.coarse, tex_xy)
    latent = sample(tex.latent, tex_xy)
    raw, fcache = fnet.mlp.forward(latent, frame_enc)
    fine = FINE_SCALE * np.tanh(raw)
    cache = TextureCache(view_xy, pix_enc, delta, tex_xy, latent, fine, wcache, fcache,
                         tex.height, tex.width)
    return coarse + fine, cache


def textured_color_backward(cache, tex, wnet, fnet, d_color, d_delta=None,
                            need_view=False):
    """Backward of :func:`textured_color`.

    ``d_delta`` adds a direct gradient on the warp offsets (warp
    regulariser). Returns a dict with ``coarse``, ``latent``, ``warp``
    (param grads), ``fine`` (param grads), ``frame_enc`` and optionally ``view_xy``.
    """
    d_raw = d_color * (FINE_SCALE - cache.fine ** 2 / FINE_SCALE)
    g_fine, d_latent_s, d_fenc_f = fnet.mlp.backward(cache.fine_cache, d_raw, need_input=True)
    d_coarse, dxy_c = sample_backward(tex.coarse, cache.tex_xy, d_color)
    d_latent, dxy_l = sample_backward(tex.latent, cache.tex_xy, d_latent_s)
    d_tex_xy = dxy_c + dxy_l
    d_delta_total = d_tex_xy if d_delta is None else d_tex_xy + d_delta
    g_warp, d_pix_enc, d_fenc_w = wnet.mlp.backward(cache.warp_cache, d_delta_total,
                                                    need_input=need_view)
    out = {"coarse": d_coarse, "latent": d_latent, "warp": g_warp, "fine": g_fine,
           "frame_enc": d_fenc_f + d_fenc_w}
    if need_view:
        d_view = d_tex_xy + encode_pixels_backward(cache.view_xy, cache.height, cache.width,
                                                   d_pix_enc)
        out["view_xy"] = d_view
    return out


def warp_backward(cache_w, view_xy, height, width, wnet, d_tex_xy, need_view=True):
    """Backward of :func:`warp` for a gradient on ``x_t``.

    Returns ``(param_grads, d_frame_enc, d_view_xy)``.
    """
    g, d_pix_enc, d_fenc = wnet.mlp.backward(cache_w, d_tex_xy, need_input=need_view)
    d_view = None
    if need_view:
        d_view = d_tex_xy + encode_pixels_backward(view_xy, height, width, d_pix_enc)
    return g, d_fenc, d_view
