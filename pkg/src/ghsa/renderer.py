"""Depth-sorted splat compositing and the three-layer hybrid compositor.

A :class:`RenderLayer` holds premultiplied colour and total alpha for one
group of Gaussians. :func:`composite` blends the anchor layer, the head
layer and the (opaque) body texture image, anchors always in front::

    C* = C_anchor + (1 - a_anchor) C_head + (1 - a_anchor)(1 - a_head) C_body
"""

from dataclasses import dataclass

import numpy as np

from . import _raster
from .errors import ShapeError

TILE = 16


@dataclass
class RenderLayer:
    color: np.ndarray
    alpha: np.ndarray

    @classmethod
    def empty(cls, height, width, dtype=np.float64):
        return cls(np.zeros((height, width, 3), dtype), np.zeros((height, width), dtype))


@dataclass
class Framebuffer:
    rgb: np.ndarray
    background: tuple = (1.0, 1.0, 1.0)


@dataclass
class RasterState:
    """What the backward pass needs to replay a :func:`splat_layer` call."""

    ranges: np.ndarray
    packed: np.ndarray
    pair_splat: np.ndarray
    mu2d: np.ndarray
    conic: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    height: int
    width: int
    n_splats: int


def splat_extent(cov2d, opacity):
    """Half-extents (px) outside of which a splat's alpha drops below 1/255.

    Solves ``o exp(-m^2/2) = 1/255`` for the Mahalanobis radius ``m`` and
    takes the axis-aligned box of that ellipse. Splats that can never
    reach 1/255 get a negative extent.
    """
    o = np.maximum(opacity, 1e-30)
    m2 = 2.0 * np.log(255.0 * o)
    ok = m2 > 0
    m2 = np.where(ok, m2, 0.0)
    rx = np.sqrt(m2 * np.maximum(cov2d[..., 0, 0], 0))
    ry = np.sqrt(m2 * np.maximum(cov2d[..., 1, 1], 0))
    return np.where(ok, rx, -1.0), np.where(ok, ry, -1.0)


def bin_splats(mu2d, cov2d, opacity, depth, valid, height, width, tile=TILE):
    """Assign splats to tiles.

    Returns ``(ranges, pair_splat)``: ``pair_splat`` lists splat indices grouped
    by tile and depth-sorted inside each tile (stable, ties by index);
    ``ranges[t]`` is the half-open slice of tile ``t``.
    """
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    rx, ry = splat_extent(cov2d, opacity)
    keep = valid & (rx >= 0) & np.all(np.isfinite(mu2d), axis=-1)
    xmin = np.ceil(mu2d[:, 0] - rx)
    xmax = np.floor(mu2d[:, 0] + rx)
    ymin = np.ceil(mu2d[:, 1] - ry)
    ymax = np.floor(mu2d[:, 1] + ry)
    keep &= (xmax >= 0) & (xmin <= width - 1) & (ymax >= 0) & (ymin <= height - 1)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return np.zeros((n_tiles, 2), np.int64), np.zeros(0, np.int64)
    idx = idx[np.argsort(depth[idx], kind="stable")]
    tx0 = (np.clip(xmin[idx], 0, width - 1) // tile).astype(np.int64)
    tx1 = (np.clip(xmax[idx], 0, width - 1) // tile).astype(np.int64)
    ty0 = (np.clip(ymin[idx], 0, height - 1) // tile).astype(np.int64)
    ty1 = (np.clip(ymax[idx], 0, height - 1) // tile).astype(np.int64)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    lx = local % nx[owner]
    ly = local // nx[owner]
    tile_id = (ty0[owner] + ly) * tiles_x + tx0[owner] + lx
    order = np.argsort(tile_id, kind="stable")
    tile_id = tile_id[order]
    pair_splat = idx[owner[order]]
    starts = np.searchsorted(tile_id, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tile_id, np.arange(n_tiles), side="right")
    return np.stack([starts, ends], axis=1).astype(np.int64), pair_splat.astype(np.int64)


def splat_layer(mu2d, conic, rgb, opacity, depth, valid, height, width, cov2d=None):
    """Front-to-back compositing of screen-space splats into a layer.

    ``conic`` is the packed inverse covariance ``(a, b, c)``; ``cov2d`` (used
    only for tile binning) is derived from it when omitted. Returns
    ``(RenderLayer, RasterState)``.
    """
    dtype = np.result_type(mu2d.dtype, rgb.dtype)
    n = len(mu2d)
    if cov2d is None:
        det = conic[:, 0] * conic[:, 2] - conic[:, 1] ** 2
        cov2d = np.empty((n, 2, 2), dtype)
        cov2d[:, 0, 0] = conic[:, 2] / det
        cov2d[:, 1, 1] = conic[:, 0] / det
        cov2d[:, 0, 1] = cov2d[:, 1, 0] = -conic[:, 1] / det
    ranges, pair_splat = bin_splats(mu2d, cov2d, opacity, depth, valid, height, width)
    color = np.zeros((height, width, 3), dtype)
    alpha = np.zeros((height, width), dtype)
    mu2d_c = np.ascontiguousarray(mu2d, dtype)
    conic_c = np.ascontiguousarray(conic, dtype)
    rgb_c = np.ascontiguousarray(rgb, dtype)
    op_c = np.ascontiguousarray(opacity, dtype)
    tiles_x = (width + TILE - 1) // TILE
    packed = _raster.pack_pairs(pair_splat, mu2d_c, conic_c, rgb_c, op_c)
    if len(pair_splat):
        _raster.raster_forward(ranges, packed, height, width, TILE, tiles_x, color, alpha)
    state = RasterState(ranges, packed, pair_splat, mu2d_c, conic_c, rgb_c, op_c,
                        height, width, n)
    return RenderLayer(color, alpha), state


def splat_layer_backward(state, d_color, d_alpha):
    """Returns ``(d_mu2d, d_conic, d_rgb, d_opacity)`` per splat."""
    n = state.n_splats
    dtype = state.mu2d.dtype
    out = np.zeros((len(state.pair_splat), 9))
    tiles_x = (state.width + TILE - 1) // TILE
    if len(state.pair_splat):
        _raster.raster_backward(state.ranges, state.packed, state.height, state.width, TILE,
                                tiles_x, np.ascontiguousarray(d_color, np.float64),
                                np.ascontiguousarray(d_alpha, np.float64), out)
    grads = np.zeros((n, 9))
    # fixed-order scatter keeps the reduction independent of thread count
    np.add.at(grads, state.pair_splat, out)
    grads = grads.astype(dtype, copy=False)
    return grads[:, 0:2], grads[:, 2:5], grads[:, 5:8], grads[:, 8]


def render_splats(splats, height, width):
    """Convenience wrapper taking a :class:`~ghsa.gaussmodel.Splats` batch."""
    from .gaussmodel import conic_from_cov2d
    layer, _ = splat_layer(splats.mu2d, conic_from_cov2d(splats.cov2d), splats.rgb,
                           splats.opacity, splats.depth, splats.valid, height, width,
                           cov2d=splats.cov2d)
    return layer


def composite(anchor, head, body, background=(1.0, 1.0, 1.0), clamp=True):
    """Blend the anchor layer, head layer and body image (anchors in front).

    ``anchor`` or ``head`` may be ``None`` (treated as empty). ``body`` is an
    ``(H, W, 3)`` image, or ``None`` for a plain background.
    """
    ref = head if head is not None else anchor
    if ref is None:
        if body is None:
            raise ShapeError("nothing to composite")
        h, w = body.shape[:2]
        dtype = body.dtype
    else:
        h, w = ref.alpha.shape
        dtype = ref.color.dtype
    for layer in (anchor, head):
        if layer is not None and layer.alpha.shape != (h, w):
            raise ShapeError(f"layer size {layer.alpha.shape} != {(h, w)}")
    if body is None:
        body = np.broadcast_to(np.asarray(background, dtype), (h, w, 3))
    elif body.shape[:2] != (h, w):
        raise ShapeError(f"body image size {body.shape[:2]} != {(h, w)}")
    out = np.array(body, dtype=dtype, copy=True)
    if head is not None:
        out = head.color + (1 - head.alpha)[..., None] * out
    if anchor is not None:
        out = anchor.color + (1 - anchor.alpha)[..., None] * out
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return Framebuffer(out, tuple(background))


def composite_backward(anchor, head, body, d_out, pre_clamp=None):
    """Gradients of :func:`composite` (before the final clamp is applied).

    ``pre_clamp`` is the unclamped output; where it lies outside [0, 1] the
    gradient is zero. Returns a dict with keys ``anchor_color``,
    ``anchor_alpha``, ``head_color``, ``head_alpha``, ``body`` (``None``
    entries for absent layers).
    """
    g = d_out
    if pre_clamp is not None:
        g = np.where((pre_clamp >= 0) & (pre_clamp <= 1), g, 0.0)
    res = {"anchor_color": None, "anchor_alpha": None, "head_color": None,
           "head_alpha": None, "body": None}
    under_anchor = body
    if head is not None:
        under_anchor = head.color + (1 - head.alpha)[..., None] * body
    if anchor is not None:
        res["anchor_color"] = g
        res["anchor_alpha"] = -np.sum(g * under_anchor, axis=-1)
        g = (1 - anchor.alpha)[..., None] * g
    if head is not None:
        res["head_color"] = g
        res["head_alpha"] = -np.sum(g * body, axis=-1)
        g = (1 - head.alpha)[..., None] * g
    res["body"] = g
    return res


# ---------------------------------------------------------------------------
# image files

def to_uint8(img):
    return (np.clip(np.asarray(img, dtype=float), 0, 1) * 255 + 0.5).astype(np.uint8)


def write_png(path, img):
    from PIL import Image

    arr = to_uint8(img)
    Image.fromarray(arr).save(path)


def read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def write_pfm(path, img):
    """Little-endian PFM (``PF`` colour or ``Pf`` greyscale), top row first."""
    img = np.asarray(img, dtype="<f4")
    color = img.ndim == 3
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        # PFM stores rows bottom-to-top
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(w * h * ch * 4), dtype=dtype)
    shape = (h, w, 3) if ch == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)
