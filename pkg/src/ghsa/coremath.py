"""Small numeric kernels shared by the rest of the package.

Everything here is pure numpy and works on batches where it makes sense.
Functions that sit on the training path come with a ``*_backward`` twin that
maps an upstream gradient to gradients of the inputs.
"""

import numpy as np

from .errors import DegenerateConfiguration, InvalidArgument, InvalidQuaternion, ShapeError

# Real spherical harmonics constants (degree 0..3), same ordering as the
# reference splatting rasterizer.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


# ---------------------------------------------------------------------------
# rotations

def quat_to_rot(q):
    """Rotation matrix for a quaternion ``(w, x, y, z)``.

    Accepts a single quaternion ``(4,)`` or a batch ``(N, 4)``. The input is
    normalised first; a zero quaternion raises :class:`InvalidQuaternion`.
    """
    q = np.asarray(q)
    if q.shape[-1] != 4:
        raise ShapeError(f"quaternion must have 4 components, got shape {q.shape}")
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise InvalidQuaternion("zero-norm quaternion")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def quat_to_rot_backward(q, dR):
    """Gradient of a loss w.r.t. the raw (unnormalised) quaternion."""
    q = np.asarray(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = np.moveaxis(u, -1, 0)
    g = dR.reshape(dR.shape[:-2] + (9,))
    g00, g01, g02, g10, g11, g12, g20, g21, g22 = np.moveaxis(g, -1, 0)
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12
              + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12
              - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11
              + y * g12 + x * g20 + y * g21)
    du = np.stack([dw, dx, dy, dz], axis=-1)
    # project out the radial component: d(q/|q|)/dq = (I - u u^T)/|q|
    return (du - u * np.sum(du * u, axis=-1, keepdims=True)) / norm


def axis_angle_to_rot(v):
    """Rodrigues' formula for axis-angle vectors ``(..., 3)``.

    Works for complex input too, which the rig uses for complex-step
    derivatives of the kinematic chain.
    """
    v = np.asarray(v)
    theta2 = np.sum(v * v, axis=-1)[..., None, None]
    K = np.zeros(v.shape[:-1] + (3, 3), dtype=v.dtype)
    K[..., 0, 1] = -v[..., 2]
    K[..., 0, 2] = v[..., 1]
    K[..., 1, 0] = v[..., 2]
    K[..., 1, 2] = -v[..., 0]
    K[..., 2, 0] = -v[..., 1]
    K[..., 2, 1] = v[..., 0]
    small = np.abs(theta2) < 1e-12
    safe = np.where(small, 1.0, theta2)
    theta = np.sqrt(safe)
    # Taylor branch keeps small angles (and complex steps around 0) exact
    a = np.where(small, 1 - theta2 / 6, np.sin(theta) / theta)
    b = np.where(small, 0.5 - theta2 / 24, (1 - np.cos(theta)) / safe)
    eye = np.broadcast_to(np.eye(3, dtype=v.dtype), K.shape)
    return eye + a * K + b * (K @ K)


# ---------------------------------------------------------------------------
# positional encoding

def positional_encode(x, num_frequencies, include_input=False):
    """NeRF-style Fourier features.

    For every input component ``x_d`` emits ``sin(2^k pi x_d), cos(2^k pi x_d)``
    for ``k = 0..L-1`` (grouped per component), optionally preceded by the raw
    value. Output has ``D * (2L + include_input)`` features.
    """
    if num_frequencies < 0:
        raise InvalidArgument("number of frequencies must be >= 0")
    x = np.asarray(x)
    freqs = (2.0 ** np.arange(num_frequencies)) * np.pi
    arg = x[..., :, None] * freqs.astype(x.dtype if x.dtype.kind == "f" else float)
    enc = np.stack([np.sin(arg), np.cos(arg)], axis=-1)
    enc = enc.reshape(x.shape + (2 * num_frequencies,))
    if include_input:
        enc = np.concatenate([x[..., None], enc], axis=-1)
    return enc.reshape(x.shape[:-1] + (-1,))


def positional_encode_backward(x, num_frequencies, d_enc, include_input=False):
    """Gradient of the encoding w.r.t. its input."""
    x = np.asarray(x)
    per = 2 * num_frequencies + int(include_input)
    g = d_enc.reshape(x.shape + (per,))
    freqs = (2.0 ** np.arange(num_frequencies)) * np.pi
    arg = x[..., :, None] * freqs
    off = int(include_input)
    gs = g[..., off::2][..., :num_frequencies]
    gc = g[..., off + 1::2][..., :num_frequencies]
    dx = np.sum(freqs * (np.cos(arg) * gs - np.sin(arg) * gc), axis=-1)
    if include_input:
        dx = dx + g[..., 0]
    return dx


# ---------------------------------------------------------------------------
# spherical harmonics

def sh_degree_of(num_coeffs):
    degree = int(round(np.sqrt(num_coeffs))) - 1
    if (degree + 1) ** 2 != num_coeffs or degree > 3:
        raise ShapeError(f"{num_coeffs} SH coefficients is not a supported degree")
    return degree


def sh_basis(dirs, degree):
    """Real SH basis ``(..., (degree+1)^2)`` and its Jacobian w.r.t. ``dirs``."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    b = [SH_C0 * one]
    db = [(zero, zero, zero)]
    if degree >= 1:
        b += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
        db += [(zero, -SH_C1 * one, zero), (zero, zero, SH_C1 * one),
               (-SH_C1 * one, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        c = SH_C2
        b += [c[0] * x * y, c[1] * y * z, c[2] * (2 * zz - xx - yy), c[3] * x * z,
              c[4] * (xx - yy)]
        db += [(c[0] * y, c[0] * x, zero),
               (zero, c[1] * z, c[1] * y),
               (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z),
               (c[3] * z, zero, c[3] * x),
               (2 * c[4] * x, -2 * c[4] * y, zero)]
    if degree >= 3:
        c = SH_C3
        b += [c[0] * y * (3 * xx - yy),
              c[1] * x * y * z,
              c[2] * y * (4 * zz - xx - yy),
              c[3] * z * (2 * zz - 3 * xx - 3 * yy),
              c[4] * x * (4 * zz - xx - yy),
              c[5] * z * (xx - yy),
              c[6] * x * (xx - 3 * yy)]
        db += [(6 * c[0] * x * y, c[0] * (3 * xx - 3 * yy), zero),
               (c[1] * y * z, c[1] * x * z, c[1] * x * y),
               (-2 * c[2] * x * y, c[2] * (4 * zz - xx - 3 * yy), 8 * c[2] * y * z),
               (-6 * c[3] * x * z, -6 * c[3] * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
               (c[4] * (4 * zz - 3 * xx - yy), -2 * c[4] * x * y, 8 * c[4] * x * z),
               (2 * c[5] * x * z, -2 * c[5] * y * z, c[5] * (xx - yy)),
               (c[6] * (3 * xx - 3 * yy), -6 * c[6] * x * y, zero)]
    basis = np.stack(b, axis=-1)
    jac = np.stack([np.stack(d, axis=-1) for d in db], axis=-2)
    return basis, jac


def _as_sh_matrix(sh):
    sh = np.asarray(sh)
    if sh.ndim >= 2 and sh.shape[-1] == 3 and sh.shape[-2] in (1, 4, 9, 16):
        return sh
    if sh.shape[-1] % 3:
        raise ShapeError(f"SH vector length {sh.shape[-1]} is not a multiple of 3")
    out = sh.reshape(sh.shape[:-1] + (-1, 3))
    sh_degree_of(out.shape[-2])
    return out


def sh_to_rgb(sh, direction):
    """View-dependent colour ``0.5 + sum_k c_k Y_k(dir)`` clamped at zero.

    ``sh`` is ``(..., K, 3)`` or a flat ``(..., 3K)`` vector with the three
    channels interleaved per coefficient; ``direction`` must be unit length.
    """
    sh = _as_sh_matrix(sh)
    degree = sh_degree_of(sh.shape[-2])
    direction = np.asarray(direction)
    if direction.shape[-1] != 3:
        raise ShapeError("direction must be a 3-vector")
    basis, _ = sh_basis(direction, degree)
    rgb = 0.5 + np.einsum("...k,...kc->...c", basis, sh)
    return np.maximum(rgb, 0.0)


def sh_to_rgb_backward(sh, direction, d_rgb):
    """Returns ``(d_sh, d_direction)`` for :func:`sh_to_rgb`."""
    sh = _as_sh_matrix(sh)
    degree = sh_degree_of(sh.shape[-2])
    basis, jac = sh_basis(direction, degree)
    raw = 0.5 + np.einsum("...k,...kc->...c", basis, sh)
    g = np.where(raw > 0, d_rgb, 0.0)
    d_sh = basis[..., :, None] * g[..., None, :]
    d_dir = np.einsum("...kc,...c,...kd->...d", sh, g, jac)
    return d_sh, d_dir


def normalize_backward(v, d_unit):
    """Gradient of ``v / |v|`` along the last axis."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / n
    return (d_unit - u * np.sum(d_unit * u, axis=-1, keepdims=True)) / n


# ---------------------------------------------------------------------------
# sampling

def farthest_point_sample(points, k, seed_index=0):
    """Greedy farthest point sampling.

    Starts from ``seed_index`` and repeatedly picks the point whose distance to
    the already selected set is largest. Ties resolve to the lowest index.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    if k > n or k < 0:
        raise InvalidArgument(f"cannot select {k} of {n} points")
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    if not 0 <= seed_index < n:
        raise InvalidArgument(f"seed index {seed_index} out of range")
    selected = np.empty(k, dtype=np.int64)
    selected[0] = seed_index
    dist = np.sum((points - points[seed_index]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        selected[i] = nxt
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
    return selected


def _corner_weights(shape, xy):
    h, w = shape[:2]
    x = np.clip(xy[..., 0], 0, w - 1)
    y = np.clip(xy[..., 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    return x, y, x0, y0, x1, y1, fx, fy


def bilinear_sample(tex, xy):
    """Bilinear lookup with clamp-to-edge addressing.

    ``tex`` is ``(H, W, C)``; ``xy`` holds ``(x, y)`` pixel coordinates with
    texel centres on integers (``x`` indexes columns). Returns ``(..., C)``.
    """
    tex = np.asarray(tex)
    xy = np.asarray(xy)
    _, _, x0, y0, x1, y1, fx, fy = _corner_weights(tex.shape, xy)
    fx = fx[..., None]
    fy = fy[..., None]
    top = tex[y0, x0] * (1 - fx) + tex[y0, x1] * fx
    bot = tex[y1, x0] * (1 - fx) + tex[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def bilinear_sample_backward(tex_shape, tex, xy, d_out, need_tex=True):
    """Gradients of :func:`bilinear_sample`.

    Returns ``(d_tex, d_xy)``; ``d_tex`` is ``None`` when ``need_tex`` is false.
    Coordinates clamped to the edge receive zero gradient on that axis.
    """
    h, w = tex_shape[:2]
    x, y, x0, y0, x1, y1, fx, fy = _corner_weights(tex_shape, xy)
    g = d_out.reshape(-1, d_out.shape[-1])
    fxf = fx.reshape(-1, 1)
    fyf = fy.reshape(-1, 1)
    d_tex = None
    if need_tex:
        d_tex = np.zeros(tex_shape, dtype=d_out.dtype)
        flat = d_tex.reshape(-1, tex_shape[2])
        i00 = (y0 * w + x0).ravel()
        i01 = (y0 * w + x1).ravel()
        i10 = (y1 * w + x0).ravel()
        i11 = (y1 * w + x1).ravel()
        idx = np.concatenate([i00, i01, i10, i11])
        vals = np.concatenate([g * (1 - fxf) * (1 - fyf), g * fxf * (1 - fyf),
                               g * (1 - fxf) * fyf, g * fxf * fyf])
        np.add.at(flat, idx, vals)
    t00 = tex[y0, x0]
    t01 = tex[y0, x1]
    t10 = tex[y1, x0]
    t11 = tex[y1, x1]
    dfx = np.sum(d_out * ((t01 - t00) * (1 - fy[..., None]) + (t11 - t10) * fy[..., None]), axis=-1)
    dfy = np.sum(d_out * ((t10 - t00) * (1 - fx[..., None]) + (t11 - t01) * fx[..., None]), axis=-1)
    inside_x = (xy[..., 0] >= 0) & (xy[..., 0] <= w - 1) & (w > 1)
    inside_y = (xy[..., 1] >= 0) & (xy[..., 1] <= h - 1) & (h > 1)
    d_xy = np.stack([np.where(inside_x, dfx, 0.0), np.where(inside_y, dfy, 0.0)], axis=-1)
    return d_tex, d_xy.astype(d_out.dtype, copy=False)


# ---------------------------------------------------------------------------
# homographies

def hartley_normalization(pts):
    """Similarity ``T`` moving ``pts`` to zero mean and mean distance sqrt(2)."""
    pts = np.asarray(pts, dtype=float)
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    if d < 1e-15:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def apply_homography(H, pts):
    pts = np.asarray(pts, dtype=float)
    ph = pts @ H[:, :2].T + H[:, 2]
    return ph[..., :2] / ph[..., 2:3]


def svd_least_squares_homography(src, dst, rank_tol=1e-10):
    """Homography mapping ``src`` onto ``dst`` by normalised DLT.

    Minimises the algebraic error through the SVD of the stacked design
    matrix. The result is scaled so ``H[2, 2] == 1`` when that entry is not
    vanishing, otherwise to unit Frobenius norm.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ShapeError("src and dst must both be (N, 2)")
    n = len(src)
    if n < 4:
        raise DegenerateConfiguration(f"need at least 4 correspondences, got {n}")
    Ts = hartley_normalization(src)
    Td = hartley_normalization(dst)
    s = src @ Ts[:2, :2].T + Ts[:2, 2]
    d = dst @ Td[:2, :2].T + Td[:2, 2]
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    one = np.ones(n)
    zero = np.zeros(n)
    A = np.empty((2 * n, 9))
    A[0::2] = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=1)
    A[1::2] = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=1)
    _, sv, vt = np.linalg.svd(A)
    if sv[7] <= rank_tol * sv[0]:
        raise DegenerateConfiguration("design matrix is rank deficient")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.solve(Td, Hn @ Ts)
    return normalize_homography(H)


def normalize_homography(H):
    H = np.asarray(H, dtype=float)
    scale = np.linalg.norm(H)
    if abs(H[2, 2]) > 1e-12 * scale:
        return H / H[2, 2]
    return H / scale


def procrustes_2d(src, dst):
    """Least-squares rotation + translation (no scale) taking src onto dst.

    Returns ``(R, t)`` with ``R`` a proper 2x2 rotation.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    M = (dst - cd).T @ (src - cs)
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return R, cd - R @ cs
