"""Skeletal rig, per-frame parameters, and neural linear blend skinning.

Each Gaussian asks a small coordinate MLP (the deformation net) for its own
expression blendshapes ``E (n_e, 3)``, pose blendshapes ``P (n_p*9, 3)`` and
skinning weights ``w (n_j,)``. With the frame's bone transforms ``G_j`` the
skinned mean is::

    M = sum_j w_j G_j,   R = M[:, :3],   T = R (psi E + f(theta) P) + M[:, 3]
    mu_d = R mu + T,     Sigma_d = R Sigma R^T

where ``f(theta)`` stacks ``R_j - I`` of every posed joint.
"""

from dataclasses import dataclass, field

import numpy as np

from .coremath import axis_angle_to_rot
from .errors import InvalidAsset, ShapeError
from .gaussmodel import Camera
from .nn import MLP

LANDMARK_SLOTS = ("neck", "left_shoulder", "right_shoulder", "nose")


@dataclass
class Rig:
    """FLAME-like skeleton plus a reference mesh for pseudo ground truth.

    ``theta`` in a frame holds one axis-angle per entry of ``pose_joints``.
    Joint ``static_bone`` never moves. ``joint_regressor`` maps expression
    coefficients to joint offsets: ``J(psi) = rest_joints + (reg @ psi)``.
    """

    joint_names: list
    parents: np.ndarray
    rest_joints: np.ndarray
    joint_regressor: np.ndarray
    pose_joints: np.ndarray
    headneck: np.ndarray
    static_bone: int
    ref_verts: np.ndarray
    ref_weights: np.ndarray
    ref_expr: np.ndarray
    ref_pose: np.ndarray

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.pose_joints = np.asarray(self.pose_joints, dtype=np.int64)
        self.headneck = np.asarray(self.headneck, dtype=np.int64)
        nj = len(self.parents)
        if self.rest_joints.shape != (nj, 3):
            raise ShapeError("rest_joints must be (n_joints, 3)")
        if self.joint_regressor.shape[0] != nj * 3:
            raise ShapeError("joint_regressor must be (3 n_joints, n_expr)")
        for j, p in enumerate(self.parents):
            if p >= j:
                raise ShapeError("parents must precede children (tree in topological order)")
        if self.static_bone in self.pose_joints or self.parents[self.static_bone] != -1:
            raise ShapeError("the static bone must be a root without pose parameters")

    @property
    def n_joints(self):
        return len(self.parents)

    @property
    def n_expr(self):
        return self.joint_regressor.shape[1]

    @property
    def n_pose(self):
        return len(self.pose_joints)

    @property
    def deform_dim(self):
        return self.n_expr * 3 + self.n_pose * 27 + self.n_joints


@dataclass
class FrameParams:
    """Per-frame driving signal.

    ``ldmk`` has one row per :data:`LANDMARK_SLOTS` entry; a missing nose is
    stored as NaN.
    """

    theta: np.ndarray
    psi: np.ndarray
    cam: Camera
    ldmk: np.ndarray
    index: int = 0
    timestamp: float = 0.0
    image: np.ndarray = None
    head_mask: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        self.psi = np.asarray(self.psi, dtype=float).ravel()
        self.ldmk = np.asarray(self.ldmk, dtype=float).reshape(-1, 2)

    def with_params(self, **kw):
        d = dict(theta=self.theta, psi=self.psi, cam=self.cam, ldmk=self.ldmk, index=self.index,
                 timestamp=self.timestamp, image=self.image, head_mask=self.head_mask,
                 extra=self.extra)
        d.update(kw)
        return FrameParams(**d)


# ---------------------------------------------------------------------------
# kinematics

def bone_transforms(rig, theta, psi):
    """Skinning transforms ``G (n_j, 3, 4)``, pose features and joint positions.

    ``G_j`` maps canonical points to posed points for bone ``j``. Generic in
    dtype so it can be pushed through complex-step differentiation.
    """
    theta = np.asarray(theta).reshape(rig.n_pose, 3)
    psi = np.asarray(psi)
    dtype = np.result_type(theta.dtype, psi.dtype, np.float64)
    joints = rig.rest_joints + (rig.joint_regressor @ psi).reshape(rig.n_joints, 3)
    local = np.broadcast_to(np.eye(3, dtype=dtype), (rig.n_joints, 3, 3)).copy()
    local[rig.pose_joints] = axis_angle_to_rot(theta.astype(dtype))
    A_rot = np.zeros((rig.n_joints, 3, 3), dtype)
    A_t = np.zeros((rig.n_joints, 3), dtype)
    for j in range(rig.n_joints):
        p = rig.parents[j]
        if p < 0:
            A_rot[j] = local[j]
            A_t[j] = joints[j]
        else:
            A_rot[j] = A_rot[p] @ local[j]
            A_t[j] = A_rot[p] @ (joints[j] - joints[p]) + A_t[p]
    G = np.zeros((rig.n_joints, 3, 4), dtype)
    G[:, :, :3] = A_rot
    G[:, :, 3] = A_t - np.einsum("jab,jb->ja", A_rot, joints)
    G[rig.static_bone] = np.eye(3, 4)
    pose_feat = (local[rig.pose_joints] - np.eye(3)).reshape(-1)
    return G, pose_feat, joints


def bone_transforms_jacobian(rig, theta, psi):
    """Jacobians of ``(G, pose_feat)`` w.r.t. ``theta`` and ``psi``.

    Uses complex-step differentiation, which is exact to machine precision
    for this analytic map. Returns ``(dG_dtheta, dpf_dtheta, dG_dpsi,
    dpf_dpsi)`` with the parameter axis last.
    """
    theta = np.asarray(theta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    h = 1e-30

    def jac(vec, which):
        outs_G, outs_f = [], []
        for i in range(len(vec)):
            v = vec.astype(complex)
            v[i] += 1j * h
            if which == "theta":
                G, f, _ = bone_transforms(rig, v, psi.astype(complex))
            else:
                G, f, _ = bone_transforms(rig, theta.astype(complex), v)
            outs_G.append(G.imag / h)
            outs_f.append(f.imag / h)
        if not outs_G:
            G0, f0, _ = bone_transforms(rig, theta, psi)
            return np.zeros(G0.shape + (0,)), np.zeros(f0.shape + (0,))
        return np.stack(outs_G, axis=-1), np.stack(outs_f, axis=-1)

    dG_t, df_t = jac(theta, "theta")
    dG_p, df_p = jac(psi, "psi")
    return dG_t, df_t, dG_p, df_p


# ---------------------------------------------------------------------------
# deformation network

class DeformNet:
    """Coordinate MLP predicting per-point blendshapes and skinning weights."""

    def __init__(self, rig, hidden=128, depth=4, rng=None, dtype=np.float32):
        self.n_e = rig.n_expr
        self.n_p = rig.n_pose
        self.n_j = rig.n_joints
        self.mlp = MLP(3, rig.deform_dim, hidden, depth, rng=rng, dtype=dtype)

    def split(self, out):
        n = len(out)
        a = self.n_e * 3
        b = a + self.n_p * 27
        E = out[:, :a].reshape(n, self.n_e, 3)
        P = out[:, a:b].reshape(n, self.n_p * 9, 3)
        logits = out[:, b:]
        return E, P, logits

    def forward(self, mu):
        out, cache = self.mlp.forward(mu)
        E, P, logits = self.split(out)
        w = softmax(logits)
        return E, P, w, cache

    def __call__(self, mu):
        E, P, w, _ = self.forward(np.atleast_2d(mu))
        return E, P, w

    def backward(self, cache, w, dE, dP, dw, need_input=False):
        n = len(w)
        dlogits = softmax_backward(w, dw)
        d_out = np.concatenate([dE.reshape(n, -1), dP.reshape(n, -1), dlogits], axis=1)
        grads, d_mu, _ = self.mlp.backward(cache, d_out, need_input=need_input)
        return grads, d_mu


def deform_net_eval(net, mu):
    """``(E, P, W)`` for a single mean ``(3,)`` or a batch ``(N, 3)``."""
    mu = np.asarray(mu)
    E, P, w = net(mu)
    if mu.ndim == 1:
        return E[0], P[0], w[0]
    return E, P, w


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(w, dw):
    return w * (dw - np.sum(w * dw, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# skinning

@dataclass
class Posed:
    """Per-frame rig state shared by every point deformed in that frame."""

    G: np.ndarray
    pose_feat: np.ndarray
    psi: np.ndarray


def pose_rig(rig, frame, dtype=np.float64):
    G, pf, _ = bone_transforms(rig, frame.theta, frame.psi)
    return Posed(G.astype(dtype), pf.astype(dtype), np.asarray(frame.psi, dtype))


def lbs(posed, mu, E, P, w):
    """Batched skinning. Returns ``(R, T, mu_d, offsets)``."""
    offsets = np.einsum("e,ned->nd", posed.psi, E) + np.einsum("f,nfd->nd", posed.pose_feat, P)
    M = np.einsum("nj,jab->nab", w, posed.G)
    R = M[:, :, :3]
    T = np.einsum("nab,nb->na", R, offsets) + M[:, :, 3]
    mu_d = np.einsum("nab,nb->na", R, mu) + T
    return R, T, mu_d, offsets


def lbs_transform(rig, frame, mu, E, P, Wlbs):
    """Blended bone transform ``(R, T)`` for a single point."""
    posed = pose_rig(rig, frame)
    R, T, _, _ = lbs(posed, np.atleast_2d(mu), np.asarray(E)[None], np.asarray(P)[None],
                     np.asarray(Wlbs)[None])
    return R[0], T[0]


def lbs_backward(posed, mu, E, P, w, offsets, R, d_mu_d, d_R):
    """Gradients of :func:`lbs` outputs ``mu_d`` and ``R`` (full-matrix).

    Returns dict with ``mu``, ``E``, ``P``, ``w``, ``G``, ``psi``, ``pose_feat``.
    """
    v = mu + offsets
    dR = d_R + d_mu_d[:, :, None] * v[:, None, :]
    d_v = np.einsum("nab,na->nb", R, d_mu_d)
    dM = np.concatenate([dR, d_mu_d[:, :, None]], axis=2)
    dw = np.einsum("nab,jab->nj", dM, posed.G)
    dG = np.einsum("nab,nj->jab", dM, w)
    dE = posed.psi[None, :, None] * d_v[:, None, :]
    dP = posed.pose_feat[None, :, None] * d_v[:, None, :]
    return {
        "mu": d_v, "E": dE, "P": dP, "w": dw, "G": dG,
        "psi": np.einsum("ned,nd->e", E, d_v),
        "pose_feat": np.einsum("nfd,nd->f", P, d_v),
    }


@dataclass
class Deformed:
    mu: np.ndarray
    cov: np.ndarray
    R: np.ndarray
    T: np.ndarray


def deform_gaussians(gaussians, rig, frame, net, cov=None):
    """Skin a Gaussian set into the frame's view space.

    Returns a :class:`Deformed` with ``mu_d = R mu + T`` and
    ``Sigma_d = R Sigma R^T``; opacity and SH are unchanged by skinning.
    """
    from .gaussmodel import build_covariance

    if cov is None:
        cov = build_covariance(gaussians.scale, gaussians.quat)
    E, P, w, _ = net.forward(gaussians.mu)
    posed = pose_rig(rig, frame, dtype=gaussians.mu.dtype)
    R, T, mu_d, _ = lbs(posed, gaussians.mu, E, P, w)
    return Deformed(mu_d, R @ cov @ np.swapaxes(R, -1, -2), R, T)


# ---------------------------------------------------------------------------
# pseudo ground truth

def pseudo_gt_lookup(rig, mu):
    """Blendshapes and weights copied from the nearest reference vertex."""
    mu = np.asarray(mu)
    single = mu.ndim == 1
    idx = nearest_vertex_exact(rig.ref_verts, np.atleast_2d(mu))
    E, P, W = rig.ref_expr[idx], rig.ref_pose[idx], rig.ref_weights[idx]
    if single:
        return E[0], P[0], W[0]
    return E, P, W


def nearest_vertex_exact(verts, points, chunk=2048):
    """Brute-force nearest vertex using exact squared differences."""
    verts = np.asarray(verts, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if len(verts) == 0:
        raise InvalidAsset("reference mesh has no vertices")
    out = np.empty(len(points), dtype=np.int64)
    step = max(1, chunk * 64 // max(len(verts), 1))
    for s in range(0, len(points), step):
        p = points[s:s + step]
        d = np.sum((p[:, None, :] - verts[None, :, :]) ** 2, axis=2)
        out[s:s + step] = np.argmin(d, axis=1)
    return out
