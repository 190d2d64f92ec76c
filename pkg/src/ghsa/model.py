"""The hybrid avatar: head Gaussians, anchor Gaussians and a warped neural
body texture, with one differentiable render pass per frame.

:func:`forward` renders a frame and keeps every intermediate needed by
:meth:`RenderPass.backward`, which maps gradients on the image (and on the
auxiliary quantities the losses touch) to gradients on every parameter.
"""

from dataclasses import dataclass, field

import numpy as np

from .anchors import AnchorSet
from .coremath import (normalize_backward, sh_basis, sh_degree_of)
from .gaussmodel import (GaussianSet, build_covariance, build_covariance_backward,
                         conic_backward, conic_from_cov2d, project_gaussians,
                         project_gaussians_backward, to_camera, to_camera_backward)
from .neuraltex import (NeuralTexture, FineNet, WarpNet, encode_pixels, frame_encoding,
                        frame_encoding_backward, frame_encoding_dim, pixel_grid,
                        textured_color, textured_color_backward, warp, warp_backward)
from .renderer import (RenderLayer, composite, composite_backward, splat_layer,
                       splat_layer_backward)
from .rig import DeformNet, bone_transforms_jacobian, lbs, lbs_backward, pose_rig


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p, eps=1e-6):
    p = np.clip(p, eps, 1 - eps)
    return np.log(p / (1 - p))


@dataclass
class HeadParams:
    """Optimiser-side parameterisation of the regular Gaussians."""

    mu: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    logit_op: np.ndarray
    sh: np.ndarray

    @classmethod
    def from_gaussians(cls, g, dtype=None):
        dtype = dtype or g.mu.dtype
        return cls(np.array(g.mu, dtype), np.log(g.scale).astype(dtype),
                   np.array(g.quat, dtype), logit(g.opacity).astype(dtype),
                   np.array(g.sh, dtype))

    def gaussians(self):
        return GaussianSet(self.mu, np.exp(self.log_scale), self.quat,
                           sigmoid(self.logit_op), self.sh)

    def __len__(self):
        return len(self.mu)

    def subset(self, index):
        return HeadParams(self.mu[index], self.log_scale[index], self.quat[index],
                          self.logit_op[index], self.sh[index])

    def arrays(self):
        return {"mu": self.mu, "log_scale": self.log_scale, "quat": self.quat,
                "logit_op": self.logit_op, "sh": self.sh}


class Avatar:
    """All learnable state plus the rig it is driven by."""

    def __init__(self, rig, head, deform, tex, wnet, fnet, anchors=None, canonical=0,
                 include_nose=False):
        self.rig = rig
        self.head = head
        self.deform = deform
        self.tex = tex
        self.wnet = wnet
        self.fnet = fnet
        self.anchors = anchors
        self.canonical = canonical
        self.include_nose = include_nose
        self._pix_cache = {}

    @classmethod
    def create(cls, rig, gaussians, height, width, padding=50, latent_dim=32, hidden=128,
               tex_hidden=128, depth=4, seed=0, dtype=np.float32, include_nose=False):
        ss = np.random.SeedSequence(seed)
        r_d, r_t, r_w, r_f = (np.random.default_rng(s) for s in ss.spawn(4))
        fdim = frame_encoding_dim(rig, include_nose)
        return cls(
            rig,
            HeadParams.from_gaussians(gaussians, dtype),
            DeformNet(rig, hidden, depth, rng=r_d, dtype=dtype),
            NeuralTexture.create(height, width, padding, latent_dim, rng=r_t, dtype=dtype),
            WarpNet(fdim, tex_hidden, depth, rng=r_w, dtype=dtype),
            FineNet(latent_dim, fdim, tex_hidden, depth, rng=r_f, dtype=dtype),
            include_nose=include_nose,
        )

    @property
    def dtype(self):
        return self.head.mu.dtype

    def pixel_inputs(self, height, width):
        key = (height, width, self.dtype)
        if key not in self._pix_cache:
            xy = pixel_grid(height, width, self.dtype)
            self._pix_cache[key] = (xy, encode_pixels(xy, self.tex.height, self.tex.width))
        return self._pix_cache[key]

    def frame_encoding(self, frame):
        return frame_encoding(frame, self.rig, self.include_nose).astype(self.dtype)

    def parameters(self):
        """Flat ``name -> array`` view of every parameter (in-place updatable)."""
        p = {f"head.{k}": v for k, v in self.head.arrays().items()}
        if self.anchors is not None:
            a = self.anchors
            p.update({"anchor.mu": a.mu, "anchor.scale": a.scale, "anchor.rgb": a.rgb,
                      "anchor.opacity": a.opacity})
        p.update({f"deform.{k}": v for k, v in self.deform.mlp.parameters().items()})
        p.update({f"warp.{k}": v for k, v in self.wnet.mlp.parameters().items()})
        p.update({f"fine.{k}": v for k, v in self.fnet.mlp.parameters().items()})
        p["tex.coarse"] = self.tex.coarse
        p["tex.latent"] = self.tex.latent
        return p

    def astype(self, dtype):
        h = self.head
        self.head = HeadParams(*(np.asarray(v, dtype) for v in
                                 (h.mu, h.log_scale, h.quat, h.logit_op, h.sh)))
        if self.anchors is not None:
            a = self.anchors
            self.anchors = AnchorSet(a.mu.astype(dtype), a.scale.astype(dtype),
                                     a.rgb.astype(dtype), a.opacity.astype(dtype),
                                     a.target_uv.copy())
        for net in (self.deform, self.wnet, self.fnet):
            net.mlp.astype(dtype)
        self.tex.coarse = self.tex.coarse.astype(dtype)
        self.tex.latent = self.tex.latent.astype(dtype)
        self._pix_cache = {}
        return self


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class Geometry:
    """Skinned, projected splats for one group of Gaussians."""

    n: int
    mu_d: np.ndarray
    cov: np.ndarray
    cov_d: np.ndarray
    mu_c: np.ndarray
    cov_c: np.ndarray
    mu2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    valid: np.ndarray


@dataclass
class RenderPass:
    avatar: Avatar
    frame: object
    stage: int
    image: np.ndarray
    pre_clamp: np.ndarray
    head_layer: RenderLayer
    anchor_layer: RenderLayer = None
    body: np.ndarray = None
    delta: np.ndarray = None
    anchor_xt: np.ndarray = None
    anchor_mu2d: np.ndarray = None
    anchor_valid: np.ndarray = None
    E: np.ndarray = None
    P: np.ndarray = None
    w: np.ndarray = None
    cache: dict = field(default_factory=dict)

    @property
    def n_head(self):
        return len(self.avatar.head)

    def backward(self, d_image, d_head_alpha=None, d_delta=None, d_E=None, d_P=None,
                 d_w=None, d_anchor_xt=None, frame_grads=False):
        """Accumulate parameter gradients.

        ``d_head_alpha`` is an extra gradient on the head layer's alpha,
        ``d_delta`` one on the per-pixel warp offsets, ``d_E/d_P/d_w`` act on
        the deformation-net outputs of all (head then anchor) points, and
        ``d_anchor_xt`` on the warped anchor pixels used by the anchor loss.
        Returns a dict keyed like :meth:`Avatar.parameters`; with
        ``frame_grads`` it also holds ``frame.theta``, ``frame.psi``,
        ``frame.t`` and ``frame.ldmk``.
        """
        av = self.avatar
        c = self.cache
        dt = av.dtype
        grads = {}
        h, w_ = self.image.shape[:2]
        cg = composite_backward(self.anchor_layer, self.head_layer,
                                self.body if self.body is not None else c["bg"],
                                d_image, self.pre_clamp)
        d_head_alpha_tot = cg["head_alpha"]
        if d_head_alpha is not None:
            d_head_alpha_tot = d_head_alpha_tot + d_head_alpha

        n_h = self.n_head
        n_a = c["n_anchor"]
        n_all = n_h + n_a
        d_mu_d = np.zeros((n_all, 3), dt)
        d_R = np.zeros((n_all, 3, 3), dt)
        d_fenc = np.zeros_like(c["fenc"])
        d_campos = np.zeros(3)
        d_camt = np.zeros(3)

        # head layer
        gh = c["head_geo"]
        d_mu2d, d_conic, d_rgb, d_op = splat_layer_backward(c["head_state"], cg["head_color"],
                                                            d_head_alpha_tot)
        c["head_mu2d_grad"] = d_mu2d
        dm, dcov_d, dct = self._geometry_backward(gh, d_mu2d, d_conic)
        d_camt += dct
        d_mu_d[:n_h] += dm
        # SH colour
        sh = av.head.sh
        basis, jac = c["sh_basis"]
        g_rgb = np.where(c["sh_raw"] > 0, d_rgb, 0.0)
        grads["head.sh"] = (basis[:, :, None] * g_rgb[:, None, :]).astype(dt)
        d_dir = np.einsum("nkc,nc,nkd->nd", sh, g_rgb, jac)
        d_view = normalize_backward(c["view_vec"], d_dir)
        d_mu_d[:n_h] += d_view
        d_campos -= d_view.sum(axis=0)
        op = c["head_opacity"]
        grads["head.logit_op"] = (d_op * op * (1 - op)).astype(dt)
        # cov_d = R cov R^T
        Rh = c["R"][:n_h]
        cov = gh.cov
        sym = dcov_d + np.swapaxes(dcov_d, 1, 2)
        d_R[:n_h] += sym @ Rh @ cov
        d_cov = np.swapaxes(Rh, 1, 2) @ dcov_d @ Rh
        scale = c["head_scale"]
        d_scale, d_quat = build_covariance_backward(scale, av.head.quat, d_cov)
        grads["head.log_scale"] = (d_scale * scale).astype(dt)
        grads["head.quat"] = d_quat.astype(dt)

        # anchors
        if n_a:
            ga = c["anchor_geo"]
            a = av.anchors
            Ra = c["R"][n_h:]
            d_mu2d_a = np.zeros((n_a, 2), dt)
            d_conic_a = np.zeros((n_a, 3), dt)
            grads["anchor.rgb"] = np.zeros_like(a.rgb)
            grads["anchor.opacity"] = np.zeros_like(a.opacity)
            if self.anchor_layer is not None:
                dm2, dcn, drgb, dop = splat_layer_backward(c["anchor_state"], cg["anchor_color"],
                                                           cg["anchor_alpha"])
                d_mu2d_a += dm2
                d_conic_a += dcn
                grads["anchor.rgb"] = drgb.astype(dt)
                grads["anchor.opacity"] = dop.astype(dt)
            if d_anchor_xt is not None:
                gw, dfe, dview = warp_backward(c["anchor_warp_cache"], self.anchor_mu2d,
                                               av.tex.height, av.tex.width, av.wnet,
                                               d_anchor_xt.astype(dt))
                _accumulate(grads, "warp.", gw)
                d_fenc += dfe
                d_mu2d_a += np.where(self.anchor_valid[:, None], dview, 0.0)
            dm, dcov_d, dct = self._geometry_backward(ga, d_mu2d_a, d_conic_a)
            d_camt += dct
            d_mu_d[n_h:] += dm
            s = a.scale
            M = Ra @ np.swapaxes(Ra, 1, 2)
            grads["anchor.scale"] = (2 * s * np.einsum("nab,nab->n", dcov_d, M)).astype(dt)
            sym = dcov_d + np.swapaxes(dcov_d, 1, 2)
            d_R[n_h:] += (s ** 2)[:, None, None] * (sym @ Ra)

        # skinning and the deformation net
        E, P, w = self.E, self.P, self.w
        lb = lbs_backward(c["posed"], c["pts"], E, P, w, c["offsets"], c["R"], d_mu_d, d_R)
        dE, dP, dw = lb["E"], lb["P"], lb["w"]
        if d_E is not None:
            dE = dE + d_E
            dP = dP + d_P
            dw = dw + d_w
        gd, d_mu_net = av.deform.backward(c["deform_cache"], w, dE, dP, dw, need_input=True)
        _accumulate(grads, "deform.", gd)
        d_pts = lb["mu"] + d_mu_net
        grads["head.mu"] = d_pts[:n_h].astype(dt)
        if n_a:
            grads["anchor.mu"] = d_pts[n_h:].astype(dt)

        # body texture
        if self.body is not None:
            d_body = cg["body"].reshape(-1, 3)
            tg = textured_color_backward(c["tex_cache"], av.tex, av.wnet, av.fnet, d_body,
                                         d_delta=d_delta)
            grads["tex.coarse"] = tg["coarse"]
            grads["tex.latent"] = tg["latent"]
            _accumulate(grads, "warp.", tg["warp"])
            _accumulate(grads, "fine.", tg["fine"])
            d_fenc += tg["frame_enc"]

        if frame_grads:
            grads.update(self._frame_backward(lb, d_fenc, d_campos, d_camt))
        return grads

    def _geometry_backward(self, geo, d_mu2d, d_conic):
        cam = self.frame.cam
        d_cov2d = conic_backward(geo.cov2d, d_conic)
        d_mu_c, d_cov_c = project_gaussians_backward(geo.mu_c, geo.cov_c, cam, geo.valid,
                                                     d_mu2d, d_cov2d)
        d_mu_d, d_cov_d = to_camera_backward(cam, d_mu_c, d_cov_c)
        return d_mu_d, d_cov_d, d_mu_c.sum(axis=0)

    def _frame_backward(self, lb, d_fenc, d_campos, d_camt):
        av = self.avatar
        fr = self.frame
        if d_fenc.size == 0:
            d_fenc = np.zeros(frame_encoding_dim(av.rig, av.include_nose))
        dG_t, dpf_t, dG_p, dpf_p = bone_transforms_jacobian(av.rig, fr.theta, fr.psi)
        dG = lb["G"].astype(float)
        dG[av.rig.static_bone] = 0
        dpf = lb["pose_feat"].astype(float)
        d_theta = np.tensordot(dG, dG_t, axes=3) + dpf @ dpf_t
        d_psi = np.tensordot(dG, dG_p, axes=3) + dpf @ dpf_p + lb["psi"]
        dth_hn, dpos, d_ldmk = frame_encoding_backward(fr, av.rig, d_fenc.astype(float),
                                                       av.include_nose)
        d_theta = d_theta.reshape(av.rig.n_pose, 3)
        d_theta[av.rig.headneck] += dth_hn.reshape(-1, 3)
        # camera position is -R^T t
        d_campos_tot = d_campos + dpos
        d_t = d_camt - fr.cam.R @ d_campos_tot
        full_ldmk = np.zeros_like(fr.ldmk)
        full_ldmk[:len(d_ldmk)] = d_ldmk
        return {"frame.theta": d_theta.ravel(), "frame.psi": d_psi, "frame.t": d_t,
                "frame.ldmk": full_ldmk}


def _accumulate(grads, prefix, g):
    for k, v in g.items():
        key = prefix + k
        grads[key] = grads[key] + v if key in grads else v


def _geometry(mu_d, cov, cov_d, cam):
    mu_c, cov_c = to_camera(mu_d, cov_d, cam)
    mu2d, cov2d, depth, valid = project_gaussians(mu_c, cov_c, cam)
    conic = conic_from_cov2d(cov2d)
    return Geometry(len(mu_d), mu_d, cov, cov_d, mu_c, cov_c, mu2d, cov2d, conic, depth, valid)


def forward(av, frame, stage=2, body_background=(1.0, 1.0, 1.0)):
    """Render ``frame`` for training stage ``stage`` (1, 2 or 3).

    Stage 1 draws the head Gaussians over a plain background, stage 2 adds
    the anchor layer and the warped body texture, stage 3 drops the anchor
    layer but still tracks anchor geometry for the anchor loss.
    """
    cam = frame.cam
    h, w_ = cam.height, cam.width
    dt = av.dtype
    c = {}
    use_anchor = stage >= 2 and av.anchors is not None and len(av.anchors) > 0
    n_h = len(av.head)
    pts = av.head.mu
    if use_anchor:
        pts = np.concatenate([pts, av.anchors.mu], axis=0)
    n_a = len(pts) - n_h
    posed = pose_rig(av.rig, frame, dtype=dt)
    E, P, wts, dcache = av.deform.forward(pts)
    R, T, mu_d, offsets = lbs(posed, pts, E, P, wts)
    c.update(posed=posed, pts=pts, offsets=offsets, R=R, deform_cache=dcache,
             n_anchor=n_a)

    # head Gaussians
    gs = av.head.gaussians()
    cov = build_covariance(gs.scale, gs.quat).astype(dt)
    Rh = R[:n_h]
    cov_d = Rh @ cov @ np.swapaxes(Rh, 1, 2)
    geo = _geometry(mu_d[:n_h], cov, cov_d, cam)
    campos = cam.position.astype(dt)
    view = mu_d[:n_h] - campos
    dirs = view / np.linalg.norm(view, axis=1, keepdims=True)
    basis, jac = sh_basis(dirs, sh_degree_of(gs.sh.shape[1]))
    raw = 0.5 + np.einsum("nk,nkc->nc", basis, gs.sh)
    rgb = np.maximum(raw, 0.0)
    head_layer, hstate = splat_layer(geo.mu2d, geo.conic, rgb, gs.opacity, geo.depth,
                                     geo.valid, h, w_, cov2d=geo.cov2d)
    c.update(head_geo=geo, head_state=hstate, sh_basis=(basis, jac), sh_raw=raw,
             view_vec=view, head_opacity=gs.opacity, head_scale=gs.scale)

    res = RenderPass(av, frame, stage, None, None, head_layer, E=E, P=P, w=wts, cache=c)

    fenc = av.frame_encoding(frame) if stage >= 2 else np.zeros(0, dt)
    c["fenc"] = fenc
    if use_anchor:
        a = av.anchors
        Ra = R[n_h:]
        cov_a = (a.scale ** 2)[:, None, None] * np.eye(3, dtype=dt)
        cov_da = (a.scale ** 2)[:, None, None] * (Ra @ np.swapaxes(Ra, 1, 2))
        ga = _geometry(mu_d[n_h:], cov_a, cov_da, cam)
        c["anchor_geo"] = ga
        if stage == 2:
            layer, astate = splat_layer(ga.mu2d, ga.conic, a.rgb, a.opacity, ga.depth,
                                        ga.valid, h, w_, cov2d=ga.cov2d)
            res.anchor_layer = layer
            c["anchor_state"] = astate
        xt, _, wcache = warp(ga.mu2d, fenc, av.wnet, av.tex)
        res.anchor_xt = xt
        res.anchor_mu2d = ga.mu2d
        res.anchor_valid = ga.valid
        c["anchor_warp_cache"] = wcache

    if stage >= 2:
        xy, enc = av.pixel_inputs(h, w_)
        color, tcache = textured_color(xy, fenc, av.tex, av.wnet, av.fnet, pix_enc=enc)
        res.body = color.reshape(h, w_, 3)
        res.delta = tcache.delta
        c["tex_cache"] = tcache
        body = res.body
    else:
        body = np.broadcast_to(np.asarray(body_background, dt), (h, w_, 3))
        c["bg"] = body
    fb = composite(res.anchor_layer, head_layer, body, clamp=False)
    res.pre_clamp = fb.rgb
    res.image = np.clip(fb.rgb, 0.0, 1.0)
    return res


def render(av, frame, stage=3):
    """Final image of ``frame`` through the full (network) path."""
    return forward(av, frame, stage).image
