"""Three-stage fitting of an :class:`~ghsa.model.Avatar` to a frame sequence.

Stage 1 warms up the regular Gaussians alone. Anchors are then picked from
them, and stage 2 optimises everything jointly through the hybrid
compositor. Stage 3 hides the anchors and refines the texture, the warp
field and the head Gaussians' opacity and colour only.
"""

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import anchors as anc
from .errors import InvalidState
from .losses import (PyramidGradientFeatures, loss_anchor, loss_anchor_alpha, loss_flame,
                     loss_head, loss_rgb, loss_vgg, loss_warp)
from .model import HeadParams, forward
from .nn import Adam

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lam_E: float = 1000.0
    lam_P: float = 1000.0
    lam_W: float = 1.0
    lam_vgg: float = 0.1
    lam_head: float = 1.0
    lam_warp: float = 0.025
    lam_alpha: float = 0.15
    lam_anchor: float = 1.0


@dataclass
class StageSchedule:
    stage1_iters: int = 4000
    stage2_iters: int = 46000
    stage3_iters: int = 20000

    @property
    def total(self):
        return self.stage1_iters + self.stage2_iters + self.stage3_iters

    def bounds(self, stage):
        a = self.stage1_iters
        b = a + self.stage2_iters
        return {1: (0, a), 2: (a, b), 3: (b, b + self.stage3_iters)}[stage]


@dataclass
class TrainConfig:
    schedule: StageSchedule = field(default_factory=StageSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    height: int = 512
    width: int = 512
    n_anchors: int = 1024
    anchor_fallback: bool = True
    padding: int = 50
    latent_dim: int = 32
    hidden: int = 128
    tex_hidden: int = 128
    depth: int = 4
    sh_degree: int = 3
    include_nose: bool = False
    # iteration milestones (global iteration index)
    flame_halvings: tuple = (15000, 30000, 45000)
    vgg_start: int = 10000
    lr_halvings: tuple = (30000, 60000)
    cleanup_every: int = 10000
    finetune_start: int = 30000
    finetune_frames: bool = False
    finetune_lr: float = 1e-4
    # learning rates
    lr_net: float = 1e-3
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_feature: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scaling: float = 5e-3
    lr_rotation: float = 1e-3
    spatial_scale: float = 1.0
    # density control
    densify_from: int = 500
    densify_until: int = 15000
    densify_every: int = 100
    grad_threshold: float = 2.5e-4
    grad_threshold_vgg: float = 8e-3
    percent_dense: float = 0.01
    min_opacity: float = 0.005
    max_gaussians: int = 200000
    seed: int = 0
    log_every: int = 50
    dtype: str = "float32"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["schedule"] = StageSchedule(**d["schedule"])
        d["weights"] = LossWeights(**d["weights"])
        for k in ("flame_halvings", "lr_halvings"):
            d[k] = tuple(d[k])
        return cls(**d)


def preset(name="desk", **overrides):
    """``full`` is the 70k-iteration schedule; ``desk`` is the laptop-scale run."""
    if name == "full":
        cfg = TrainConfig()
    elif name == "desk":
        cfg = TrainConfig(
            schedule=StageSchedule(400, 4600, 2000),
            height=128, width=128, n_anchors=256, padding=50,
            tex_hidden=64,
            flame_halvings=(1500, 3000, 4500), vgg_start=1000, lr_halvings=(3000, 6000),
            cleanup_every=1000, finetune_start=3000,
            densify_from=100, densify_until=3000, densify_every=100,
            max_gaussians=4000, log_every=25,
        )
    else:
        raise ValueError(f"unknown preset {name!r}")
    return replace(cfg, **overrides)


def psnr(a, b):
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)


STAGE_GROUPS = {
    1: ("head.", "deform."),
    2: ("head.", "deform.", "anchor.", "warp.", "fine.", "tex."),
    3: ("head.logit_op", "head.sh", "warp.", "fine.", "tex."),
}


class Trainer:
    """Owns the optimiser state and the iteration counter of one fit."""

    LOG_FIELDS = ("iter", "stage", "loss", "rgb", "flame", "vgg", "head", "warp", "alpha",
                  "anchor", "n_gaussians", "n_anchors", "psnr", "seconds")

    def __init__(self, avatar, frames, config, log_path=None, extractor=None):
        self.av = avatar
        self.frames = list(frames)
        self.cfg = config
        self.opt = Adam()
        self.frame_opt = Adam()
        self.iteration = 0
        self.stage = 0
        self.rng = np.random.default_rng(config.seed)
        self.extractor = extractor or PyramidGradientFeatures()
        self.kdtree = cKDTree(avatar.rig.ref_verts)
        self.log_rows = []
        self.log_path = log_path
        self._order = []
        self._grad_accum = np.zeros(len(avatar.head))
        self._grad_count = np.zeros(len(avatar.head))
        self.canonical_frame = self.frames[0] if avatar.canonical is None else next(
            (f for f in self.frames if f.index == avatar.canonical), self.frames[0])
        self._t0 = time.perf_counter()

    # -- schedules ---------------------------------------------------------

    def weights_at(self, it):
        w = replace(self.cfg.weights)
        k = sum(it >= m for m in self.cfg.flame_halvings)
        w.lam_E /= 2 ** k
        w.lam_P /= 2 ** k
        if it < self.cfg.vgg_start:
            w.lam_vgg = 0.0
        return w

    def lr_for(self, name, it):
        c = self.cfg
        k = sum(it >= m for m in c.lr_halvings)
        if name == "head.mu":
            frac = min(it / max(c.schedule.total, 1), 1.0)
            lr0 = c.lr_position * c.spatial_scale
            lr1 = c.lr_position_final * c.spatial_scale
            return float(np.exp((1 - frac) * np.log(lr0) + frac * np.log(lr1)))
        if name == "head.sh":
            return c.lr_feature
        if name == "head.logit_op":
            return c.lr_opacity
        if name == "head.log_scale":
            return c.lr_scaling
        if name == "head.quat":
            return c.lr_rotation
        return c.lr_net / 2 ** k

    def pseudo_gt(self, pts):
        _, idx = self.kdtree.query(np.asarray(pts, float))
        rig = self.av.rig
        return rig.ref_expr[idx], rig.ref_pose[idx], rig.ref_weights[idx]

    def next_frame(self):
        if not self._order:
            self._order = list(self.rng.permutation(len(self.frames)))
        return self.frames[self._order.pop()]

    # -- one step ----------------------------------------------------------

    def compute_losses(self, frame, stage, it=None, weights=None):
        """Forward pass and all stage losses. Returns ``(pass, values, upstream grads)``."""
        it = self.iteration if it is None else it
        w = weights or self.weights_at(it)
        av = self.av
        r = forward(av, frame, stage)
        vals = {}
        d_img = np.zeros_like(r.image, dtype=float)
        up = {}
        vals["rgb"], g = loss_rgb(r.image, frame.image)
        d_img += g
        up["d_rgb"] = g
        n_reg = len(av.head)
        E_gt, P_gt, W_gt = self.pseudo_gt(r.cache["pts"])
        vals["flame"], (gE, gP, gW) = loss_flame(r.E, r.P, r.w, E_gt, P_gt, W_gt, w.lam_E,
                                                 w.lam_P, w.lam_W, n_regular=n_reg)
        up.update(d_E=gE, d_P=gP, d_w=gW)
        total = vals["rgb"] + vals["flame"]
        if stage >= 2:
            if w.lam_vgg > 0:
                v, g = loss_vgg(r.image, frame.image, self.extractor)
                vals["vgg"] = v
                d_img += w.lam_vgg * g
                total += w.lam_vgg * v
            if r.anchor_xt is not None and w.lam_anchor > 0:
                v, g = loss_anchor(r.anchor_xt, av.anchors.target_uv, r.anchor_valid)
                vals["anchor"] = v
                up["d_anchor_xt"] = w.lam_anchor * g
                total += w.lam_anchor * v
        if stage == 2:
            if frame.head_mask is not None and w.lam_head > 0:
                v, g = loss_head(r.head_layer.alpha, frame.head_mask)
                vals["head"] = v
                up["d_head_alpha"] = w.lam_head * g
                total += w.lam_head * v
            if w.lam_warp > 0:
                v, g = loss_warp(r.delta)
                vals["warp"] = v
                up["d_delta"] = w.lam_warp * g
                total += w.lam_warp * v
            if av.anchors is not None and len(av.anchors) and w.lam_alpha > 0:
                v, g = loss_anchor_alpha(av.anchors.opacity)
                vals["alpha"] = v
                up["d_anchor_opacity"] = w.lam_alpha * g
                total += w.lam_alpha * v
        vals["loss"] = total
        up["d_image"] = d_img
        return r, vals, up

    def step(self, frame=None, stage=None):
        stage = self.stage if stage is None else stage
        frame = frame if frame is not None else self.next_frame()
        it = self.iteration
        r, vals, up = self.compute_losses(frame, stage, it)
        d_op = up.pop("d_anchor_opacity", None)
        want_frame = (self.cfg.finetune_frames and it >= self.cfg.finetune_start
                      and stage in (2, 3))
        frame_g = None
        if want_frame:
            # per-frame tracking refinement follows the RGB term alone
            frame_g = r.backward(d_image=up["d_rgb"], frame_grads=True)
        up.pop("d_rgb")
        grads = r.backward(**up)
        if d_op is not None:
            grads["anchor.opacity"] = grads.get("anchor.opacity", 0) + d_op
        self.apply_gradients(grads, stage, it)
        if want_frame:
            self._update_frame(frame, frame_g)
        if stage in (1, 2):
            self._track_densify(r)
        vals["psnr"] = psnr(r.image, frame.image)
        self.iteration += 1
        return vals

    def apply_gradients(self, grads, stage, it):
        groups = STAGE_GROUPS[stage]
        params = self.av.parameters()
        dt = self.av.dtype
        for name, g in grads.items():
            if name not in params or not name.startswith(groups):
                continue
            self.opt.step({name: params[name]}, {name: np.asarray(g, dt)},
                          lr=self.lr_for(name, it))
        if self.av.anchors is not None:
            anc.clamp_anchor_params_(self.av.anchors)

    def _update_frame(self, frame, grads):
        key = f"frame{frame.index}"
        if "own_cam" not in frame.extra:
            frame.cam = copy.deepcopy(frame.cam)
            frame.extra["own_cam"] = True
        params = {f"{key}.theta": frame.theta, f"{key}.psi": frame.psi,
                  f"{key}.t": frame.cam.t, f"{key}.ldmk": frame.ldmk}
        g = {f"{key}.theta": grads["frame.theta"], f"{key}.psi": grads["frame.psi"],
             f"{key}.t": grads["frame.t"], f"{key}.ldmk": np.nan_to_num(grads["frame.ldmk"])}
        nose = frame.ldmk[3].copy()
        self.frame_opt.step(params, g, lr=self.cfg.finetune_lr)
        frame.ldmk[3] = nose

    # -- density control ---------------------------------------------------

    def _track_densify(self, r):
        g = r.cache.get("head_mu2d_grad")
        if g is None or len(g) != len(self._grad_accum):
            return
        h, w = r.image.shape[:2]
        # statistics in normalised device units, as the thresholds assume
        ndc = np.linalg.norm(g * np.array([w / 2.0, h / 2.0]), axis=1)
        vis = r.cache["head_geo"].valid
        self._grad_accum[vis] += ndc[vis]
        self._grad_count[vis] += 1

    def densify_and_prune(self, threshold=None):
        """Clone small / split large high-gradient Gaussians, prune faint ones."""
        c = self.cfg
        if threshold is None:
            threshold = c.grad_threshold if self.iteration < c.vgg_start else c.grad_threshold_vgg
        head = self.av.head
        stats = self._grad_accum / np.maximum(self._grad_count, 1)
        new_head, index = densify_and_prune(head, stats, threshold, c.percent_dense * c.spatial_scale,
                                            c.min_opacity, c.max_gaussians, self.rng)
        self.av.head = new_head
        for name in ("mu", "log_scale", "quat", "logit_op", "sh"):
            self.opt.reindex(f"head.{name}", index)
        self._grad_accum = np.zeros(len(new_head))
        self._grad_count = np.zeros(len(new_head))
        return len(new_head)

    # -- stages ------------------------------------------------------------

    def begin_stage(self, stage):
        if stage != self.stage + 1:
            raise InvalidState(f"stage {stage} cannot follow stage {self.stage}")
        if stage == 2 and (self.av.anchors is None or len(self.av.anchors) == 0):
            self.init_anchors()
        self.stage = stage

    def init_anchors(self):
        fr = self.canonical_frame
        gs = self.av.head.gaussians()
        anchors, sel = anc.init_anchors(gs, fr, fr.head_mask, self.av.rig, self.av.deform,
                                        self.av.tex.padding, self.cfg.n_anchors,
                                        fallback=self.cfg.anchor_fallback)
        dt = self.av.dtype
        anchors = anc.AnchorSet(anchors.mu.astype(dt), anchors.scale.astype(dt),
                                anchors.rgb.astype(dt), anchors.opacity.astype(dt),
                                anchors.target_uv)
        keep = np.ones(len(self.av.head), bool)
        keep[sel] = False
        index = np.flatnonzero(keep)
        self.av.head = self.av.head.subset(keep)
        for name in ("mu", "log_scale", "quat", "logit_op", "sh"):
            self.opt.reindex(f"head.{name}", index)
        self._grad_accum = self._grad_accum[keep]
        self._grad_count = self._grad_count[keep]
        self.av.anchors = anchors
        self.av.canonical = fr.index
        log.info("initialised %d anchors", len(anchors))

    def cleanup_anchors(self):
        a, keep = anc.frustum_cleanup(self.av.anchors, self.canonical_frame, self.av.rig,
                                      self.av.deform)
        if not keep.all():
            idx = np.flatnonzero(keep)
            for name in ("mu", "scale", "rgb", "opacity"):
                self.opt.reindex(f"anchor.{name}", idx)
            self.av.anchors = a

    def run_stage(self, stage, iters=None, callback=None):
        self.begin_stage(stage)
        lo, hi = self.cfg.schedule.bounds(stage)
        n = hi - lo if iters is None else iters
        c = self.cfg
        for _ in range(n):
            vals = self.step()
            it = self.iteration
            if stage in (1, 2) and c.densify_from <= it <= c.densify_until \
                    and it % c.densify_every == 0:
                self.densify_and_prune()
            if stage >= 2 and c.cleanup_every and it % c.cleanup_every == 0:
                self.cleanup_anchors()
            if it % c.log_every == 0 or it == 1:
                self._log(vals)
            if callback is not None:
                callback(self, vals)
        return self

    def fit(self, callback=None, stage_callback=None):
        for s in (1, 2, 3):
            self.run_stage(s, callback=callback)
            if stage_callback is not None:
                stage_callback(self, s)
        return self

    def _log(self, vals):
        row = {k: vals.get(k, 0.0) for k in self.LOG_FIELDS}
        row.update(iter=self.iteration, stage=self.stage, n_gaussians=len(self.av.head),
                   n_anchors=0 if self.av.anchors is None else len(self.av.anchors),
                   seconds=round(time.perf_counter() - self._t0, 3))
        self.log_rows.append(row)
        log.info("it %d stage %d loss %.5f psnr %.2f n=%d", row["iter"], row["stage"],
                 row["loss"], row["psnr"], row["n_gaussians"])
        if self.log_path is not None:
            write_log(self.log_path, self.log_rows)


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=Trainer.LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def densify_and_prune(head, grad_stats, threshold, scale_limit, min_opacity=0.005,
                      max_count=None, rng=None):
    """Density control for regular Gaussians.

    High-gradient Gaussians whose largest axis is at most ``scale_limit``
    are cloned; larger ones are split into two samples shrunk by 1.6.
    Gaussians below ``min_opacity`` are removed. Returns ``(head, index)``
    where ``index[i]`` is the source row of output row ``i`` (or -1 for
    freshly created rows).
    """
    rng = np.random.default_rng(rng)
    n = len(head)
    scale = np.exp(head.log_scale.astype(float))
    smax = scale.max(axis=1)
    hot = np.asarray(grad_stats) > threshold
    clone = hot & (smax <= scale_limit)
    split = hot & (smax > scale_limit)
    if max_count is not None:
        room = max(max_count - n, 0)
        for mask in (clone, split):
            ids = np.flatnonzero(mask)
            if len(ids) > room:
                order = ids[np.argsort(-np.asarray(grad_stats)[ids], kind="stable")]
                mask[:] = False
                mask[order[:room]] = True
            room -= int(mask.sum())
    arrays = head.arrays()
    parts = {k: [v] for k, v in arrays.items()}
    index = [np.arange(n)]
    ci = np.flatnonzero(clone)
    for k, v in arrays.items():
        parts[k].append(v[ci])
    index.append(np.full(len(ci), -1))
    si = np.flatnonzero(split)
    if len(si):
        from .coremath import quat_to_rot
        R = quat_to_rot(head.quat[si].astype(float))
        for _ in range(2):
            offs = rng.normal(size=(len(si), 3)) * scale[si]
            mu = head.mu[si] + np.einsum("nab,nb->na", R, offs).astype(head.mu.dtype)
            parts["mu"].append(mu)
            parts["log_scale"].append(head.log_scale[si] - np.log(1.6).astype(head.log_scale.dtype))
            for k in ("quat", "logit_op", "sh"):
                parts[k].append(arrays[k][si])
            index.append(np.full(len(si), -1))
    out = HeadParams(*(np.concatenate(parts[k]) for k in
                       ("mu", "log_scale", "quat", "logit_op", "sh")))
    index = np.concatenate(index)
    keep = np.ones(len(out), bool)
    keep[si] = False
    op = 1.0 / (1.0 + np.exp(-out.logit_op.astype(float)))
    keep &= op >= min_opacity
    return out.subset(keep), index[keep]
