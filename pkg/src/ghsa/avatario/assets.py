"""Typed save/load on top of :mod:`ghsa.avatario.container`.

Every loader is the exact inverse of its saver: arrays are stored with
their dtype and restored byte for byte.
"""

import json

import numpy as np

from ..anchors import AnchorSet
from ..errors import CorruptAsset
from ..fastpath import BakedAvatar
from ..gaussmodel import GaussianSet
from ..model import Avatar, HeadParams
from ..neuraltex import FineNet, NeuralTexture, WarpNet, frame_encoding_dim
from ..nn import Adam
from ..rig import DeformNet, Rig
from . import container

RIG_ARRAYS = ("parents", "rest_joints", "joint_regressor", "pose_joints", "headneck",
              "ref_verts", "ref_weights", "ref_expr", "ref_pose")


def _require(blobs, *names):
    for n in names:
        if n not in blobs:
            raise CorruptAsset("missing blob", n)


# -- rig --------------------------------------------------------------------

def rig_blobs(rig, prefix="rig."):
    return {prefix + k: np.asarray(getattr(rig, k)) for k in RIG_ARRAYS}


def rig_meta(rig):
    return {"joint_names": list(rig.joint_names), "static_bone": int(rig.static_bone)}


def rig_from(blobs, meta, prefix="rig."):
    _require(blobs, *(prefix + k for k in RIG_ARRAYS))
    kw = {k: blobs[prefix + k] for k in RIG_ARRAYS}
    return Rig(joint_names=list(meta["joint_names"]), static_bone=int(meta["static_bone"]), **kw)


def save_rig(path, rig):
    """Rig asset: joint layout in the manifest, float32/int64 arrays as blobs."""
    blobs = rig_blobs(rig)
    for k, v in blobs.items():
        if v.dtype.kind == "f":
            blobs[k] = v.astype("<f4")
    container.write(path, "rig", blobs, {"rig": rig_meta(rig)})


def load_rig(path):
    _, meta, blobs = container.read(path, "rig")
    return rig_from({k: v.astype(np.float64) if v.dtype.kind == "f" else v
                     for k, v in blobs.items()}, meta["rig"])


# -- avatar -----------------------------------------------------------------

def _mlp_blobs(prefix, mlp):
    return {f"{prefix}.{k}": v for k, v in mlp.parameters().items()}


def _mlp_shape(blobs, prefix):
    n = sum(1 for k in blobs if k.startswith(prefix + ".W"))
    if n == 0:
        raise CorruptAsset("missing network weights", prefix)
    return blobs[f"{prefix}.W0"].shape[1], n - 1, blobs[f"{prefix}.W0"].dtype


def _load_mlp(mlp, blobs, prefix):
    params = mlp.parameters()
    for k in params:
        _require(blobs, f"{prefix}.{k}")
        if blobs[f"{prefix}.{k}"].shape != params[k].shape:
            raise CorruptAsset("network weight has the wrong shape", f"{prefix}.{k}")
    mlp.weights = [blobs[f"{prefix}.W{i}"].copy() for i in range(len(mlp.weights))]
    mlp.biases = [blobs[f"{prefix}.b{i}"].copy() for i in range(len(mlp.biases))]


def avatar_blobs(av):
    b = {f"head.{k}": v for k, v in av.head.arrays().items()}
    if av.anchors is not None:
        a = av.anchors
        b.update({"anchor.mu": a.mu, "anchor.scale": a.scale, "anchor.rgb": a.rgb,
                  "anchor.opacity": a.opacity, "anchor.target_uv": a.target_uv})
    b.update(_mlp_blobs("deform", av.deform.mlp))
    b.update(_mlp_blobs("warp", av.wnet.mlp))
    b.update(_mlp_blobs("fine", av.fnet.mlp))
    b["tex.coarse"] = av.tex.coarse
    b["tex.latent"] = av.tex.latent
    b.update(rig_blobs(av.rig))
    return b


def avatar_meta(av):
    return {"rig": rig_meta(av.rig), "padding": int(av.tex.padding),
            "image_size": [int(av.tex.height), int(av.tex.width)],
            "canonical": None if av.canonical is None else int(av.canonical),
            "include_nose": bool(av.include_nose),
            "counts": {"head": len(av.head),
                       "anchors": 0 if av.anchors is None else len(av.anchors)}}


def avatar_from(blobs, meta):
    rig = rig_from(blobs, meta["rig"])
    _require(blobs, "head.mu", "head.log_scale", "head.quat", "head.logit_op", "head.sh",
             "tex.coarse", "tex.latent")
    head = HeadParams(*(blobs[f"head.{k}"] for k in
                        ("mu", "log_scale", "quat", "logit_op", "sh")))
    anchors = None
    if "anchor.mu" in blobs:
        anchors = AnchorSet(*(blobs[f"anchor.{k}"] for k in
                              ("mu", "scale", "rgb", "opacity", "target_uv")))
    h, w = meta["image_size"]
    tex = NeuralTexture(blobs["tex.coarse"], blobs["tex.latent"], int(meta["padding"]), h, w)
    nose = bool(meta.get("include_nose", False))
    fdim = frame_encoding_dim(rig, nose)
    hid, dep, dt = _mlp_shape(blobs, "deform")
    deform = DeformNet(rig, hid, dep, rng=0, dtype=dt)
    _load_mlp(deform.mlp, blobs, "deform")
    hid, dep, dt = _mlp_shape(blobs, "warp")
    wnet = WarpNet(fdim, hid, dep, rng=0, dtype=dt)
    _load_mlp(wnet.mlp, blobs, "warp")
    hid, dep, dt = _mlp_shape(blobs, "fine")
    fnet = FineNet(tex.latent_dim, fdim, hid, dep, rng=0, dtype=dt)
    _load_mlp(fnet.mlp, blobs, "fine")
    return Avatar(rig, head, deform, tex, wnet, fnet, anchors, meta.get("canonical"), nose)


def save_asset(path, av):
    container.write(path, "avatar", avatar_blobs(av), avatar_meta(av))


def load_asset(path):
    _, meta, blobs = container.read(path, "avatar")
    return avatar_from(blobs, meta)


# -- training checkpoint ------------------------------------------------------

def save_checkpoint(path, trainer):
    """Avatar plus optimiser moments and loop state, enough to resume."""
    blobs = avatar_blobs(trainer.av)
    steps = {}
    for name, st in trainer.opt.state.items():
        blobs[f"optim.{name}.m"] = st["m"]
        blobs[f"optim.{name}.v"] = st["v"]
        steps[name] = int(st["t"])
    blobs["densify.accum"] = trainer._grad_accum
    blobs["densify.count"] = trainer._grad_count
    meta = avatar_meta(trainer.av)
    meta["trainer"] = {"iteration": trainer.iteration, "stage": trainer.stage,
                       "config": trainer.cfg.to_dict(), "optim_steps": steps,
                       "order": [int(i) for i in trainer._order],
                       "rng": json.loads(json.dumps(trainer.rng.bit_generator.state))}
    container.write(path, "checkpoint", blobs, meta)


def load_checkpoint(path, frames):
    """Rebuild a :class:`~ghsa.trainer.Trainer` from a checkpoint."""
    from ..trainer import TrainConfig, Trainer

    _, meta, blobs = container.read(path, "checkpoint")
    av = avatar_from(blobs, meta)
    t = meta["trainer"]
    tr = Trainer(av, frames, TrainConfig.from_dict(t["config"]))
    tr.iteration = int(t["iteration"])
    tr.stage = int(t["stage"])
    tr._order = list(t["order"])
    tr.rng.bit_generator.state = t["rng"]
    tr.opt = Adam()
    for name, steps in t["optim_steps"].items():
        tr.opt.state[name] = {"m": blobs[f"optim.{name}.m"], "v": blobs[f"optim.{name}.v"],
                              "t": steps}
    tr._grad_accum = blobs["densify.accum"]
    tr._grad_count = blobs["densify.count"]
    return tr


# -- baked ------------------------------------------------------------------

BAKED_ARRAYS = ("head_E", "head_P", "head_W", "anchor_mu", "anchor_E", "anchor_P",
                "anchor_W", "target_uv", "texture")


def save_baked(path, baked):
    b = {k: getattr(baked, k) for k in BAKED_ARRAYS}
    h = baked.head
    b.update({"gauss.mu": h.mu, "gauss.scale": h.scale, "gauss.quat": h.quat,
              "gauss.opacity": h.opacity, "gauss.sh": h.sh})
    b.update(rig_blobs(baked.rig))
    meta = {"rig": rig_meta(baked.rig), "padding": int(baked.padding),
            "canonical": int(baked.canonical),
            "counts": {"head": len(h), "anchors": baked.n_anchors}}
    container.write(path, "baked", b, meta)


def load_baked(path):
    _, meta, blobs = container.read(path, "baked")
    _require(blobs, *BAKED_ARRAYS)
    head = GaussianSet(*(blobs[f"gauss.{k}"] for k in ("mu", "scale", "quat", "opacity", "sh")))
    return BakedAvatar(rig_from(blobs, meta["rig"]), head,
                       *(blobs[k] for k in BAKED_ARRAYS), padding=int(meta["padding"]),
                       canonical=int(meta["canonical"]))
