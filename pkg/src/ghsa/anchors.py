"""Anchor Gaussians: isotropic, view-independent splats that pin 3D body
points to fixed texture coordinates."""

import warnings
from dataclasses import dataclass

import numpy as np

from .coremath import SH_C0, farthest_point_sample
from .errors import InsufficientAnchors, ShapeError
from .gaussmodel import NEAR_PLANE
from .rig import lbs, pose_rig

MIN_OPACITY = 0.05
MIN_SCALE = 1e-4
DEFAULT_COUNT = 1024
MASK_THRESHOLD = 0.5


@dataclass
class AnchorSet:
    mu: np.ndarray
    scale: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    target_uv: np.ndarray

    def __post_init__(self):
        n = len(self.mu)
        for name in ("scale", "rgb", "opacity", "target_uv"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"AnchorSet.{name} has wrong length")

    def __len__(self):
        return len(self.mu)

    @property
    def quat(self):
        q = np.zeros((len(self), 4), self.mu.dtype)
        q[:, 0] = 1
        return q

    def subset(self, index):
        return AnchorSet(self.mu[index], self.scale[index], self.rgb[index],
                         self.opacity[index], self.target_uv[index])

    def copy(self):
        return self.subset(slice(None))

    @classmethod
    def empty(cls, dtype=np.float64):
        return cls(np.zeros((0, 3), dtype), np.zeros(0, dtype), np.zeros((0, 3), dtype),
                   np.zeros(0, dtype), np.zeros((0, 2), dtype))


def project_canonical(mu, rig, frame, net):
    """Skin canonical points with the deformation net and project them.

    Returns ``(pixels, depth)``.
    """
    E, P, w, _ = net.forward(mu)
    posed = pose_rig(rig, frame, dtype=np.float64)
    _, _, mu_d, _ = lbs(posed, np.asarray(mu, np.float64), E.astype(np.float64),
                        P.astype(np.float64), w.astype(np.float64))
    return frame.cam.project_points(mu_d)


def in_frame(pix, depth, width, height, near=NEAR_PLANE):
    return ((depth > near) & (pix[:, 0] >= 0) & (pix[:, 0] <= width - 1)
            & (pix[:, 1] >= 0) & (pix[:, 1] <= height - 1))


def mask_lookup(mask, pix):
    """Nearest-pixel read of a mask at (possibly fractional) pixel positions."""
    h, w = mask.shape
    x = np.clip(np.rint(pix[:, 0]).astype(np.int64), 0, w - 1)
    y = np.clip(np.rint(pix[:, 1]).astype(np.int64), 0, h - 1)
    return mask[y, x]


def init_anchors(gaussians, frame, head_mask, rig, net, padding, n_anchors=DEFAULT_COUNT,
                 fallback=False, seed_index=None, threshold=MASK_THRESHOLD):
    """Pick anchors among the warm-up Gaussians that land on the body.

    Returns ``(anchors, selected)`` where ``selected`` indexes ``gaussians``
    so the caller can drop those rows from the regular set.
    """
    pix, depth = project_canonical(gaussians.mu, rig, frame, net)
    cam = frame.cam
    ok = in_frame(pix, depth, cam.width, cam.height)
    if head_mask is not None:
        ok &= mask_lookup(head_mask, pix) < threshold
    cand = np.flatnonzero(ok)
    k = n_anchors
    if len(cand) < k:
        if not fallback or len(cand) < 4:
            raise InsufficientAnchors(f"{len(cand)} body Gaussians, need {n_anchors}")
        warnings.warn(f"only {len(cand)} body Gaussians; using that many anchors", stacklevel=2)
        k = len(cand)
    if seed_index is None:
        # most shoulder-ward point: largest image row (y grows downwards)
        seed = int(np.argmax(pix[cand, 1]))
    else:
        seed = int(np.flatnonzero(cand == seed_index)[0])
    pick = farthest_point_sample(gaussians.mu[cand].astype(np.float64), k, seed_index=seed)
    sel = cand[pick]
    dt = gaussians.mu.dtype
    rgb = np.maximum(0.5 + SH_C0 * gaussians.sh[sel, 0, :], 0.0)
    anchors = AnchorSet(
        mu=gaussians.mu[sel].copy(),
        scale=gaussians.scale[sel].mean(axis=1),
        rgb=rgb.astype(dt),
        opacity=gaussians.opacity[sel].copy(),
        target_uv=(pix[sel] + padding).astype(np.float64),
    )
    return clamp_anchor_params(anchors), sel


def clamp_anchor_params(anchors):
    """Enforce the opacity and scale floors (idempotent)."""
    return AnchorSet(anchors.mu, np.maximum(anchors.scale, MIN_SCALE),
                     anchors.rgb, np.clip(anchors.opacity, MIN_OPACITY, 1.0),
                     anchors.target_uv)


def clamp_anchor_params_(anchors):
    """In-place variant used after optimiser steps."""
    np.maximum(anchors.scale, MIN_SCALE, out=anchors.scale)
    np.clip(anchors.opacity, MIN_OPACITY, 1.0, out=anchors.opacity)
    return anchors


def frustum_cleanup(anchors, frame, rig, net):
    """Drop anchors whose canonical-frame projection leaves the image.

    Returns ``(anchors, keep)``.
    """
    if len(anchors) == 0:
        return anchors, np.zeros(0, bool)
    pix, depth = project_canonical(anchors.mu, rig, frame, net)
    keep = in_frame(pix, depth, frame.cam.width, frame.cam.height)
    return anchors.subset(keep), keep
