"""Shared fixtures and independent reference implementations for the tests."""

import numpy as np

from ghsa.anchors import AnchorSet
from ghsa.avatario.synthetic import ground_truth_head, make_toy_rig
from ghsa.gaussmodel import Camera
from ghsa.model import Avatar
from ghsa.rig import FrameParams

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99


def brute_splat(mu, cov, rgb, op, depth, height, width):
    """Per-pixel front-to-back blend evaluated directly, no tiling."""
    order = np.argsort(depth, kind="stable")
    Q = np.linalg.inv(cov)
    C = np.zeros((height, width, 3))
    A = np.zeros((height, width))
    for y in range(height):
        for x in range(width):
            T = 1.0
            c = np.zeros(3)
            for i in order:
                d = np.array([x, y], float) - mu[i]
                a = op[i] * np.exp(-0.5 * d @ Q[i] @ d)
                if a < ALPHA_MIN:
                    continue
                a = min(a, ALPHA_MAX)
                c += rgb[i] * a * T
                T *= 1 - a
            C[y, x] = c
            A[y, x] = 1 - T
    return C, A


def random_splats(rng, n, height, width):
    mu = rng.uniform(0, width - 1, (n, 2))
    mu[:, 1] = rng.uniform(0, height - 1, n)
    A = rng.normal(size=(n, 2, 2)) * 1.5
    cov = A @ A.transpose(0, 2, 1) + 0.5 * np.eye(2)
    return mu, cov, rng.uniform(0, 1, (n, 3)), rng.uniform(0.1, 0.95, n), rng.uniform(1, 5, n)


def mlp_oracle(mlp, x, shared=None):
    """Plain layer-by-layer evaluation of an ``nn.MLP``."""
    h = np.asarray(x, float)
    if shared is not None:
        h = np.concatenate([h, np.broadcast_to(shared, (len(h), len(shared)))], axis=1)
    n = len(mlp.weights)
    for i, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ W.astype(float) + b.astype(float)
        if i < n - 1:
            h = np.maximum(h, 0)
    return h


def tiny_scene(seed=1, size=8, n_head=30, n_anchor=6, perturb=True):
    """A small float64 avatar with non-trivial weights everywhere, plus a frame."""
    rng = np.random.default_rng(seed)
    rig = make_toy_rig(0)
    H = W = size
    f = 25.0 * size / 16
    cam = Camera(np.diag([1.0, -1, -1]), np.array([0, -0.05, 0.8]), f, f,
                 (W - 1) / 2, (H - 1) / 2, W, H)
    gt = ground_truth_head(rig, 40, 0)
    g = gt.subset(rng.choice(40, n_head, replace=False))
    g.sh = g.sh + rng.normal(scale=0.2, size=g.sh.shape)
    g.opacity = rng.uniform(0.3, 0.8, len(g))
    g.scale = g.scale * 1.5
    av = Avatar.create(rig, g, H, W, padding=3, latent_dim=4, hidden=8, tex_hidden=8, depth=2,
                       seed=0, dtype=np.float64)
    if perturb:
        for net in (av.deform, av.wnet, av.fnet):
            for Wt in net.mlp.weights:
                Wt += rng.normal(scale=0.3, size=Wt.shape)
        av.deform.mlp.weights[-1] *= 0.01
        av.wnet.mlp.weights[-1] *= 3
        av.tex.coarse[:] = rng.random(av.tex.coarse.shape)
    if n_anchor:
        amu = np.stack([rng.uniform(-0.15, 0.15, n_anchor), rng.uniform(-0.2, -0.1, n_anchor),
                        np.full(n_anchor, -0.02)], 1)
        av.anchors = AnchorSet(amu, rng.uniform(0.01, 0.02, n_anchor), rng.random((n_anchor, 3)),
                               rng.uniform(0.3, 0.8, n_anchor),
                               rng.uniform(1, size + 4, (n_anchor, 2)))
    theta = rng.normal(scale=0.1, size=rig.n_pose * 3)
    psi = rng.normal(size=rig.n_expr)
    fr = FrameParams(theta, psi, cam, rng.uniform(1, size - 1, (4, 2)))
    return av, fr


SMALL = dict(height=32, width=32, padding=8, latent_dim=4, hidden=16, tex_hidden=16, depth=2)


def small_scene(seed=0, n_frames=6):
    from ghsa.avatario.synthetic import SyntheticConfig, make_synthetic

    return make_synthetic(SyntheticConfig(n_frames=n_frames, height=32, width=32,
                                          n_head_gaussians=80), seed=seed)


def small_trainer(seed=0, scene=None, **overrides):
    """A 32x32 training setup that runs a few iterations per second."""
    from ghsa.avatario.synthetic import init_gaussians
    from ghsa.trainer import StageSchedule, Trainer, preset

    scene = scene or small_scene(seed)
    kw = dict(schedule=StageSchedule(4, 4, 4), n_anchors=16, densify_from=2, densify_every=2,
              densify_until=6, cleanup_every=3, vgg_start=5, log_every=1, seed=seed, **SMALL)
    kw.update(overrides)
    cfg = preset("desk", **kw)
    av = Avatar.create(scene.rig, init_gaussians(scene.rig, seed=seed), cfg.height, cfg.width,
                       padding=cfg.padding, latent_dim=cfg.latent_dim, hidden=cfg.hidden,
                       tex_hidden=cfg.tex_hidden, depth=cfg.depth, seed=seed)
    return Trainer(av, scene.train, cfg)


def loss_trace(seed=0):
    """Total loss at every iteration of a short three-stage fit."""
    tr = small_trainer(seed)
    trace = []
    tr.fit(callback=lambda t, v: trace.append(float(v["loss"])))
    return trace


# acceptance lines, printed in the terminal summary by conftest
RESULTS = []


def report(number, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} ({detail})"
    RESULTS.append(line)
    print(line)
    return ok
