"""Fit the synthetic desk scene, bake it and compare both render paths.

    python demos/desk_pipeline.py --out runs/desk [--schedule 400,4600,2000]

Takes about 20 minutes on one core with the default schedule. Writes the asset, the
baked file, a few side-by-side PNGs and a JSON summary into ``--out``.
"""

import argparse
import json
import os
import time
import warnings

import numpy as np

from ghsa.avatario.assets import save_asset, save_baked
from ghsa.avatario.synthetic import SyntheticConfig, init_gaussians, make_synthetic
from ghsa.fastpath import FastRenderer, bake, texture_mask
from ghsa.model import Avatar, render
from ghsa.renderer import write_png
from ghsa.trainer import StageSchedule, Trainer, preset, psnr


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--schedule", default="400,4600,2000")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    scene = make_synthetic(SyntheticConfig(), seed=args.seed)
    cfg = preset("desk", seed=args.seed,
                 schedule=StageSchedule(*(int(v) for v in args.schedule.split(","))))
    av = Avatar.create(scene.rig, init_gaussians(scene.rig, seed=args.seed), cfg.height,
                       cfg.width, padding=cfg.padding, latent_dim=cfg.latent_dim,
                       hidden=cfg.hidden, tex_hidden=cfg.tex_hidden, depth=cfg.depth,
                       seed=args.seed)
    tr = Trainer(av, scene.train, cfg, log_path=os.path.join(args.out, "train_log.csv"))
    summary = {}

    def after_stage(t, stage):
        summary[f"stage{stage}_psnr"] = float(np.mean(
            [psnr(render(av, f, stage), f.image) for f in scene.test]))
        print(f"stage {stage}: held-out {summary[f'stage{stage}_psnr']:.2f} dB", flush=True)

    t0 = time.perf_counter()
    tr.fit(stage_callback=after_stage)
    summary["fit_seconds"] = time.perf_counter() - t0
    save_asset(os.path.join(args.out, "avatar.ghsa"), av)

    canon = scene.frames[av.canonical]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        baked = bake(av, canon, texture_mask(canon.extra["fg_mask"], av.tex.padding),
                     scene.train, seed=args.seed)
        save_baked(os.path.join(args.out, "avatar.baked"), baked)
        fast = FastRenderer(baked)
        maes, fast_psnr = [], []
        for i, f in enumerate(scene.test):
            a = np.clip(fast.render(f).rgb, 0, 1)
            b = np.clip(render(av, f), 0, 1)
            maes.append(np.abs(a - b).mean(axis=(0, 1)) * 255)
            fast_psnr.append(psnr(a, f.image))
            if i < 4:
                write_png(os.path.join(args.out, f"test{f.index:03d}.png"),
                          np.concatenate([f.image, b, a], axis=1))
    summary["fast_psnr"] = float(np.mean(fast_psnr))
    summary["fast_vs_mlp_mae_255"] = np.mean(maes, axis=0).round(3).tolist()
    summary["anchors_kept"] = int(baked.n_anchors)
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
