"""Command-line entry point: ``python -m ghsa <command> ...``."""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

log = logging.getLogger("ghsa")


def set_threads(n):
    if n:
        import numba

        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


def split_frames(frames, holdout_every):
    if not holdout_every:
        return frames, []
    test = [f for i, f in enumerate(frames) if i % holdout_every == holdout_every - 1]
    train = [f for i, f in enumerate(frames) if i % holdout_every != holdout_every - 1]
    return train, test


def cmd_make_synthetic(args):
    from .avatario.assets import save_rig
    from .avatario.sequence import save_sequence
    from .avatario.synthetic import SyntheticConfig, make_synthetic

    cfg = SyntheticConfig(n_frames=args.frames, height=args.size, width=args.size,
                          motion=not args.static)
    scene = make_synthetic(cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_sequence(os.path.join(args.out, "sequence.jsonl"), scene.frames, args.format)
    save_rig(os.path.join(args.out, "rig.ghsa"), scene.rig)
    np.save(os.path.join(args.out, "homographies.npy"), np.array(scene.homographies))
    print(f"wrote {len(scene.frames)} frames to {args.out}")


def _load_inputs(args):
    from .avatario.assets import load_rig
    from .avatario.sequence import load_sequence

    frames = load_sequence(args.sequence)
    rig = load_rig(args.rig) if getattr(args, "rig", None) else None
    return frames, rig


def cmd_fit(args):
    from .avatario.assets import save_asset, save_checkpoint
    from .avatario.synthetic import init_gaussians
    from .model import Avatar, render
    from .trainer import Trainer, preset, psnr

    frames, rig = _load_inputs(args)
    if rig is None:
        sys.exit("fit needs --rig")
    train, test = split_frames(frames, args.holdout_every)
    overrides = {"seed": args.seed, "finetune_frames": args.finetune_frames}
    if args.schedule:
        from .trainer import StageSchedule

        parts = args.schedule.split(",")
        if len(parts) != 3 or not all(p.strip().isdigit() for p in parts):
            sys.exit("--schedule expects three integers, e.g. 400,4600,2000")
        overrides["schedule"] = StageSchedule(*(int(p) for p in parts))
    cfg = preset(args.preset, **overrides)
    h, w = train[0].cam.height, train[0].cam.width
    av = Avatar.create(rig, init_gaussians(rig, cfg.sh_degree, seed=args.seed), h, w,
                       padding=cfg.padding, latent_dim=cfg.latent_dim, hidden=cfg.hidden,
                       tex_hidden=cfg.tex_hidden, depth=cfg.depth, seed=args.seed,
                       include_nose=cfg.include_nose)
    os.makedirs(args.out, exist_ok=True)
    tr = Trainer(av, train, cfg, log_path=os.path.join(args.out, "train_log.csv"))
    t0 = time.perf_counter()
    summary = {}

    def after_stage(trainer, stage):
        save_checkpoint(os.path.join(args.out, f"stage{stage}.ckpt"), trainer)
        if test:
            summary[f"stage{stage}_test_psnr"] = float(np.mean(
                [psnr(render(av, f, stage), f.image) for f in test]))
            print(f"stage {stage}: held-out PSNR {summary[f'stage{stage}_test_psnr']:.2f} dB")

    tr.fit(stage_callback=after_stage)
    summary["seconds"] = time.perf_counter() - t0
    save_asset(os.path.join(args.out, "avatar.ghsa"), av)
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    print(f"done in {summary['seconds']:.0f} s; asset {os.path.join(args.out, 'avatar.ghsa')}")


def _write_frames(out, frames, images):
    from .renderer import write_png

    os.makedirs(out, exist_ok=True)
    for fr, img in zip(frames, images):
        write_png(os.path.join(out, f"{fr.index:05d}.png"), img)


def cmd_render(args):
    from .avatario.assets import load_asset
    from .model import render
    from .trainer import psnr

    av = load_asset(args.asset)
    frames, _ = _load_inputs(args)
    imgs = [render(av, f) for f in frames]
    _write_frames(args.out, frames, imgs)
    scored = [psnr(i, f.image) for i, f in zip(imgs, frames) if f.image is not None]
    if scored:
        print(f"mean PSNR {np.mean(scored):.2f} dB over {len(scored)} frames")


def cmd_bake(args):
    from .avatario.assets import load_asset, save_baked
    from .fastpath import bake, texture_mask

    av = load_asset(args.asset)
    frames, _ = _load_inputs(args)
    canon = next((f for f in frames if f.index == av.canonical), frames[0])
    fg = canon.extra.get("fg_mask")
    mask = None if fg is None else texture_mask(fg, av.tex.padding)
    train, _ = split_frames(frames, args.holdout_every)
    baked = bake(av, canon, mask, train, seed=args.seed)
    save_baked(args.out, baked)
    print(f"baked {len(baked.head)} Gaussians, {baked.n_anchors} anchors -> {args.out}")


def cmd_render_fast(args):
    from .avatario.assets import load_baked
    from .fastpath import FastRenderer

    baked = load_baked(args.baked)
    frames, _ = _load_inputs(args)
    r = FastRenderer(baked)
    t0 = time.perf_counter()
    imgs = [np.clip(r.render(f).rgb, 0, 1) for f in frames]
    dt = (time.perf_counter() - t0) / max(len(frames), 1)
    _write_frames(args.out, frames, imgs)
    print(f"{len(frames)} frames, {dt * 1e3:.1f} ms/frame")


def cmd_reenact(args):
    from .avatario.assets import load_asset
    from .avatario.oneeuro import smooth_landmarks
    from .fastpath import render_reenact

    av = load_asset(args.asset)
    frames, _ = _load_inputs(args)
    if args.smooth:
        frames = smooth_landmarks(frames)
    imgs = [render_reenact(av, f, align=not args.no_align) for f in frames]
    _write_frames(args.out, frames, imgs)
    print(f"wrote {len(frames)} frames to {args.out}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=("desk", "full"), default="desk")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=0, help="numba threads (0 = default)")
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ghsa", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synthetic", parents=[common], help="generate the synthetic scene")
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--format", choices=("png", "pfm"), default="pfm")
    s.add_argument("--static", action="store_true", help="no motion")
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("fit", parents=[common], help="train an avatar")
    s.add_argument("--sequence", required=True)
    s.add_argument("--rig", required=True)
    s.add_argument("--holdout-every", type=int, default=5)
    s.add_argument("--schedule", help="iterations per stage as S1,S2,S3 (overrides preset)")
    s.add_argument("--finetune-frames", action="store_true",
                   help="also refine per-frame pose, camera and landmarks")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", parents=[common], help="render with the networks")
    s.add_argument("--asset", required=True)
    s.add_argument("--sequence", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("bake", parents=[common], help="cache networks for fast rendering")
    s.add_argument("--asset", required=True)
    s.add_argument("--sequence", required=True)
    s.add_argument("--holdout-every", type=int, default=5)
    s.set_defaults(func=cmd_bake)

    s = sub.add_parser("render-fast", parents=[common], help="render a baked avatar")
    s.add_argument("--baked", required=True)
    s.add_argument("--sequence", required=True)
    s.set_defaults(func=cmd_render_fast)

    s = sub.add_parser("reenact", parents=[common], help="drive an avatar with other motion")
    s.add_argument("--asset", required=True)
    s.add_argument("--sequence", required=True)
    s.add_argument("--smooth", action="store_true", help="One-Euro filter the landmarks")
    s.add_argument("--no-align", action="store_true", help="skip the rigid correction")
    s.set_defaults(func=cmd_reenact)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    set_threads(args.threads)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
