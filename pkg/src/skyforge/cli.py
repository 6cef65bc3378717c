"""``skyforge`` command line.

Every stage subcommand runs in one of two modes. With ``--config`` it runs as
a pipeline stage (artifact layout, ledger, up-to-date checks). Without it, it
calls the stage's module directly on explicit paths.

Exit codes: 0 ok, 2 config error, 3 missing or stale input, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .diffusion.codec import TrainingDivergedError
from .sugar import FitDivergedError

log = logging.getLogger("skyforge")


def _add_pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="pipeline JSON; runs the stage inside the run root")
    p.add_argument("--deterministic", action="store_true", help="force deterministic kernels")
    p.add_argument("--force", action="store_true", help="re-run even when up-to-date")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="skyforge", description="Aerial-to-ground video synthesis pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic aerial/ground dataset")
    _add_pipeline_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=2)
    p.add_argument("--buildings", type=int, default=12)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("fit-scene", help="fit surface-aligned gaussians to the aerial views")
    _add_pipeline_args(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--scene-id")
    p.add_argument("--points", type=int, default=1500)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lambda-sdf", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("render-priors", help="render ground-view priors from a fitted scene")
    _add_pipeline_args(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--scene", type=Path, help="fitted scene .bin")
    p.add_argument("--scene-id")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train-codec", help="train the latent autoencoder")
    _add_pipeline_args(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--steps", type=int, default=2500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train-ldm", help="train the latent denoiser")
    _add_pipeline_args(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--codec", type=Path)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train-acm", help="train the appearance control branch")
    _add_pipeline_args(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--priors", type=Path, help="priors directory (render-priors output)")
    p.add_argument("--codec", type=Path)
    p.add_argument("--base", type=Path, help="denoiser weights")
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train-vcm", help="train the cross-frame consistency attention")
    _add_pipeline_args(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--priors", type=Path)
    p.add_argument("--codec", type=Path)
    p.add_argument("--base", type=Path)
    p.add_argument("--acm", type=Path)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--iters", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("infer", help="generate a ground video along a lane")
    _add_pipeline_args(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--scene", type=Path, help="fitted scene .bin (priors are rendered on the fly)")
    p.add_argument("--scene-id")
    p.add_argument("--lane")
    p.add_argument("--codec", type=Path)
    p.add_argument("--base", type=Path)
    p.add_argument("--acm", type=Path)
    p.add_argument("--vcm", type=Path)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--length", type=int, help="number of frames to generate (default: whole lane)")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("evaluate", help="score generated sequences against references")
    _add_pipeline_args(p)
    p.add_argument("--pred", type=Path)
    p.add_argument("--gt", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("run-stage", help="run one pipeline stage")
    p.add_argument("name", choices=pl.STAGES)
    _add_pipeline_args(p)

    p = sub.add_parser("run-all", help="run every pipeline stage in order")
    _add_pipeline_args(p)
    return ap


def _need(args, *names):
    missing = [n for n in names if getattr(args, n.replace("-", "_")) is None]
    if missing:
        raise pl.ConfigError(f"{args.command} without --config needs " + ", ".join(f"--{n}" for n in missing))


def _standalone(args) -> None:
    import torch

    from .dataset import DatasetManifest

    torch.set_num_threads(1)
    cmd = args.command
    if cmd == "gen-data":
        from .dataset import TrajectorySpec, generate_dataset

        _need(args, "out")
        generate_dataset(args.seed, args.scenes, args.buildings, args.out,
                         spec=TrajectorySpec(width=args.width, height=args.height), force=args.force)
    elif cmd == "fit-scene":
        from .sugar import FitConfig, fit_scene, init_from_depth

        _need(args, "manifest", "out")
        m = DatasetManifest.load(args.manifest)
        sid = args.scene_id or m.scene_ids("train")[0]
        init = init_from_depth(m, args.points, seed=args.seed, scene_id=sid)
        scene, rep = fit_scene(m, init, FitConfig(iterations=args.iters, lambda_sdf=args.lambda_sdf, seed=args.seed),
                               scene_id=sid)
        args.out.mkdir(parents=True, exist_ok=True)
        scene.save(args.out / f"{sid}.bin")
        rep.save(args.out / f"{sid}_report.json")
    elif cmd == "render-priors":
        from .gaussians import SceneModel

        _need(args, "manifest", "scene", "out")
        m = DatasetManifest.load(args.manifest)
        sid = args.scene_id or args.scene.stem
        entries = pl.render_priors(SceneModel.load(args.scene), m, sid, args.out / sid)
        (args.out / sid / "index.json").write_text(json.dumps(entries, indent=1, sort_keys=True))
    elif cmd == "train-codec":
        from .diffusion.codec import CodecConfig, train_codec

        _need(args, "manifest", "out")
        m = DatasetManifest.load(args.manifest)
        train = np.concatenate([pl.ground_images(m, s) for s in m.scene_ids("train")])
        hold = np.concatenate([pl.ground_images(m, s) for s in m.scene_ids("test")])
        codec, rep = train_codec(train, CodecConfig(steps=args.steps, seed=args.seed), holdout=hold)
        args.out.mkdir(parents=True, exist_ok=True)
        codec.save(args.out / "codec.skyw")
        log.info("codec holdout PSNR %.2f dB", rep.holdout_psnr)
    elif cmd == "train-ldm":
        from .diffusion.codec import LatentCodec
        from .diffusion.ldm import TrainConfig, save_denoiser, train_ldm
        from .diffusion.schedule import NoiseSchedule

        _need(args, "manifest", "codec", "out")
        m = DatasetManifest.load(args.manifest)
        codec = LatentCodec.load(args.codec).eval()
        lat = pl._encode(codec, np.concatenate([pl.ground_images(m, s) for s in m.scene_ids("train")]))
        schedule = NoiseSchedule()
        net, prompt, _ = train_ldm(lat, schedule, cfg=TrainConfig(steps=args.steps, seed=args.seed))
        args.out.mkdir(parents=True, exist_ok=True)
        save_denoiser(args.out / "denoiser.skyw", net, prompt, schedule)
    elif cmd in ("train-acm", "train-vcm", "infer"):
        _standalone_models(args)
    elif cmd == "evaluate":
        from .metrics import evaluate

        _need(args, "pred", "gt", "out")
        evaluate(args.pred, args.gt, args.out, seed=args.seed)


def _standalone_models(args) -> None:
    from .consistency import ConsistencyNet, LatentSequence, generate_long, train_vcm
    from .control import ControlBranch, images_to_tensor, train_acm
    from .dataset import DatasetManifest
    from .diffusion.codec import LatentCodec
    from .diffusion.ldm import TrainConfig, load_denoiser

    cmd = args.command
    _need(args, "manifest", "codec", "base", "out")
    m = DatasetManifest.load(args.manifest)
    codec = LatentCodec.load(args.codec).eval()
    base, prompt, schedule, _ = load_denoiser(args.base)
    base.eval()
    if cmd == "train-acm":
        _need(args, "priors")
        pri, imgs = [], []
        for sid in pl.fitted_scene_ids(args.priors):
            for lane in m.lanes(sid):
                pri.append(pl.load_priors(args.priors, m, sid, lane["lane_id"]))
                imgs.append(pl.ground_images(m, sid, lane["lane_id"]))
        branch, _ = train_acm(images_to_tensor(np.concatenate(pri)), pl._encode(codec, np.concatenate(imgs)), base,
                              prompt, schedule, TrainConfig(steps=args.iters, batch_size=8, seed=args.seed),
                              factor=codec.factor)
        args.out.mkdir(parents=True, exist_ok=True)
        branch.save(args.out / "control.skyw")
        return
    _need(args, "acm")
    branch = ControlBranch.load(args.acm).eval()
    if cmd == "train-vcm":
        _need(args, "priors")
        seqs = []
        for sid in pl.fitted_scene_ids(args.priors):
            for lane in m.lanes(sid):
                p = pl.load_priors(args.priors, m, sid, lane["lane_id"])
                lat = pl._encode(codec, pl.ground_images(m, sid, lane["lane_id"]))
                seqs.append(LatentSequence(lat, images_to_tensor(p)))
        net, _ = train_vcm(seqs, base, branch, prompt, schedule, args.frames,
                           TrainConfig(steps=args.iters, batch_size=2, lr=2e-3, seed=args.seed))
        args.out.mkdir(parents=True, exist_ok=True)
        net.save(args.out / "consistency.skyw")
        return
    # infer
    from .dataset import save_png
    from .gaussians import SceneModel
    from .splat import render_prior

    _need(args, "scene", "vcm")
    sid = args.scene_id or args.scene.stem
    lane = args.lane or m.lanes(sid)[0]["lane_id"]
    recs = m.records(sid, lane)[: args.length]
    scene = SceneModel.load(args.scene)
    priors = np.stack([render_prior(scene, r.ground_pose, index=r.index).rgb for r in recs])
    vcm = ConsistencyNet.load(args.vcm).eval()
    seq = generate_long(priors, args.frames, vcm, branch, base, prompt, codec, schedule, seed=args.seed,
                        steps=args.steps)
    args.out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(seq.frames):
        save_png(args.out / f"{i:04d}.png", f)
    (args.out / "sequence.json").write_text(json.dumps({
        "scene_id": sid, "lane_id": lane, "seed": args.seed, "windows": seq.windows,
        "ground_images": [r.ground_image for r in recs],
    }, indent=1))  # fmt: skip


def _load_cfg(args) -> pl.PipelineConfig:
    cfg = pl.PipelineConfig.load(args.config)
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "run-all":
            if args.config is None:
                raise pl.ConfigError("run-all needs --config")
            for r in pl.run_all(_load_cfg(args), force=args.force):
                print(f"{r.stage}: {r.status}")
        elif args.command == "run-stage" or args.config is not None:
            if args.config is None:
                raise pl.ConfigError("run-stage needs --config")
            name = args.name if args.command == "run-stage" else args.command
            r = pl.run_stage(name, _load_cfg(args), force=args.force)
            print(f"{r.stage}: {r.status}")
        else:
            _standalone(args)
    except pl.PipelineError as e:
        print(f"skyforge: error: {e}", file=sys.stderr)
        return e.exit_code
    except (FitDivergedError, TrainingDivergedError, FloatingPointError) as e:
        print(f"skyforge: numerical failure: {e}", file=sys.stderr)
        return 4
    except FileNotFoundError as e:
        print(f"skyforge: error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"skyforge: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
