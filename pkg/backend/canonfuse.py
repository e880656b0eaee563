# backend/canonfuse.py
# canonfuse command line: synth | fuse | render | eval | train-denoiser | diffuse-sample

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from core.conditioning import (
    DOWNSCALE,
    LATENT_CHANNELS,
    ConditioningPair,
    latent_decode,
    load_conditioning,
    save_conditioning,
)
from core.config import RenderMode, load_config, write_resolved
from core.diffusion import (
    MLPDenoiser,
    make_schedule,
    sample_saved,
    save_model,
)
from core.errors import CanonFuseError, ConfigError
from core.fusion import load_state, save_state
from core.pipeline import (
    fit_stream_model,
    fuse_stream,
    load_renderer,
    render_view,
    run_stream,
)
from core.scene_io import gt_frame_path, load_scene, save_png, write_scene_dir
from core.synth import SyntheticScene, build_scene, jitter_sequence, render_gt, split_turn_sequence
from core.tensorio import write_tensor
from core.training import toy_task, train_denoiser

logger = logging.getLogger("canonfuse")

EXIT_OK = 0


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got '{item}'")
        out[key.strip()] = value.strip()
    return out


def _config(args, **extra):
    overrides = _overrides(getattr(args, "set", None))
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return load_config(getattr(args, "config", None), overrides)


def _schedule(cfg):
    d = cfg.diffusion
    return make_schedule(d.steps_train, d.beta_start, d.beta_end, cfg.stream.inference_steps)


def _schedule_meta(cfg):
    d = cfg.diffusion
    return {"steps_train": d.steps_train, "beta_start": d.beta_start, "beta_end": d.beta_end}


# -------------------------------------------------------------------
# Commands
# -------------------------------------------------------------------
def cmd_synth(args):
    cfg = _config(args, **{"scene.preset": args.preset, "scene.frames": args.frames,
                           "scene.seed": args.seed, "scene.sequence": args.sequence,
                           "stream.resolution": args.resolution})
    sc = cfg.scene
    scene = build_scene(sc.preset, sc.frames, cfg.stream.resolution, sc.seed, sc.vertex_budget,
                        sc.sequence, background=sc.background)
    poses = scene.sequence(sc.sequence)
    if args.front_frames is not None:
        poses = split_turn_sequence(sc.frames, args.front_frames, scene.mesh.num_joints)
    if sc.jitter > 0:
        poses = jitter_sequence(poses, sc.jitter, sc.seed)
    scene = SyntheticScene(scene.mesh, scene.texture, scene.cameras, {"main": poses}, scene.background)

    out = write_scene_dir(args.out, scene)
    for t, pose in enumerate(poses):
        for name, cam in scene.cameras.items():
            save_png(gt_frame_path(out, name, t), render_gt(scene, pose, cam))
    write_resolved(cfg, out)
    logger.info("wrote %s: %d vertices, %d frames, cameras %s", out, scene.mesh.num_vertices,
                len(poses), ", ".join(scene.cameras))
    return EXIT_OK


def cmd_fuse(args):
    cfg = _config(args, **{"stream.snapshot_every": args.snapshot_every,
                           "stream.features_from": str(args.features_from) if args.features_from else None})
    scene, scene_dir = load_scene(args.scene, args.seq)
    out = Path(args.out)
    state, curve = fuse_stream(scene, cfg, num_frames=args.frames, out_dir=out.parent, scene_dir=scene_dir)
    save_state(out, state, {"context_mode": cfg.stream.context_mode.value, "coverage": curve})
    logger.info("fused %d frames, final coverage %.4f -> %s", len(curve), curve[-1], out)
    return EXIT_OK


def cmd_render(args):
    cfg = _config(args)
    scene, scene_dir = load_scene(args.scene, args.seq)
    state = load_state(args.state)[0] if args.state else None
    mode = RenderMode(args.mode)
    if mode is not RenderMode.NONE and not args.params:
        raise ConfigError(f"--params is required for --mode {mode.value}")
    W, H = scene.camera(cfg.stream.input_camera).resolution
    latent_shape = (H // DOWNSCALE, W // DOWNSCALE, LATENT_CHANNELS)
    renderer = load_renderer(args.params, mode, cfg.stream.context_mode, _schedule(cfg), latent_shape,
                             args.steps or cfg.stream.inference_steps, cfg.stream.sampler, scene.background)
    view = render_view(scene, state, args.frame, args.camera, renderer, cfg.stream.input_camera,
                       args.seed, scene_dir=scene_dir)
    save_png(args.out, view.image)
    if args.cond_out:
        save_conditioning(args.cond_out, view.conditioning)
    logger.info("rendered %s frame %d (%s): masked PSNR %.2f dB", args.camera, args.frame, mode.value, view.psnr)
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    scene, scene_dir = load_scene(args.scene)
    result = run_stream(scene, cfg, out_dir=args.out, num_frames=args.frames, scene_dir=scene_dir)
    report = result.report
    for camera in report.cameras:
        logger.info("%s: mean masked PSNR %.2f dB", camera, report.mean_psnr(camera))
    return EXIT_OK


def cmd_train_denoiser(args):
    cfg = _config(args)
    tc = cfg.training
    schedule = _schedule(cfg)
    if args.task == "stream":
        if not args.scene:
            raise ConfigError("--task stream needs --scene")
        scene, _ = load_scene(args.scene)
        model = fit_stream_model(scene, cfg, probabilistic=not args.decoder, schedule=schedule)
    else:
        task = toy_task("gauss" if args.task == "gauss" else "mixture")
        model = MLPDenoiser.create(task.latent_shape, task.context_channels, task.live_channels,
                                   hidden=tc.hidden, embed_dim=tc.embed_dim, schedule=schedule, seed=tc.seed)
        train_denoiser(model, task.draw, tc.steps, tc.lr, tc.momentum, tc.batch_size, tc.seed, tc.log_every)
        if args.cond_out:
            pair = task.cond(1)
            save_conditioning(args.cond_out, ConditioningPair(pair.context[0], pair.live[0]))
    save_model(args.out, model, _schedule_meta(cfg))
    logger.info("saved %s parameters to %s", model.meta()["kind"], args.out)
    return EXIT_OK


def cmd_diffuse_sample(args):
    cfg = _config(args)
    cond = load_conditioning(args.cond)
    z = sample_saved(args.params, cond, args.seed, args.steps, args.sampler or cfg.stream.sampler,
                     cfg.diffusion.model_dump())
    write_tensor(args.out, z.data.astype(np.float32))
    if args.png:
        save_png(args.png, latent_decode(z))
    logger.info("sampled latent %s with seed %d -> %s", z.shape, args.seed, args.out)
    return EXIT_OK


# -------------------------------------------------------------------
# Parser
# -------------------------------------------------------------------
def build_parser():
    parser = argparse.ArgumentParser(prog="canonfuse", description="Canonical-space feature fusion for novel views")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="run configuration (INI sections)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        return p

    p = common(sub.add_parser("synth", help="write a synthetic scene directory with GT frames"))
    p.add_argument("--preset", choices=["stripes", "checker", "logo"], default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--sequence", default=None, help="turntable | armswing | lean | jitter")
    p.add_argument("--front-frames", type=int, default=None, help="face the input camera this long, then turn away")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("fuse", help="fuse a stream into a canonical snapshot"))
    p.add_argument("--scene", type=Path, required=True, help="scene directory or scene.txt")
    p.add_argument("--seq", type=Path, default=None, help="poses file (defaults to poses.txt beside the scene)")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--snapshot-every", type=int, default=None)
    p.add_argument("--features-from", type=Path, default=None, help="directory of frame_%%04d.cft feature tensors")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fuse)

    p = common(sub.add_parser("render", help="render one novel view from a canonical snapshot"))
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--seq", type=Path, default=None)
    p.add_argument("--state", type=Path, default=None, help="canonical snapshot; omit for no history")
    p.add_argument("--camera", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--mode", choices=[m.value for m in RenderMode], default=RenderMode.NONE.value)
    p.add_argument("--params", type=Path, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cond-out", type=Path, default=None, help="also write the conditioning pair")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_render)

    p = common(sub.add_parser("eval", help="run the stream and write a metrics report"))
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("train-denoiser", help="fit denoiser parameters"))
    p.add_argument("--task", choices=["gauss", "mixture", "stream"], required=True)
    p.add_argument("--scene", type=Path, default=None)
    p.add_argument("--decoder", action="store_true", help="stream task: fit the deterministic decoder instead")
    p.add_argument("--cond-out", type=Path, default=None, help="toy tasks: write an example conditioning pair")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train_denoiser)

    p = common(sub.add_parser("diffuse-sample", help="sample a latent from saved parameters"))
    p.add_argument("--params", type=Path, required=True)
    p.add_argument("--cond", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--sampler", choices=["ddim", "ddpm"], default=None)
    p.add_argument("--png", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_diffuse_sample)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CanonFuseError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
