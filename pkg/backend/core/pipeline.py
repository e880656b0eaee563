# backend/core/pipeline.py
# Stream orchestration: history selection, per-frame fuse / densify / render,
# renderer fitting on a training motion, snapshots, and the metrics report.

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from core.conditioning import (
    DOWNSCALE,
    LATENT_CHANNELS,
    PREVIEW_GRAY,
    ConditioningPair,
    build_conditioning,
    context_preview,
    densify_context,
    latent_decode,
    latent_encode,
    normal_context,
)
from core.config import ContextMode, RenderMode, config_hash, write_resolved
from core.diffusion import MLPDenoiser, deterministic_decode, load_model, make_rng, make_schedule, sample
from core.errors import ConfigError, DataError
from core.features import FeatureMode, build_pyramid, load_external_pyramid, sample_vertices, standardize
from core.fusion import CanonicalFusion, coverage, fuse_frame, init_canonical, save_state
from core.metrics import frame_diff, high_freq_energy, is_saturated, psnr
from core.projection import project
from core.raster import FeatureImage, rasterize, vertex_visibility
from core.scene_io import gt_frame_path, load_png, save_png
from core.synth import jitter_sequence, make_sequence, render_gt
from core.template import Pose, pose_vertices
from core.training import train_decoder, train_denoiser

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.tsv"
COVERAGE_FILE = "coverage.tsv"
TEMPORAL_FILE = "temporal.tsv"
META_FILE = "meta.json"
FRAME_PATTERN = "frame_{:04d}.png"
SNAPSHOT_PATTERN = "canonical_{:04d}"

METRIC_COLUMNS = ["t", "camera", "seed", "psnr", "saturated", "gt_available", "high_freq",
                  "coverage", "frame_diff", "gt_frame_diff"]
COVERAGE_COLUMNS = ["t", "coverage", "state_coverage"]

# name -> (context_mode, render_mode); None keeps the configured render mode
ABLATIONS = {
    "no_context": (ContextMode.NONE, None),
    "raw_rgb": (ContextMode.RAW_RGB, None),
    "features": (ContextMode.FEATURES, None),
    "deterministic": (ContextMode.FEATURES, RenderMode.DETERMINISTIC),
}


# -------------------------------------------------------------------
# History
# -------------------------------------------------------------------
def select_history(t, N, K):
    """{t, t-K, ..., t-NK} clipped at 0, deduplicated, ascending."""
    if t < 0:
        raise ConfigError(f"Frame index must be non-negative, got {t}")
    if N < 1 or K < 1:
        raise ConfigError(f"History length and stride must be positive, got N={N}, K={K}")
    return sorted({max(t - n * K, 0) for n in range(N + 1)})


def fold_observations(observations, num_vertices, channels):
    """Fuse (S_t, V_t) pairs in order from an empty canonical state."""
    state = init_canonical(num_vertices, channels)
    for s_t, v_t in observations:
        state = fuse_frame(state, s_t, v_t)
    return state


def frame_seed(base, t, camera_index):
    """Per-(frame, camera) sampling seed derived from the run seed."""
    return int(np.random.SeedSequence([int(base), int(t), int(camera_index)]).generate_state(1)[0])


# -------------------------------------------------------------------
# Frames
# -------------------------------------------------------------------
@dataclass(frozen=True)
class FrameRecord:
    image: FeatureImage
    camera: str
    pose: Pose
    time: int


def frame_record(scene, t, pose, camera_name, image):
    cam = scene.camera(camera_name)
    if (image.width, image.height) != cam.resolution:
        raise DataError(f"Frame {t} is {image.width}x{image.height}, camera '{camera_name}' expects "
                        f"{cam.resolution[0]}x{cam.resolution[1]}")
    return FrameRecord(image, camera_name, pose, int(t))


class FrameSource:
    """Input and ground-truth frames: rendered from the scene texture, or read from gt/ PNGs."""

    def __init__(self, scene, scene_dir=None):
        self.scene = scene
        self.scene_dir = Path(scene_dir) if scene_dir is not None else None

    def image(self, camera_name, t, pose, posed=None, buffer=None, required=False):
        cam = self.scene.camera(camera_name)
        if posed is None:
            posed = pose_vertices(self.scene.mesh, pose)
        if buffer is None:
            buffer = rasterize(posed, self.scene.mesh.faces, cam)
        if self.scene_dir is None:
            return render_gt(self.scene, pose, cam, posed=posed, buffer=buffer)

        path = gt_frame_path(self.scene_dir, camera_name, t)
        if not path.exists():
            if required:
                raise DataError(f"Missing frame {path}")
            logger.warning("No ground truth at %s; metrics for it are reported as absent", path)
            return None
        img = load_png(path)
        if (img.width, img.height) != cam.resolution:
            raise DataError(f"{path} is {img.width}x{img.height}, camera expects {cam.resolution}")
        return FeatureImage(img.data, buffer.mask, self.scene.background)


def extract_features(record, context_mode, features_from=None):
    if features_from:
        path = Path(features_from) / f"frame_{record.time:04d}.cft"
        if not path.exists():
            raise DataError(f"External features missing: {path}")
        return load_external_pyramid(path, record.image.width, record.image.height)
    if context_mode is ContextMode.FEATURES:
        return build_pyramid(record.image, FeatureMode.PYRAMID)
    if context_mode is ContextMode.RAW_RGB:
        return build_pyramid(record.image, FeatureMode.RAW_RGB)
    raise ConfigError("context_mode 'none' extracts no features")


def observe(mesh, record, camera, stream_cfg, posed=None, buffer=None):
    """(S_t, V_t) for one input frame."""
    if posed is None:
        posed = pose_vertices(mesh, record.pose)
    if buffer is None:
        buffer = rasterize(posed, mesh.faces, camera)
    projected = project(posed, camera)
    vis = vertex_visibility(posed, buffer, projected, stream_cfg.eps_depth, faces=mesh.faces)
    pyramid = extract_features(record, stream_cfg.context_mode, stream_cfg.features_from)
    s_t = sample_vertices(pyramid, projected, vis, record.time)
    if stream_cfg.standardize_features:
        s_t = standardize(s_t, vis)
    return s_t, vis


def context_image(state, pose, mesh, camera, context_mode, posed=None, buffer=None):
    """W_t for one novel camera; the live normal image when there is no history."""
    if context_mode is ContextMode.NONE or state is None:
        return normal_context(mesh, pose, camera, posed=posed, buffer=buffer)
    return densify_context(state, pose, mesh, camera, posed=posed, buffer=buffer)


# -------------------------------------------------------------------
# Renderer
# -------------------------------------------------------------------
@dataclass
class StreamRenderer:
    mode: RenderMode
    context_mode: ContextMode
    denoiser: Optional[MLPDenoiser] = None
    decoder: Optional[MLPDenoiser] = None
    schedule: object = None
    inference_steps: int = 10
    sampler: str = "ddim"
    background: float = 0.0

    def preview(self, w_t):
        if self.context_mode is ContextMode.NONE:
            gray = np.full(w_t.data.shape[:2] + (3,), PREVIEW_GRAY)
            return FeatureImage(gray, w_t.coverage, self.background)
        return context_preview(w_t, background=self.background)

    def render(self, w_t, live_image, t, seed):
        if self.mode is RenderMode.NONE:
            return self.preview(w_t)
        cond = build_conditioning(w_t, live_image, t)
        if self.mode is RenderMode.DETERMINISTIC:
            if self.decoder is None:
                raise ConfigError("Deterministic rendering needs a fitted decoder")
            z = deterministic_decode(cond, self.decoder)
        else:
            if self.denoiser is None:
                raise ConfigError("Probabilistic rendering needs a fitted denoiser")
            z = sample(self.denoiser, cond, self.schedule, seed,
                       inference_steps=self.inference_steps, sampler=self.sampler)
        return FeatureImage(latent_decode(z).data, w_t.coverage, self.background)


def training_motion(scene, training_cfg):
    poses = make_sequence(training_cfg.sequence, training_cfg.frames, scene.mesh.num_joints)
    if training_cfg.jitter > 0:
        poses = jitter_sequence(poses, training_cfg.jitter, training_cfg.seed)
    return poses


def stream_training_set(scene, config, poses=None):
    """Context / live / target-latent arrays built exactly as at inference.

    For every training frame a stride K is drawn from the training options and the
    canonical state is fused from select_history(t, N, K).
    """
    sc = config.stream
    poses = training_motion(scene, config.training) if poses is None else poses
    rng = make_rng(config.training.seed)
    mesh = scene.mesh
    input_cam = scene.camera(sc.input_camera)
    source = FrameSource(scene)

    observations, lives, posed_all = [], [], []
    for t, pose in enumerate(poses):
        posed = pose_vertices(mesh, pose)
        buf = rasterize(posed, mesh.faces, input_cam)
        record = frame_record(scene, t, pose, sc.input_camera, source.image(sc.input_camera, t, pose, posed, buf))
        lives.append(record.image)
        posed_all.append(posed)
        if sc.context_mode is not ContextMode.NONE:
            observations.append(observe(mesh, record, input_cam, sc, posed, buf))

    contexts, live, targets = [], [], []
    for t, pose in enumerate(poses):
        K = int(rng.choice(sc.stride_options_train))
        state = None
        if observations:
            hist = select_history(t, sc.history_len, K)
            state = fold_observations([observations[i] for i in hist], mesh.num_vertices,
                                      observations[0][0].channels)
        for name in sc.novel_cameras:
            cam = scene.camera(name)
            buf = rasterize(posed_all[t], mesh.faces, cam)
            w_t = context_image(state, pose, mesh, cam, sc.context_mode, posed_all[t], buf)
            cond = build_conditioning(w_t, lives[t], t)
            gt = render_gt(scene, pose, cam, posed=posed_all[t], buffer=buf)
            contexts.append(cond.context)
            live.append(cond.live)
            targets.append(latent_encode(gt).data)
    logger.info("built %d stream training samples from %d frames", len(targets), len(poses))
    return np.stack(contexts), np.stack(live), np.stack(targets)


def _bind(model, latent_shape, schedule):
    if model.pointwise and tuple(model.latent_shape) != tuple(latent_shape):
        model = replace(model, latent_shape=tuple(latent_shape))
    return replace(model, schedule=schedule)


def load_renderer(path, render_mode, context_mode, schedule, latent_shape, inference_steps=10,
                  sampler="ddim", background=0.0):
    """Renderer around saved denoiser or decoder parameters."""
    renderer = StreamRenderer(render_mode, context_mode, schedule=schedule, inference_steps=inference_steps,
                              sampler=sampler, background=background)
    if render_mode is RenderMode.NONE:
        return renderer
    probabilistic = render_mode is RenderMode.PROBABILISTIC
    model = _bind(load_model(path, schedule), latent_shape, schedule)
    if model.noise_input != probabilistic:
        kind = "decoder" if probabilistic else "denoiser"
        raise ConfigError(f"{path} holds a {kind}; render_mode {render_mode.value} needs the other kind")
    if probabilistic:
        renderer.denoiser = model
    else:
        renderer.decoder = model
    logger.info("loaded renderer parameters from %s", path)
    return renderer


def fit_stream_model(scene, config, probabilistic=True, schedule=None):
    """Pointwise denoiser (or, with probabilistic=False, decoder) fitted on the training motion."""
    sc, tc, dc = config.stream, config.training, config.diffusion
    if schedule is None:
        schedule = make_schedule(dc.steps_train, dc.beta_start, dc.beta_end, sc.inference_steps)
    W, H = scene.camera(sc.input_camera).resolution
    latent_shape = (H // DOWNSCALE, W // DOWNSCALE, LATENT_CHANNELS)
    ctx, live, z0 = stream_training_set(scene, config)
    model = MLPDenoiser.create(latent_shape, ctx.shape[-1], live.shape[-1], hidden=tc.hidden,
                               embed_dim=tc.embed_dim, pointwise=True, noise_input=probabilistic,
                               schedule=schedule, seed=tc.seed)
    if probabilistic:
        def draw(rng, n):
            sel = rng.integers(0, len(z0), size=n)
            return z0[sel], ConditioningPair(ctx[sel], live[sel])

        train_denoiser(model, draw, tc.steps, tc.lr, tc.momentum, tc.batch_size, tc.seed, tc.log_every)
    else:
        train_decoder(model, ConditioningPair(ctx, live), z0, tc.steps, tc.lr, tc.momentum,
                      tc.batch_size, tc.seed, tc.log_every)
    return model


def build_renderer(scene, config):
    """Renderer for run_stream; parameters are loaded, or fitted on the training motion."""
    sc, tc, dc = config.stream, config.training, config.diffusion
    schedule = make_schedule(dc.steps_train, dc.beta_start, dc.beta_end, sc.inference_steps)
    renderer = StreamRenderer(sc.render_mode, sc.context_mode, schedule=schedule,
                              inference_steps=sc.inference_steps, sampler=sc.sampler,
                              background=scene.background)
    if sc.render_mode is RenderMode.NONE:
        return renderer

    W, H = scene.camera(sc.input_camera).resolution
    latent_shape = (H // DOWNSCALE, W // DOWNSCALE, LATENT_CHANNELS)
    probabilistic = sc.render_mode is RenderMode.PROBABILISTIC
    path = tc.denoiser_params if probabilistic else tc.decoder_params
    if path:
        return load_renderer(path, sc.render_mode, sc.context_mode, schedule, latent_shape,
                             sc.inference_steps, sc.sampler, scene.background)

    model = fit_stream_model(scene, config, probabilistic, schedule)
    if probabilistic:
        renderer.denoiser = model
    else:
        renderer.decoder = model
    return renderer


# -------------------------------------------------------------------
# Report
# -------------------------------------------------------------------
@dataclass
class MetricsReport:
    frames: pd.DataFrame
    coverage: pd.DataFrame
    meta: dict = field(default_factory=dict)

    @property
    def temporal(self):
        """Mean frame-to-frame change per camera, rendered vs ground truth."""
        return (self.frames.groupby("camera", sort=False)[["frame_diff", "gt_frame_diff"]]
                .mean().reset_index())

    @property
    def cameras(self):
        return list(self.frames["camera"].unique())

    def psnr_series(self, camera):
        rows = self.frames[self.frames["camera"] == camera]
        return rows.set_index("t")["psnr"]

    def mean_psnr(self, camera=None):
        rows = self.frames[self.frames["gt_available"]]
        if camera is not None:
            rows = rows[rows["camera"] == camera]
        return float(rows["psnr"].mean())

    def equals(self, other):
        return self.frames.equals(other.frames) and self.coverage.equals(other.coverage) and self.meta == other.meta

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.frames.to_csv(out / METRICS_FILE, sep="\t", index=False)
        self.coverage.to_csv(out / COVERAGE_FILE, sep="\t", index=False)
        self.temporal.to_csv(out / TEMPORAL_FILE, sep="\t", index=False)
        (out / META_FILE).write_text(json.dumps(self.meta, indent=2, sort_keys=True))
        return out

    @classmethod
    def read(cls, out_dir):
        out = Path(out_dir)
        try:
            frames = pd.read_csv(out / METRICS_FILE, sep="\t")
            cov = pd.read_csv(out / COVERAGE_FILE, sep="\t")
            meta = json.loads((out / META_FILE).read_text()) if (out / META_FILE).exists() else {}
        except FileNotFoundError as e:
            raise DataError(f"Incomplete report in {out}: {e}") from e
        return cls(frames, cov, meta)


@dataclass
class StreamResult:
    report: MetricsReport
    state: object = None
    renders: dict = field(default_factory=dict)


def write_snapshot(out_dir, t, state, scene, camera):
    """Canonical bank at t plus its rest-pose preview (gray where counts are 0)."""
    out = Path(out_dir)
    stem = SNAPSHOT_PATTERN.format(t)
    save_state(out / "snapshots" / f"{stem}.cft", state, {"t": int(t)})
    rest = Pose.identity(scene.mesh.num_joints, t)
    w = densify_context(state, rest, scene.mesh, camera)
    save_png(out / "progression" / f"{stem}.png", context_preview(w, background=scene.background))
    logger.info("wrote canonical snapshot %s", stem)


def _snapshot_due(t, last, every):
    return every > 0 and ((t + 1) % every == 0 or t == last)


# -------------------------------------------------------------------
# Stream
# -------------------------------------------------------------------
@dataclass
class StreamStep:
    t: int
    pose: Pose
    posed: object
    image: FeatureImage
    state: object
    coverage: float
    state_coverage: float


def iter_stream(scene, config, poses, source):
    """Fuse the input stream in order, yielding the canonical state used at every t.

    Without `window` every frame seen so far is fused; with it only
    select_history(t, N, stride) is.
    """
    sc = config.stream
    mesh = scene.mesh
    input_cam = scene.camera(sc.input_camera)
    fusion = None
    window = {}
    for t, pose in enumerate(poses):
        posed = pose_vertices(mesh, pose)
        buf = rasterize(posed, mesh.faces, input_cam)
        image = source.image(sc.input_camera, t, pose, posed, buf, required=True)
        record = frame_record(scene, t, pose, sc.input_camera, image)
        if sc.context_mode is ContextMode.NONE:
            yield StreamStep(t, pose, posed, image, None, 0.0, 0.0)
            continue

        s_t, v_t = observe(mesh, record, input_cam, sc, posed, buf)
        if fusion is None:
            fusion = CanonicalFusion(mesh.num_vertices, s_t.channels)
        state = fusion.push(s_t, v_t)
        if sc.window:
            window[t] = (s_t, v_t)
            hist = select_history(t, sc.history_len, sc.stride)
            for old in [k for k in window if k < hist[0]]:
                del window[old]
            state = fold_observations([window[i] for i in hist], mesh.num_vertices, s_t.channels)
        yield StreamStep(t, pose, posed, image, state, fusion.coverage_curve[-1], coverage(state))


def _poses(scene, sequence, num_frames):
    poses = scene.sequence(sequence)
    if num_frames is not None:
        if num_frames < 1:
            raise ConfigError("num_frames must be at least 1")
        poses = poses[:num_frames]
    return poses


def fuse_stream(scene, config, sequence=None, num_frames=None, out_dir=None, scene_dir=None):
    """Fusion only: final canonical state and its coverage curve."""
    poses = _poses(scene, sequence, num_frames)
    if config.stream.context_mode is ContextMode.NONE:
        raise ConfigError("context_mode 'none' fuses nothing")
    every = config.stream.snapshot_every
    input_cam = scene.camera(config.stream.input_camera)
    state, curve = None, []
    for step in iter_stream(scene, config, poses, FrameSource(scene, scene_dir)):
        state = step.state
        curve.append(step.coverage)
        if out_dir is not None and _snapshot_due(step.t, len(poses) - 1, every):
            write_snapshot(out_dir, step.t, state, scene, input_cam)
    return state, curve


def run_stream(scene, config, sequence=None, out_dir=None, num_frames=None, renderer=None,
               scene_dir=None, keep_renders=False):
    """Process the stream in order and score every novel-camera render against ground truth."""
    sc = config.stream
    poses = _poses(scene, sequence, num_frames)
    mesh = scene.mesh
    novel = [(name, scene.camera(name)) for name in sc.novel_cameras]
    input_cam = scene.camera(sc.input_camera)
    if renderer is None:
        renderer = build_renderer(scene, config)
    source = FrameSource(scene, scene_dir)
    save_frames = out_dir is not None and sc.save_frames
    last = len(poses) - 1

    rows, cov_rows, renders = [], [], {}
    prev = {}
    state = None
    for step in iter_stream(scene, config, poses, source):
        started = time.perf_counter()
        t, state = step.t, step.state
        cov_rows.append({"t": t, "coverage": step.coverage, "state_coverage": step.state_coverage})
        for index, (name, cam) in enumerate(novel):
            buf = rasterize(step.posed, mesh.faces, cam)
            w_t = context_image(state, step.pose, mesh, cam, sc.context_mode, step.posed, buf)
            seed = frame_seed(sc.seed, t, index)
            out = renderer.render(w_t, step.image, t, seed)
            gt = source.image(name, t, step.pose, step.posed, buf)
            mask = buf.mask

            row = {"t": t, "camera": name, "seed": seed, "psnr": np.nan, "saturated": False,
                   "gt_available": gt is not None and bool(mask.any()), "high_freq": np.nan,
                   "coverage": step.coverage, "frame_diff": np.nan, "gt_frame_diff": np.nan}
            if mask.any():
                row["high_freq"] = high_freq_energy(out, mask)
            if row["gt_available"]:
                row["psnr"] = psnr(out, gt, mask)
                row["saturated"] = is_saturated(row["psnr"])
            if name in prev:
                p_out, p_gt, p_mask = prev[name]
                both = mask | p_mask
                if both.any():
                    row["frame_diff"] = frame_diff(p_out, out, both)
                    if gt is not None and p_gt is not None:
                        row["gt_frame_diff"] = frame_diff(p_gt, gt, both)
            prev[name] = (out, gt, mask)
            rows.append(row)

            if keep_renders:
                renders[(t, name)] = out
            if save_frames:
                save_png(Path(out_dir) / "frames" / name / FRAME_PATTERN.format(t), out)

        if out_dir is not None and state is not None and _snapshot_due(t, last, sc.snapshot_every):
            write_snapshot(out_dir, t, state, scene, input_cam)
        logger.info("frame %d/%d coverage %.4f", t + 1, len(poses), step.coverage)
        logger.debug("frame %d rendered in %.3fs", t, time.perf_counter() - started)

    frames = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    cov = pd.DataFrame(cov_rows, columns=COVERAGE_COLUMNS)
    meta = {
        "config_hash": config_hash(config),
        "seed": sc.seed,
        "training_seed": config.training.seed,
        "render_mode": sc.render_mode.value,
        "context_mode": sc.context_mode.value,
        "window": sc.window,
        "frames": len(poses),
        "input_camera": sc.input_camera,
        "novel_cameras": list(sc.novel_cameras),
    }
    report = MetricsReport(frames, cov, meta)
    if out_dir is not None:
        report.write(out_dir)
        write_resolved(config, out_dir)
    return StreamResult(report, state, renders)


@dataclass(frozen=True)
class RenderedView:
    image: FeatureImage
    context: FeatureImage
    live: FeatureImage
    ground_truth: Optional[FeatureImage]
    psnr: float

    @property
    def conditioning(self):
        return build_conditioning(self.context, self.live)


def render_view(scene, state, t, camera_name, renderer, input_camera="front", seed=0,
                sequence=None, scene_dir=None):
    """One novel view at frame t from a given canonical state (None means no history)."""
    poses = scene.sequence(sequence)
    if not 0 <= t < len(poses):
        raise ConfigError(f"Frame {t} outside the sequence (0..{len(poses) - 1})")
    pose = poses[t]
    mesh = scene.mesh
    source = FrameSource(scene, scene_dir)
    posed = pose_vertices(mesh, pose)
    live = source.image(input_camera, t, pose, posed, required=True)
    cam = scene.camera(camera_name)
    buf = rasterize(posed, mesh.faces, cam)
    if state is None:
        renderer = replace(renderer, context_mode=ContextMode.NONE)
    w_t = context_image(state, pose, mesh, cam, renderer.context_mode, posed, buf)
    out = renderer.render(w_t, live, t, seed)
    gt = source.image(camera_name, t, pose, posed, buf)
    value = psnr(out, gt, buf.mask) if gt is not None and buf.mask.any() else float("nan")
    return RenderedView(out, w_t, live, gt, value)


# -------------------------------------------------------------------
# Ablations
# -------------------------------------------------------------------
def ablation_config(config, name):
    try:
        context_mode, render_mode = ABLATIONS[name]
    except KeyError as e:
        raise ConfigError(f"Unknown ablation '{name}', expected one of {sorted(ABLATIONS)}") from e
    update = {"context_mode": context_mode}
    if render_mode is not None:
        update["render_mode"] = render_mode
    return config.model_copy(update={"stream": config.stream.model_copy(update=update)})


def run_ablation(scene, config, names=tuple(ABLATIONS), sequence=None, num_frames=None):
    """One report per ablation configuration, same scene and seeds."""
    reports = {}
    for name in names:
        logger.info("ablation %s", name)
        reports[name] = run_stream(scene, ablation_config(config, name), sequence, num_frames=num_frames).report
    return reports
