from fastapi import APIRouter, HTTPException
from pydantic import BaseModel
from typing import Optional
import base64
import logging
import math

from core.conditioning import DOWNSCALE, LATENT_CHANNELS
from core.config import RenderMode, load_config
from core.diffusion import make_schedule
from core.errors import ConfigError, DataError
from core.fusion import load_state
from core.pipeline import load_renderer, render_view
from core.scene_io import load_scene, png_bytes

router = APIRouter()


class RenderRequest(BaseModel):
    scene_dir: str
    camera: str
    frame: int = 0
    state_path: Optional[str] = None
    mode: RenderMode = RenderMode.NONE
    params_path: Optional[str] = None
    seed: int = 0
    overrides: dict[str, str] = {}


@router.post("/")
def render(req: RenderRequest):
    """
    Renders one novel view from a canonical snapshot as a base64 PNG.
    """

    try:
        cfg = load_config(overrides=req.overrides)
        scene, scene_dir = load_scene(req.scene_dir)
        state = load_state(req.state_path)[0] if req.state_path else None
        if req.mode is not RenderMode.NONE and not req.params_path:
            raise ConfigError(f"params_path is required for mode {req.mode.value}")

        d = cfg.diffusion
        schedule = make_schedule(d.steps_train, d.beta_start, d.beta_end, cfg.stream.inference_steps)
        W, H = scene.camera(cfg.stream.input_camera).resolution
        renderer = load_renderer(req.params_path, req.mode, cfg.stream.context_mode, schedule,
                                 (H // DOWNSCALE, W // DOWNSCALE, LATENT_CHANNELS),
                                 cfg.stream.inference_steps, cfg.stream.sampler, scene.background)
        view = render_view(scene, state, req.frame, req.camera, renderer, cfg.stream.input_camera,
                           req.seed, scene_dir=scene_dir)

        value = view.psnr
        return {
            "camera": req.camera,
            "frame": req.frame,
            "mode": req.mode.value,
            "image_png": base64.b64encode(png_bytes(view.image)).decode("ascii"),
            "psnr": None if math.isnan(value) or math.isinf(value) else value,
            "saturated": math.isinf(value),
        }

    except ConfigError as e:
        logging.exception("Bad request in /render/")
        raise HTTPException(status_code=400, detail=str(e))
    except DataError as e:
        logging.exception("Bad data in /render/")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logging.exception("Error in /render/")
        raise HTTPException(
            status_code=500,
            detail=f"Render failed: {str(e)}"
        )
