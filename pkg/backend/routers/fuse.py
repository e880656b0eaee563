from fastapi import APIRouter, HTTPException
from pydantic import BaseModel
from typing import Optional
import logging

from core.config import load_config
from core.errors import ConfigError, DataError
from core.fusion import save_state
from core.pipeline import fuse_stream
from core.scene_io import load_scene

router = APIRouter()


class FuseRequest(BaseModel):
    scene_dir: str
    frames: Optional[int] = None
    overrides: dict[str, str] = {}
    out_path: Optional[str] = None


@router.post("/")
def fuse(req: FuseRequest):
    """
    Fuses the scene's input stream; returns the coverage curve.
    """

    try:
        cfg = load_config(overrides=req.overrides)
        scene, scene_dir = load_scene(req.scene_dir)
        state, curve = fuse_stream(scene, cfg, num_frames=req.frames, scene_dir=scene_dir)

        if req.out_path:
            save_state(req.out_path, state, {"context_mode": cfg.stream.context_mode.value, "coverage": curve})

        return {
            "coverage": curve,
            "frames_fused": state.frames_fused,
            "channels": state.channels,
            "state_path": req.out_path,
        }

    except ConfigError as e:
        logging.exception("Bad request in /fuse/")
        raise HTTPException(status_code=400, detail=str(e))
    except DataError as e:
        logging.exception("Bad data in /fuse/")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logging.exception("Error in /fuse/")
        raise HTTPException(
            status_code=500,
            detail=f"Fuse failed: {str(e)}"
        )
