from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field
from typing import Literal
import logging

from core.conditioning import load_conditioning
from core.diffusion import sample_saved
from core.errors import ConfigError, DataError

router = APIRouter()


class SampleRequest(BaseModel):
    params_path: str
    cond_path: str
    seed: int = Field(0, ge=0)
    steps: int = Field(10, ge=1)
    sampler: Literal["ddim", "ddpm"] = "ddim"


@router.post("/sample")
def diffusion_sample(req: SampleRequest):
    """
    Samples one latent from saved denoiser parameters and a conditioning pair.
    """

    try:
        cond = load_conditioning(req.cond_path)
        z = sample_saved(req.params_path, cond, req.seed, req.steps, req.sampler)

        return {
            "latent": z.data.tolist(),
            "shape": list(z.shape),
            "seed": req.seed,
        }

    except ConfigError as e:
        logging.exception("Bad request in /diffusion/sample")
        raise HTTPException(status_code=400, detail=str(e))
    except DataError as e:
        logging.exception("Bad data in /diffusion/sample")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logging.exception("Error in /diffusion/sample")
        raise HTTPException(
            status_code=500,
            detail=f"Sampling failed: {str(e)}"
        )
