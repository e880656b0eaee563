# frontend/utils/api_helpers.py
import base64
import io

import numpy as np
from PIL import Image


def clean_overrides(overrides):
    """section.key -> str mapping, blanks dropped, for the API's `overrides` field."""
    out = {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        value = str(value).strip()
        if value and "." in key:
            out[key] = value
    return out


def render_payload(scene_dir, camera, frame=0, mode="none", state_path=None, params_path=None, seed=0, overrides=None):
    payload = {
        "scene_dir": str(scene_dir),
        "camera": camera,
        "frame": int(frame),
        "mode": mode,
        "seed": int(seed),
        "overrides": clean_overrides(overrides),
    }
    if state_path:
        payload["state_path"] = str(state_path)
    if params_path:
        payload["params_path"] = str(params_path)
    return payload


def decode_png(b64):
    """HxWx3 float array in [0, 1] from the API's base64 PNG."""
    with Image.open(io.BytesIO(base64.b64decode(b64))) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
