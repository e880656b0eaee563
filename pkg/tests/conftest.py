import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "backend"))
sys.path.insert(0, str(ROOT / "frontend" / "utils"))

from core.config import load_config  # noqa: E402
from core.projection import Camera  # noqa: E402
from core.synth import build_humanoid, build_scene  # noqa: E402
from core.template import TemplateMesh  # noqa: E402


def facing_triangle(depth, half=1.0):
    """Camera-space triangle at constant depth whose winding faces an identity camera."""
    return np.array([[-half, -half, depth], [0.0, half, depth], [half, -half, depth]])


@pytest.fixture
def identity_camera():
    return Camera((50.0, 50.0), (31.5, 31.5), np.eye(3), np.zeros(3), (64, 64), "pinhole")


@pytest.fixture
def chain_mesh():
    """Three joints along +x with a strip of triangles skinned to them."""
    joints = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    xs = np.linspace(0.0, 2.5, 6)
    verts = np.concatenate([np.stack([xs, np.zeros(6), np.full(6, -0.1)], axis=1),
                            np.stack([xs, np.zeros(6), np.full(6, 0.1)], axis=1)])
    faces = []
    for k in range(5):
        faces.append([k, k + 1, 6 + k])
        faces.append([k + 1, 7 + k, 6 + k])
    rng = np.random.default_rng(3)
    w = rng.uniform(0.0, 1.0, size=(12, 3))
    w /= w.sum(axis=1, keepdims=True)
    return TemplateMesh(verts, np.array(faces), np.array([-1, 0, 1]), joints, w, ("root", "mid", "tip"))


@pytest.fixture(scope="session")
def humanoid():
    return build_humanoid(seed=0, vertex_budget=600, preset="stripes")


@pytest.fixture(scope="session")
def small_scene():
    return build_scene("stripes", frames=6, resolution=64, seed=0, vertex_budget=600, sequence="turntable")


@pytest.fixture(scope="session")
def logo_scene():
    return build_scene("logo", frames=6, resolution=64, seed=0, vertex_budget=800, sequence="armswing")


@pytest.fixture
def fast_config():
    """Small, quick stream settings for 64x64 scenes."""
    return load_config(overrides={
        "stream.resolution": 64,
        "stream.history_len": 4,
        "stream.render_mode": "none",
        "stream.save_frames": "false",
        "training.steps": 20,
        "training.frames": 4,
        "training.hidden": 8,
        "training.log_every": 0,
        "diffusion.steps_train": 100,
        "stream.inference_steps": 5,
    })
