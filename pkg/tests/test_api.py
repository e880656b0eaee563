import numpy as np
import pytest
from fastapi.testclient import TestClient

from api_helpers import decode_png, render_payload
from core.conditioning import ConditioningPair, save_conditioning
from core.diffusion import MLPDenoiser, make_schedule, save_model
from core.scene_io import gt_frame_path, save_png, write_scene_dir
from core.synth import render_gt
from main import app

RAW = {"stream.context_mode": "raw_rgb"}


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory, small_scene):
    out = write_scene_dir(tmp_path_factory.mktemp("api") / "scene", small_scene)
    for t, pose in enumerate(small_scene.sequence()):
        for name in ("front", "back"):
            save_png(gt_frame_path(out, name, t), render_gt(small_scene, pose, small_scene.camera(name)))
    return out


def test_root(client):
    r = client.get("/")
    assert r.status_code == 200
    assert r.json()["status"] == "ok"


def test_fuse_returns_the_coverage_curve(client, scene_dir, tmp_path):
    body = {"scene_dir": str(scene_dir), "frames": 3, "overrides": RAW, "out_path": str(tmp_path / "state.cft")}
    r = client.post("/fuse/", json=body)
    assert r.status_code == 200
    data = r.json()
    assert len(data["coverage"]) == 3
    assert data["frames_fused"] == 3 and data["channels"] == 3
    assert (tmp_path / "state.cft").exists()


def test_fuse_maps_errors_to_status_codes(client, scene_dir, tmp_path):
    r = client.post("/fuse/", json={"scene_dir": str(scene_dir), "overrides": {"stream.history_len": "0"}})
    assert r.status_code == 400
    r = client.post("/fuse/", json={"scene_dir": str(tmp_path / "missing")})
    assert r.status_code == 422
    r = client.post("/fuse/", json={"frames": 2})
    assert r.status_code == 422


def test_render_from_a_fused_state(client, scene_dir, tmp_path):
    state = tmp_path / "state.cft"
    client.post("/fuse/", json={"scene_dir": str(scene_dir), "overrides": RAW, "out_path": str(state)})
    r = client.post("/render/", json=render_payload(scene_dir, "back", frame=5, state_path=state, overrides=RAW))
    assert r.status_code == 200
    data = r.json()
    assert data["mode"] == "none"
    assert decode_png(data["image_png"]).shape == (64, 64, 3)
    assert data["psnr"] is not None and not data["saturated"]


def test_render_without_ground_truth_has_no_psnr(client, scene_dir):
    r = client.post("/render/", json=render_payload(scene_dir, "left", frame=1))
    assert r.status_code == 200
    assert r.json()["psnr"] is None


def test_render_errors(client, scene_dir):
    r = client.post("/render/", json=render_payload(scene_dir, "back", mode="probabilistic"))
    assert r.status_code == 400
    r = client.post("/render/", json=render_payload(scene_dir, "top"))
    assert r.status_code == 400
    r = client.post("/render/", json=render_payload(scene_dir, "back", mode="sometimes"))
    assert r.status_code == 422


def test_diffusion_sample(client, tmp_path):
    schedule = make_schedule(100, 1e-4, 0.02, 5)
    model = MLPDenoiser.create((2, 2, 4), 1, 1, hidden=4, schedule=schedule)
    save_model(tmp_path / "model.cft", model, {"steps_train": 100, "beta_start": 1e-4, "beta_end": 0.02})
    save_conditioning(tmp_path / "cond.cft", ConditioningPair(np.zeros((2, 2, 1)), np.zeros((2, 2, 1))))
    body = {"params_path": str(tmp_path / "model.cft"), "cond_path": str(tmp_path / "cond.cft"), "seed": 3, "steps": 5}
    r = client.post("/diffusion/sample", json=body)
    assert r.status_code == 200
    data = r.json()
    assert data["shape"] == [2, 2, 4]
    assert np.asarray(data["latent"]).shape == (2, 2, 4)
    assert client.post("/diffusion/sample", json=body).json()["latent"] == data["latent"]


def test_diffusion_sample_errors(client, tmp_path):
    body = {"params_path": str(tmp_path / "none.cft"), "cond_path": str(tmp_path / "none.cft")}
    assert client.post("/diffusion/sample", json=body).status_code == 422
    assert client.post("/diffusion/sample", json={**body, "steps": 0}).status_code == 422
