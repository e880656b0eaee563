import numpy as np
import pytest

from core.errors import DataError
from core.raster import FeatureImage
from core.scene_io import (
    CAMERAS_FILE,
    POSES_FILE,
    SCENE_FILE,
    gt_frame_path,
    load_png,
    load_scene,
    png_bytes,
    read_poses,
    read_scene,
    save_png,
    write_poses,
    write_scene,
    write_scene_dir,
)


@pytest.fixture
def scene_dir(tmp_path, small_scene):
    return write_scene_dir(tmp_path / "scene", small_scene)


def test_scene_directory_reads_back_unchanged(scene_dir, small_scene):
    assert {p.name for p in scene_dir.iterdir()} == {SCENE_FILE, CAMERAS_FILE, POSES_FILE}
    scene, root = load_scene(scene_dir)
    assert root == scene_dir
    np.testing.assert_array_equal(scene.mesh.rest_vertices, small_scene.mesh.rest_vertices)
    np.testing.assert_array_equal(scene.mesh.faces, small_scene.mesh.faces)
    np.testing.assert_array_equal(scene.mesh.joint_parents, small_scene.mesh.joint_parents)
    np.testing.assert_allclose(scene.mesh.skin_weights, small_scene.mesh.skin_weights, atol=1e-12)
    np.testing.assert_array_equal(scene.texture, small_scene.texture)
    assert scene.mesh.joint_names == small_scene.mesh.joint_names
    assert scene.background == small_scene.background


def test_cameras_and_poses_survive_the_text_format(scene_dir, small_scene):
    scene, _ = load_scene(scene_dir)
    for name, cam in small_scene.cameras.items():
        back = scene.camera(name)
        np.testing.assert_array_equal(back.rotation, cam.rotation)
        np.testing.assert_array_equal(back.translation, cam.translation)
        np.testing.assert_array_equal(back.focal, cam.focal)
        assert back.resolution == cam.resolution
    poses = scene.sequence()
    original = small_scene.sequence()
    assert [p.frame_time for p in poses] == [p.frame_time for p in original]
    for a, b in zip(poses, original):
        np.testing.assert_array_equal(a.joint_rotations, b.joint_rotations)


def test_a_scene_file_finds_its_sibling_cameras(scene_dir):
    scene, root = load_scene(scene_dir / SCENE_FILE)
    assert root == scene_dir
    assert set(scene.cameras) == {"front", "left", "back", "right"}


def test_separate_poses_file_overrides_the_directory_one(tmp_path, scene_dir, small_scene):
    write_poses(tmp_path / "short.txt", small_scene.sequence()[:2])
    scene, _ = load_scene(scene_dir, tmp_path / "short.txt")
    assert len(scene.sequence()) == 2


def test_missing_scene_is_a_data_error(tmp_path):
    with pytest.raises(DataError):
        load_scene(tmp_path / "nowhere.txt")
    with pytest.raises(DataError):
        load_scene(tmp_path)


def test_scene_without_texture_cannot_be_streamed(tmp_path, scene_dir, small_scene):
    write_scene(scene_dir / SCENE_FILE, small_scene.mesh)
    mesh, texture, background = read_scene(scene_dir / SCENE_FILE)
    assert texture is None and background is None
    assert mesh.num_vertices == small_scene.mesh.num_vertices
    with pytest.raises(DataError):
        load_scene(scene_dir)


@pytest.mark.parametrize("text", [
    "vertices 2\n0 0 0\n",
    "vertices 1\n0 0\n",
    "vertices 1\n0 0 zero\n",
    "cubes 1\n0 0 0\n",
    "vertices one\n",
    "vertices 1\n0 0 0\n",
])
def test_malformed_scene_files(tmp_path, text):
    path = tmp_path / "scene.txt"
    path.write_text(text)
    with pytest.raises(DataError):
        read_scene(path)


def test_comments_and_blank_lines_are_ignored(tmp_path, chain_mesh):
    path = tmp_path / "scene.txt"
    write_scene(path, chain_mesh)
    text = path.read_text().replace("faces", "\n# triangles follow\nfaces", 1)
    path.write_text(text)
    mesh, _, _ = read_scene(path)
    np.testing.assert_array_equal(mesh.faces, chain_mesh.faces)


def test_poses_with_the_wrong_joint_count(scene_dir):
    with pytest.raises(DataError):
        read_poses(scene_dir / POSES_FILE, 3)


def test_png_round_trip_is_eight_bit(tmp_path):
    rng = np.random.default_rng(0)
    img = FeatureImage.from_array(rng.uniform(size=(8, 10, 3)))
    save_png(tmp_path / "a.png", img)
    back = load_png(tmp_path / "a.png")
    assert back.data.shape == (8, 10, 3)
    assert np.abs(back.data - img.data).max() <= 0.5 / 255 + 1e-12
    assert png_bytes(img)[:4] == b"\x89PNG"
    with pytest.raises(DataError):
        load_png(tmp_path / "missing.png")


def test_ground_truth_frame_layout(tmp_path):
    assert gt_frame_path(tmp_path, "back", 7) == tmp_path / "gt" / "back" / "frame_0007.png"
