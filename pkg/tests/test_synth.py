import numpy as np
import pytest
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.transform import Rotation

from core.errors import ConfigError
from core.synth import (
    MIN_BUDGET,
    PRESETS,
    TORSO_RADII,
    TORSO_Z,
    SyntheticScene,
    build_humanoid,
    default_rig,
    jitter_sequence,
    logo_weights,
    make_sequence,
    make_texture,
    render_gt,
    split_turn_sequence,
)
from core.template import Pose


def yaw_matrix(degrees):
    return Rotation.from_euler("z", degrees, degrees=True).as_matrix()


def test_humanoid_respects_the_vertex_budget(humanoid):
    mesh, texture = humanoid
    assert mesh.num_vertices <= 600
    assert mesh.num_joints == 16
    assert texture.shape == (mesh.num_vertices, 3)
    np.testing.assert_allclose(mesh.skin_weights.sum(axis=1), 1.0, atol=1e-9)


def test_budget_below_the_minimum_is_rejected():
    with pytest.raises(ConfigError):
        build_humanoid(vertex_budget=MIN_BUDGET - 1)


@pytest.mark.parametrize("budget", [MIN_BUDGET, 600, 2000])
def test_humanoid_is_one_closed_outward_surface(budget):
    mesh, _ = build_humanoid(vertex_budget=budget)
    assert mesh.num_vertices <= budget
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges, counts = np.unique(directed, axis=0, return_counts=True)
    # each directed edge once, its reverse once: closed and consistently wound
    assert (counts == 1).all()
    present = {tuple(e) for e in edges}
    assert all((b, a) in present for a, b in edges)
    assert mesh.num_vertices - len(edges) // 2 + len(f) == 2
    graph = coo_matrix((np.ones(len(edges)), edges.T), shape=(mesh.num_vertices,) * 2)
    assert connected_components(graph, directed=False)[0] == 1
    assert np.bincount(f.ravel(), minlength=mesh.num_vertices).min() > 0
    tri = mesh.rest_vertices[f]
    volume = np.einsum("fk,fk->f", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0
    assert volume > 0


def test_no_vertex_is_buried_inside_the_torso(humanoid):
    mesh, _ = humanoid
    x, y, z = mesh.rest_vertices.T
    within = (z > TORSO_Z[0] + 1e-6) & (z < TORSO_Z[1] - 1e-6)
    r = (x / TORSO_RADII[0]) ** 2 + (y / TORSO_RADII[1]) ** 2
    assert (r[within] >= 1.0 - 1e-9).all()


@pytest.mark.parametrize("preset", PRESETS)
def test_textures_stay_in_the_unit_range(humanoid, preset):
    mesh, _ = humanoid
    tex = make_texture(mesh, preset, seed=4)
    assert tex.shape == (mesh.num_vertices, 3)
    assert tex.min() >= 0.0 and tex.max() <= 1.0


def test_unknown_texture_preset():
    mesh, _ = build_humanoid(vertex_budget=MIN_BUDGET)
    with pytest.raises(ConfigError):
        make_texture(mesh, "plaid")


def test_logo_sits_on_the_front_only(logo_scene):
    mesh = logo_scene.mesh
    w = logo_weights(mesh)
    assert w.max() > 0.9
    assert (w[mesh.rest_vertices[:, 1] > 0.05] == 0).all()
    on_logo = w > 0.97
    assert on_logo.any()
    np.testing.assert_allclose(logo_scene.texture[on_logo], np.tile([0.95, 0.9, 0.1], (on_logo.sum(), 1)),
                               atol=0.05)


def test_front_and_back_renders_differ_for_the_logo(logo_scene):
    pose = Pose.identity(logo_scene.mesh.num_joints)
    front = render_gt(logo_scene, pose, logo_scene.camera("front"))
    back = render_gt(logo_scene, pose, logo_scene.camera("back"))
    yellow = lambda img: ((img.data[:, :, 2] < 0.3) & (img.data[:, :, 0] > 0.8) & img.coverage).sum()  # noqa: E731
    assert yellow(front) > 0
    assert yellow(back) == 0


def test_turntable_spins_the_root_once():
    poses = make_sequence("turntable", 4)
    assert [p.frame_time for p in poses] == [0, 1, 2, 3]
    for p, deg in zip(poses, (0.0, 90.0, 180.0, 270.0)):
        np.testing.assert_allclose(p.rotation_matrices()[0], yaw_matrix(deg), atol=1e-9)
        np.testing.assert_array_equal(p.joint_rotations[1:], np.tile([1.0, 0.0, 0.0, 0.0], (15, 1)))


def test_armswing_moves_the_arms_in_opposition():
    poses = make_sequence("armswing", 24, params={"amplitude": 30.0})
    left = poses[6].rotation()[4].as_rotvec()
    right = poses[6].rotation()[7].as_rotvec()
    np.testing.assert_allclose(left, -right, atol=1e-12)
    assert np.degrees(np.linalg.norm(left)) == pytest.approx(30.0)


@pytest.mark.parametrize("kind,frames", [("moonwalk", 4), ("lean", 0)])
def test_bad_sequences_are_rejected(kind, frames):
    with pytest.raises(ConfigError):
        make_sequence(kind, frames)


def test_jitter_perturbs_but_keeps_unit_quaternions():
    base = make_sequence("lean", 5)
    assert all(a is b for a, b in zip(jitter_sequence(base, 0.0), base))
    noisy = jitter_sequence(base, 0.05, seed=1)
    assert len(noisy) == 5
    for a, b in zip(base, noisy):
        np.testing.assert_allclose(np.linalg.norm(b.joint_rotations, axis=1), 1.0, atol=1e-9)
        assert not np.allclose(a.joint_rotations, b.joint_rotations)
        assert a.frame_time == b.frame_time
    again = jitter_sequence(base, 0.05, seed=1)
    np.testing.assert_array_equal(again[2].joint_rotations, noisy[2].joint_rotations)


def test_jitter_kind_wraps_a_base_motion():
    poses = make_sequence("jitter", 3, params={"base": "armswing", "sigma": 0.01, "seed": 2})
    assert len(poses) == 3


def test_split_turn_shows_the_back_after_the_switch():
    poses = split_turn_sequence(6, 3)
    for t, pose in enumerate(poses):
        turned = Rotation.from_quat(pose.joint_rotations[0, [1, 2, 3, 0]]).magnitude()
        assert turned == pytest.approx(np.pi if t >= 3 else 0.0, abs=1e-9)


def test_rig_places_four_cameras_around_the_body():
    rig = default_rig(64)
    assert set(rig) == {"front", "left", "back", "right"}
    np.testing.assert_allclose(rig["front"].center, [0.0, -3.2, 2.0], atol=1e-9)
    np.testing.assert_allclose(rig["back"].center, [0.0, 3.2, 2.0], atol=1e-9)
    assert all(cam.resolution == (64, 64) and cam.name == name for name, cam in rig.items())


def test_scene_validation(humanoid):
    mesh, texture = humanoid
    rig = default_rig(32)
    with pytest.raises(ConfigError):
        SyntheticScene(mesh, texture[:-1], rig)
    with pytest.raises(ConfigError):
        SyntheticScene(mesh, texture + 2.0, rig)
    with pytest.raises(ConfigError):
        SyntheticScene(mesh, texture, {"side": rig["left"]})
    scene = SyntheticScene(mesh, texture, rig, {"a": [], "b": []})
    with pytest.raises(ConfigError):
        scene.sequence()
    with pytest.raises(ConfigError):
        scene.sequence("c")
    with pytest.raises(ConfigError):
        scene.camera("top")


def test_ground_truth_render_uses_the_background(small_scene):
    pose = small_scene.sequence()[0]
    img = render_gt(small_scene, pose, small_scene.camera("left"))
    assert img.coverage.any() and not img.coverage.all()
    assert (img.data[~img.coverage] == small_scene.background).all()
    assert img.data[img.coverage].min() >= 0.0 and img.data[img.coverage].max() <= 1.0
