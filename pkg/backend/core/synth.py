# backend/core/synth.py
# Procedural ground truth: capsule humanoid, textures, motions, camera rig, GT renders.

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from core.diffusion import make_rng
from core.errors import ConfigError
from core.projection import Camera
from core.raster import interpolate_features
from core.template import Pose, TemplateMesh, pose_vertices, vertex_normals

logger = logging.getLogger(__name__)

PRESETS = ("stripes", "checker", "logo")
SEQUENCE_KINDS = ("turntable", "armswing", "lean", "jitter")
MIN_BUDGET = 200
FULL_SCALE_VERTICES = 1900

ARM_DIR = np.array([np.cos(np.radians(30)), 0.0, -np.sin(np.radians(30))])
UPPER_ARM, FOREARM, HAND = 0.30, 0.27, 0.10
# first arm ring, clear of the torso surface
ARM_ROOT = 0.07
TORSO_RADII = (0.17, 0.11)
TORSO_Z = (0.93, 1.52)
HIP_Z = 0.88

JOINT_NAMES = (
    "pelvis", "chest", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
JOINT_PARENTS = (-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14)


def _mirror(p):
    return np.array([-p[0], p[1], p[2]])


def _joint_positions():
    l_sh = np.array([0.15, 0.0, 1.42])
    l_el = l_sh + UPPER_ARM * ARM_DIR
    l_wr = l_el + FOREARM * ARM_DIR
    l_hip = np.array([0.085, 0.0, 0.98])
    l_knee = np.array([0.095, 0.0, 0.52])
    l_ank = np.array([0.11, 0.0, 0.08])
    return np.array([
        [0.0, 0.0, 0.98], [0.0, 0.0, 1.22], [0.0, 0.0, 1.52], [0.0, 0.0, 1.66],
        l_sh, l_el, l_wr, _mirror(l_sh), _mirror(l_el), _mirror(l_wr),
        l_hip, l_knee, l_ank, _mirror(l_hip), _mirror(l_knee), _mirror(l_ank),
    ])


# -------------------------------------------------------------------
# Geometry
# -------------------------------------------------------------------
def _frame(axis):
    """Right-handed (e1, e2) with e1 x e2 = axis."""
    helper = np.array([0.0, 1.0, 0.0]) if abs(axis[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, axis)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def tube(centers, radii_1, radii_2, axis, segments, start_cap=None, end_cap=None):
    """Ring tube along `axis` (rings ordered along it) with optional fan caps at two points.

    Returns (vertices, faces) with outward-facing counter-clockwise triangles. An end
    without a cap is left open for stitching.
    """
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    e1, e2 = _frame(axis)
    theta = 2 * np.pi * np.arange(segments) / segments
    rings = (centers[:, None, :]
             + np.asarray(radii_1)[:, None, None] * np.cos(theta)[None, :, None] * e1
             + np.asarray(radii_2)[:, None, None] * np.sin(theta)[None, :, None] * e2)
    n_rings = len(centers)
    verts = [rings.reshape(-1, 3)]
    ring = np.arange(n_rings * segments).reshape(n_rings, segments)
    nxt = np.roll(ring, -1, axis=1)
    A, B = ring[:-1], nxt[:-1]
    C, D = nxt[1:], ring[1:]
    faces = [np.stack([A, B, C], -1).reshape(-1, 3), np.stack([A, C, D], -1).reshape(-1, 3)]
    idx = n_rings * segments
    if start_cap is not None:
        verts.append([start_cap])
        faces.append(np.stack([np.full(segments, idx), nxt[0], ring[0]], -1))
        idx += 1
    if end_cap is not None:
        verts.append([end_cap])
        faces.append(np.stack([ring[-1], nxt[-1], np.full(segments, idx)], -1))
    return np.concatenate(verts), np.concatenate(faces).astype(np.int64)


def uv_sphere(center, radius, segments, rings, bottom_cap=True):
    center = np.asarray(center, dtype=np.float64)
    phi = np.pi - np.pi * np.arange(1, rings + 1) / (rings + 1)
    centers = center + np.outer(radius * np.cos(phi), [0.0, 0.0, 1.0])
    r = radius * np.sin(phi)
    return tube(centers, r, r, (0.0, 0.0, 1.0), segments,
                center - [0.0, 0.0, radius] if bottom_cap else None, center + [0.0, 0.0, radius])


def _limb(start, direction, length, r0, r1, segments, rings, start_cap=True):
    s = np.linspace(0.0, length, rings)
    centers = start + np.outer(s, direction)
    radii = np.linspace(r0, r1, rings)
    return tube(centers, radii, radii, direction, segments, centers[0] if start_cap else None, centers[-1])


def stitch(points, loop_a, loop_b, origin, axis):
    """Triangle strip joining two closed loops that wind once around the same axis.

    Both loops are ordered by angle about the axis (each must be star-shaped around
    it) and zipped together; the strip is wound so its normals point away from the axis.
    """
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    e1, e2 = _frame(axis)

    def by_angle(loop):
        loop = np.asarray(loop, dtype=np.int64)
        d = points[loop] - origin
        ang = np.arctan2(d @ e2, d @ e1)
        order = np.argsort(ang)
        return np.append(loop[order], loop[order[0]]), np.append(ang[order], ang[order[0]] + 2 * np.pi)

    a, ta = by_angle(loop_a)
    b, tb = by_angle(loop_b)
    n, m = len(a) - 1, len(b) - 1
    tris, i, j = [], 0, 0
    while i < n or j < m:
        if j == m or (i < n and ta[i + 1] <= tb[j + 1]):
            tris.append((a[i], a[i + 1], b[j]))
            i += 1
        else:
            tris.append((a[i], b[j + 1], b[j]))
            j += 1
    tris = np.array(tris, dtype=np.int64)

    p = points[tris]
    normals = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    rel = p.mean(axis=1) - origin
    radial = rel - np.outer(rel @ axis, axis)
    if np.einsum("fk,fk->f", normals, radial).sum() < 0:
        tris = tris[:, [0, 2, 1]]
    return tris


def _midline_count(torso_segments):
    """Crotch vertices between the two hip openings, spaced like the torso ring."""
    arc = 0.9 / torso_segments
    return max(1, round(2 * TORSO_RADII[1] / arc) - 1)


def _allocation(budget):
    """Per-component (segments, rings) sized to the vertex budget."""
    s = np.sqrt(budget / FULL_SCALE_VERTICES)
    while True:
        alloc = {
            "torso": (max(8, 4 * round(5 * s)), max(7, round(24 * s))),
            "head": (max(6, round(16 * s)), max(3, round(8 * s))),
            "arm": (max(6, round(10 * s)), max(5, round(30 * s))),
            "leg": (max(6, round(10 * s)), max(5, round(34 * s))),
        }
        total = (alloc["torso"][0] * alloc["torso"][1] + _midline_count(alloc["torso"][0])
                 + alloc["head"][0] * alloc["head"][1] + 1
                 + 2 * (alloc["arm"][0] * alloc["arm"][1] + 1) + 2 * (alloc["leg"][0] * alloc["leg"][1] + 1))
        if total <= budget:
            return alloc
        s *= 0.97


# bone segment per joint, as (start, end)
def _bones(joints):
    tip = {3: joints[3] + [0.0, 0.0, 0.11], 6: joints[6] + HAND * ARM_DIR,
           9: joints[9] + HAND * (ARM_DIR * [-1, 1, 1]), 12: joints[12] + [0.0, 0.0, -0.06],
           15: joints[15] + [0.0, 0.0, -0.06]}
    child = {0: 1, 1: 2, 2: 3, 4: 5, 5: 6, 7: 8, 8: 9, 10: 11, 11: 12, 13: 14, 14: 15}
    return [(joints[j], joints[child[j]] if j in child else tip[j]) for j in range(len(joints))]


def _segment_distance(points, a, b):
    ab = b - a
    t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def _skin(points, joints, allowed, falloff=0.06):
    bones = _bones(joints)
    logits = np.full((len(points), len(joints)), -np.inf)
    for j in allowed:
        d = _segment_distance(points, *bones[j])
        logits[:, j] = -(d / falloff) ** 2
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    w[w < 1e-6] = 0.0
    return w / w.sum(axis=1, keepdims=True)


def _torso_port(ring, z, center_k, zc, half_width, half_height=0.05):
    """Torso quads cut away for an arm, as a face mask, and the boundary loop left behind."""
    n_rings, seg = ring.shape
    spacing = z[1] - z[0]
    i_top = min(int(np.ceil((zc + half_height - z[0]) / spacing)), n_rings - 2)
    i_bot = min(max(int(np.floor((zc - half_height - z[0]) / spacing)), 1), i_top - 1)
    cols = (center_k + np.arange(-half_width, half_width + 1)) % seg
    quads = np.zeros((n_rings - 1, seg), dtype=bool)
    quads[i_bot:i_top, cols[:-1]] = True
    inner = np.arange(i_bot + 1, i_top)
    loop = np.concatenate([ring[i_bot, cols], ring[i_top, cols], ring[inner, cols[0]], ring[inner, cols[-1]]])
    return np.tile(quads.ravel(), 2), loop


def build_humanoid(seed=0, vertex_budget=2000, preset="stripes", period=0.25):
    """Capsule humanoid (torso, head, two arms, two legs) welded into one closed mesh,
    and its per-vertex texture.

    The torso is an open tube. Arms are stitched to openings cut in its sides, the legs
    to the two halves of its bottom rim split by a crotch line, the head to its top rim.
    """
    if vertex_budget < MIN_BUDGET:
        raise ConfigError(f"vertex_budget must be at least {MIN_BUDGET}, got {vertex_budget}")
    joints = _joint_positions()
    alloc = _allocation(vertex_budget)
    verts, faces, weights = [], [], []

    def add(v, f, allowed):
        offset = sum(len(p) for p in verts)
        verts.append(v)
        faces.append(f + offset)
        weights.append(_skin(v, joints, allowed))
        return offset

    seg, rings = alloc["torso"]
    z = np.linspace(*TORSO_Z, rings)
    centers = np.stack([np.zeros(rings), np.zeros(rings), z], axis=1)
    t_verts, t_faces = tube(centers, np.full(rings, TORSO_RADII[0]), np.full(rings, TORSO_RADII[1]), (0, 0, 1), seg)
    ring = np.arange(rings * seg).reshape(rings, seg)
    # height where the arm axis meets the torso side
    zc = joints[4][2] + ARM_DIR[2] * (TORSO_RADII[0] - joints[4][0]) / ARM_DIR[0]
    keep = np.ones(len(t_faces), dtype=bool)
    ports = []
    for center_k in (0, seg // 2):
        removed, loop = _torso_port(ring, z, center_k, zc, max(1, round(seg / 10)))
        keep &= ~removed
        ports.append(loop)
    add(t_verts, t_faces[keep], (0, 1, 2))

    y = np.linspace(-TORSO_RADII[1], TORSO_RADII[1], _midline_count(seg) + 2)[1:-1]
    crotch = add(np.stack([np.zeros_like(y), y, np.full_like(y, TORSO_Z[0])], axis=1),
                 np.empty((0, 3), dtype=np.int64), (0, 10, 13)) + np.arange(len(y))

    h_seg, h_rings = alloc["head"]
    head = add(*uv_sphere(joints[3], 0.11, h_seg, h_rings, bottom_cap=False), (2, 3)) + np.arange(h_seg)

    a_seg, a_rings = alloc["arm"]
    length = UPPER_ARM + FOREARM + HAND - ARM_ROOT
    arms = []
    for j, direction, allowed in ((4, ARM_DIR, (4, 5, 6)), (7, ARM_DIR * [-1, 1, 1], (7, 8, 9))):
        v, f = _limb(joints[j] + ARM_ROOT * direction, direction, length, 0.05, 0.035, a_seg, a_rings,
                     start_cap=False)
        arms.append((add(v, f, allowed) + np.arange(a_seg), joints[j], direction))

    l_seg, l_rings = alloc["leg"]
    legs = []
    for hip, ank, allowed in ((joints[10], joints[12], (10, 11, 12)), (joints[13], joints[15], (13, 14, 15))):
        start = np.array([hip[0], 0.0, HIP_Z])
        d = np.array([ank[0], 0.0, 0.02]) - start
        v, f = _limb(start, d / np.linalg.norm(d), np.linalg.norm(d), 0.07, 0.045, l_seg, l_rings, start_cap=False)
        legs.append((add(v, f, allowed) + np.arange(l_seg), start, d))

    points = np.concatenate(verts)
    side = np.cos(2 * np.pi * np.arange(seg) / seg)
    rims = (np.concatenate([ring[0, side >= -1e-9], crotch]), np.concatenate([ring[0, side <= 1e-9], crotch]))
    bridges = [stitch(points, ring[-1], head, np.array([0.0, 0.0, TORSO_Z[1]]), (0.0, 0.0, 1.0))]
    bridges += [stitch(points, port, ring0, origin, d) for port, (ring0, origin, d) in zip(ports, arms)]
    bridges += [stitch(points, rim, ring0, origin, d) for rim, (ring0, origin, d) in zip(rims, legs)]

    tris = np.concatenate(faces + bridges)
    # drop the vertices left inside the arm openings
    used = np.unique(tris)
    remap = np.full(len(points), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    mesh = TemplateMesh(points[used], remap[tris], np.array(JOINT_PARENTS),
                        joints, np.concatenate(weights)[used], JOINT_NAMES)
    texture = make_texture(mesh, preset, seed, period)
    logger.info("Built humanoid: %d vertices, %d faces, preset %s", mesh.num_vertices, mesh.num_faces, preset)
    return mesh, texture


# -------------------------------------------------------------------
# Textures
# -------------------------------------------------------------------
def _palette(seed):
    rng = make_rng(seed)
    return rng.uniform(0.15, 0.85, size=(2, 3)), rng.uniform(0, 2 * np.pi, size=3)


def logo_weights(mesh, center=(0.0, 1.30), radius=0.10, edge=0.015):
    """Soft front-logo membership: disc on the chest in (x, z), front-facing normals only."""
    rest = mesh.rest_vertices
    normals = vertex_normals(rest, mesh.faces)
    r = np.hypot(rest[:, 0] - center[0], rest[:, 2] - center[1])
    disc = 1.0 / (1.0 + np.exp((r - radius) / edge))
    facing = np.clip((-normals[:, 1] - 0.2) / 0.2, 0.0, 1.0)
    return disc * facing


def make_texture(mesh, preset="stripes", seed=0, period=0.25):
    if preset not in PRESETS:
        raise ConfigError(f"Unknown texture preset '{preset}', expected one of {PRESETS}")
    (c_a, c_b), phase = _palette(seed)
    rest = mesh.rest_vertices
    h = rest[:, 2]
    stripes = 0.5 + 0.35 * np.sin(2 * np.pi * h[:, None] / period + phase[None, :])
    if preset == "stripes":
        return stripes
    if preset == "checker":
        s = np.prod(np.sin(2 * np.pi * rest / period), axis=1)
        t = 0.5 + 0.5 * np.tanh(4.0 * s)
        return c_a + (c_b - c_a) * t[:, None]
    # logo: muted stripes, a back tint and a contrasting front disc
    base = 0.5 + 0.15 * np.sin(2 * np.pi * h[:, None] / period + phase[None, :])
    back = np.clip(vertex_normals(rest, mesh.faces)[:, 1], 0.0, 1.0)[:, None]
    base = base * (1 - 0.5 * back) + 0.5 * back * c_b
    w = logo_weights(mesh)[:, None]
    logo_color = np.array([0.95, 0.9, 0.1])
    return np.clip(base * (1 - w) + logo_color * w, 0.0, 1.0)


# -------------------------------------------------------------------
# Motion
# -------------------------------------------------------------------
def _rot(axis, degrees):
    return Rotation.from_rotvec(np.radians(degrees) * np.asarray(axis, dtype=np.float64))


def _set(q, joint, rotation):
    x, y, z, w = rotation.as_quat()
    q[joint] = (w, x, y, z)


def make_sequence(kind, frames, num_joints=len(JOINT_NAMES), params=None):
    """Pose sequences for the standard 16-joint skeleton."""
    params = dict(params or {})
    if frames < 1:
        raise ConfigError("frames must be at least 1")
    if kind not in SEQUENCE_KINDS:
        raise ConfigError(f"Unknown sequence kind '{kind}', expected one of {SEQUENCE_KINDS}")
    if kind == "jitter":
        base = make_sequence(params.pop("base", "lean"), frames, num_joints,
                             {k: v for k, v in params.items() if k not in ("sigma", "seed")})
        return jitter_sequence(base, params.get("sigma", 0.02), params.get("seed", 0))
    period = float(params.get("period", frames if kind == "turntable" else 24))
    amp = float(params.get("amplitude", {"turntable": 360.0, "armswing": 35.0, "lean": 20.0}[kind]))
    yaw = float(params.get("yaw", 0.0))
    poses = []
    for t in range(frames):
        q = np.zeros((num_joints, 4))
        q[:, 0] = 1.0
        phase = 2 * np.pi * t / period
        if kind == "turntable":
            _set(q, 0, _rot((0, 0, 1), yaw + amp * t / frames))
        else:
            if yaw:
                _set(q, 0, _rot((0, 0, 1), yaw))
            if kind == "armswing":
                swing = amp * np.sin(phase)
                _set(q, 4, _rot((1, 0, 0), swing))
                _set(q, 7, _rot((1, 0, 0), -swing))
                _set(q, 5, _rot((1, 0, 0), 0.5 * amp * (1 + np.sin(phase))))
                _set(q, 8, _rot((1, 0, 0), 0.5 * amp * (1 - np.sin(phase))))
            else:
                _set(q, 1, _rot((1, 0, 0), amp * np.sin(phase)))
        poses.append(Pose(q, np.zeros(3), t))
    return poses


def jitter_sequence(poses, sigma, seed=0):
    """Multiply every joint rotation by zero-mean noise (rotation vectors with std sigma rad)."""
    if sigma == 0:
        return list(poses)
    rng = make_rng(seed)
    out = []
    for pose in poses:
        noise = Rotation.from_rotvec(sigma * rng.standard_normal((pose.num_joints, 3)))
        out.append(Pose.from_rotations(noise * pose.rotation(), pose.root_translation, pose.frame_time))
    return out


def split_turn_sequence(frames, front_frames, num_joints=len(JOINT_NAMES)):
    """Front to the input camera for `front_frames`, then the back for the rest, with arm motion."""
    swing = make_sequence("armswing", frames, num_joints, {"amplitude": 15.0})
    out = []
    for t, pose in enumerate(swing):
        q = pose.joint_rotations.copy()
        if t >= front_frames:
            _set(q, 0, _rot((0, 0, 1), 180.0))
        out.append(Pose(q, pose.root_translation, t))
    return out


# -------------------------------------------------------------------
# Cameras and scenes
# -------------------------------------------------------------------
CAMERA_AZIMUTHS = {"front": -90.0, "left": 0.0, "back": 90.0, "right": 180.0}


def default_rig(resolution=256, distance=3.2, height=2.0, target_height=0.95, focal_ratio=1.35):
    """Four cameras 90 degrees apart around the body; 'front' looks at the -Y side."""
    cams = {}
    for name, az in CAMERA_AZIMUTHS.items():
        a = np.radians(az)
        eye = (distance * np.cos(a), distance * np.sin(a), height)
        cams[name] = Camera.look_at(eye, (0.0, 0.0, target_height), focal=focal_ratio * resolution,
                                    resolution=(resolution, resolution), name=name)
    return cams


@dataclass(frozen=True)
class SyntheticScene:
    mesh: TemplateMesh
    texture: np.ndarray
    cameras: dict
    sequences: dict = field(default_factory=dict)
    background: float = 0.0

    def __post_init__(self):
        tex = np.asarray(self.texture, dtype=np.float64)
        if tex.shape != (self.mesh.num_vertices, 3):
            raise ConfigError("texture must be M x 3")
        if not np.all(np.isfinite(tex)) or tex.min() < 0 or tex.max() > 1:
            raise ConfigError("texture values must lie in [0, 1]")
        for name, cam in self.cameras.items():
            if cam.name and cam.name != name:
                raise ConfigError(f"Camera key '{name}' does not match camera name '{cam.name}'")
        object.__setattr__(self, "texture", tex)

    def camera(self, name):
        try:
            return self.cameras[name]
        except KeyError as e:
            raise ConfigError(f"Unknown camera '{name}'") from e

    def sequence(self, name=None):
        if name is None:
            if len(self.sequences) != 1:
                raise ConfigError("Scene has several sequences; name one")
            return next(iter(self.sequences.values()))
        try:
            return self.sequences[name]
        except KeyError as e:
            raise ConfigError(f"Unknown sequence '{name}'") from e


def render_gt(scene, pose, camera, posed=None, buffer=None):
    if posed is None:
        posed = pose_vertices(scene.mesh, pose)
    return interpolate_features(posed, scene.mesh.faces, scene.texture, camera, fill=scene.background, buffer=buffer)


def build_scene(preset="stripes", frames=36, resolution=256, seed=0, vertex_budget=2000,
                sequence="turntable", sequence_params=None, background=0.0):
    mesh, texture = build_humanoid(seed, vertex_budget, preset)
    poses = make_sequence(sequence, frames, mesh.num_joints, sequence_params)
    return SyntheticScene(mesh, texture, default_rig(resolution), {sequence: poses}, background)
