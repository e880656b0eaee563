# backend/core/scene_io.py
# Plain-text scene / camera / pose formats, PNG previews, scene directories.

import io
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from core.errors import DataError
from core.projection import Camera
from core.raster import FeatureImage
from core.synth import SyntheticScene
from core.template import Pose, TemplateMesh, normalize_skin_weights

logger = logging.getLogger(__name__)

SCENE_FILE = "scene.txt"
CAMERAS_FILE = "cameras.txt"
POSES_FILE = "poses.txt"

# section name -> columns per row (None: taken from the header)
_SECTIONS = {"vertices": 3, "faces": 3, "joints": 3, "parents": 1, "weights": None, "texture": 3}


def _fmt(row):
    return " ".join(repr(float(x)) for x in row)


def _fmt_int(row):
    return " ".join(str(int(x)) for x in row)


def _lines(path):
    try:
        text = Path(path).read_text()
    except FileNotFoundError as e:
        raise DataError(f"File not found: {path}") from e
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            out.append((lineno, line))
    return out


def _numbers(line, lineno, path, count=None):
    try:
        vals = [float(x) for x in line.split()]
    except ValueError as e:
        raise DataError(f"{path}:{lineno}: expected numbers, got '{line}'") from e
    if count is not None and len(vals) != count:
        raise DataError(f"{path}:{lineno}: expected {count} values, got {len(vals)}")
    return vals


# -------------------------------------------------------------------
# Scene (mesh + optional texture)
# -------------------------------------------------------------------
def write_scene(path, mesh, texture=None, background=None):
    lines = ["# canonfuse scene v1"]
    if background is not None:
        lines.append(f"background {float(background)!r}")
    if mesh.joint_names:
        lines.append("names " + " ".join(mesh.joint_names))
    lines.append(f"vertices {mesh.num_vertices}")
    lines += [_fmt(r) for r in mesh.rest_vertices]
    lines.append(f"faces {mesh.num_faces}")
    lines += [_fmt_int(r) for r in mesh.faces]
    lines.append(f"joints {mesh.num_joints}")
    lines += [_fmt(r) for r in mesh.joint_rest_positions]
    lines.append(f"parents {mesh.num_joints}")
    lines += [str(int(p)) for p in mesh.joint_parents]
    lines.append(f"weights {mesh.num_vertices} {mesh.num_joints}")
    lines += [_fmt(r) for r in mesh.skin_weights]
    if texture is not None:
        lines.append(f"texture {len(texture)}")
        lines += [_fmt(r) for r in texture]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_scene(path):
    """Returns (mesh, texture or None, background or None)."""
    lines = _lines(path)
    sections, names, background = {}, (), None
    k = 0
    while k < len(lines):
        lineno, line = lines[k]
        head, *rest = line.split()
        if head == "names":
            names = tuple(rest)
            k += 1
            continue
        if head == "background":
            background = _numbers(" ".join(rest), lineno, path, 1)[0]
            k += 1
            continue
        if head not in _SECTIONS:
            raise DataError(f"{path}:{lineno}: unknown section '{head}'")
        try:
            count = int(rest[0])
            cols = _SECTIONS[head] or int(rest[1])
        except (IndexError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: malformed section header '{line}'") from e
        body = lines[k + 1:k + 1 + count]
        if len(body) != count:
            raise DataError(f"{path}: section '{head}' ends early")
        sections[head] = np.array([_numbers(l, n, path, cols) for n, l in body]).reshape(count, cols)
        k += 1 + count
    missing = [s for s in ("vertices", "faces", "joints", "parents", "weights") if s not in sections]
    if missing:
        raise DataError(f"{path}: missing sections {missing}")
    weights = normalize_skin_weights(sections["weights"])
    mesh = TemplateMesh(sections["vertices"], sections["faces"].astype(np.int64),
                        sections["parents"][:, 0].astype(np.int64), sections["joints"], weights, names)
    return mesh, sections.get("texture"), background


# -------------------------------------------------------------------
# Cameras
# -------------------------------------------------------------------
def write_cameras(path, cameras):
    lines = ["# canonfuse cameras v1"]
    for name, cam in cameras.items():
        lines.append(f"camera {name}")
        lines.append(_fmt([*cam.focal, *cam.principal]))
        lines += [_fmt(r) for r in cam.rotation]
        lines.append(_fmt(cam.translation))
        lines.append(_fmt_int(cam.resolution))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path):
    lines = _lines(path)
    cams = {}
    k = 0
    while k < len(lines):
        lineno, line = lines[k]
        parts = line.split()
        if parts[0] != "camera" or len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'camera NAME'")
        name = parts[1]
        if name in cams:
            raise DataError(f"{path}:{lineno}: duplicate camera '{name}'")
        body = lines[k + 1:k + 7]
        if len(body) != 6:
            raise DataError(f"{path}: camera '{name}' is incomplete")
        intr = _numbers(body[0][1], body[0][0], path, 4)
        rot = [_numbers(l, n, path, 3) for n, l in body[1:4]]
        trans = _numbers(body[4][1], body[4][0], path, 3)
        res = _numbers(body[5][1], body[5][0], path, 2)
        cams[name] = Camera(intr[:2], intr[2:], rot, trans, (int(res[0]), int(res[1])), name)
        k += 7
    return cams


# -------------------------------------------------------------------
# Poses
# -------------------------------------------------------------------
def write_poses(path, poses):
    lines = ["# frame  J quaternions (w x y z)  root translation (x y z)"]
    for pose in poses:
        lines.append(f"{pose.frame_time} " + _fmt([*pose.joint_rotations.ravel(), *pose.root_translation]))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path, num_joints):
    poses = []
    for lineno, line in _lines(path):
        vals = _numbers(line, lineno, path, 1 + 4 * num_joints + 3)
        q = np.array(vals[1:1 + 4 * num_joints]).reshape(num_joints, 4)
        poses.append(Pose(q, vals[-3:], int(vals[0])))
    return poses


# -------------------------------------------------------------------
# Images
# -------------------------------------------------------------------
def save_png(path, image):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(png_bytes(image))


def load_png(path, coverage=None, fill=0.0):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError as e:
        raise DataError(f"Image not found: {path}") from e
    return FeatureImage.from_array(arr, coverage, fill)


# -------------------------------------------------------------------
# Scene directories
# -------------------------------------------------------------------
def write_scene_dir(out_dir, scene, sequence_name=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_scene(out / SCENE_FILE, scene.mesh, scene.texture, scene.background)
    write_cameras(out / CAMERAS_FILE, scene.cameras)
    write_poses(out / POSES_FILE, scene.sequence(sequence_name))
    return out


def read_scene_dir(scene_dir, poses_path=None):
    scene_dir = Path(scene_dir)
    mesh, texture, background = read_scene(scene_dir / SCENE_FILE)
    cameras = read_cameras(scene_dir / CAMERAS_FILE)
    poses = read_poses(poses_path or scene_dir / POSES_FILE, mesh.num_joints)
    if texture is None:
        raise DataError(f"{scene_dir / SCENE_FILE} has no texture section")
    return SyntheticScene(mesh, texture, cameras, {"main": poses}, background or 0.0)


def gt_frame_path(scene_dir, camera, t):
    return Path(scene_dir) / "gt" / camera / f"frame_{t:04d}.png"


def load_scene(path, poses_path=None):
    """A scene directory, or a scene file with cameras.txt (and poses.txt) beside it.

    Returns the scene and the directory ground-truth frames are looked up in.
    """
    path = Path(path)
    if path.is_dir():
        return read_scene_dir(path, poses_path), path
    if not path.exists():
        raise DataError(f"Scene not found: {path}")
    mesh, texture, background = read_scene(path)
    if texture is None:
        raise DataError(f"{path} has no texture section")
    cameras = read_cameras(path.parent / CAMERAS_FILE)
    poses = read_poses(poses_path or path.parent / POSES_FILE, mesh.num_joints)
    return SyntheticScene(mesh, texture, cameras, {"main": poses}, background or 0.0), path.parent


def png_bytes(image):
    rgb = image.data[:, :, :3] if isinstance(image, FeatureImage) else np.asarray(image)
    arr = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()
