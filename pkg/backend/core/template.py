# backend/core/template.py
# Articulated template body: skeleton, skinning weights, forward kinematics, LBS.

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from core.errors import ConfigError, DataError

WEIGHT_TOL = 1e-6
LOAD_WEIGHT_TOL = 1e-4
UNIT_TOL = 1e-6

logger = logging.getLogger(__name__)


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def topological_order(parents):
    """Joint order with every parent before its children. Exactly one root (parent -1)."""
    parents = np.asarray(parents)
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1:
        raise ConfigError(f"Skeleton needs exactly one root, found {len(roots)}")
    children = {j: [] for j in range(len(parents))}
    for j, p in enumerate(parents):
        if p >= 0:
            if p >= len(parents):
                raise ConfigError(f"Joint {j} has out-of-range parent {p}")
            children[int(p)].append(j)
    order, stack = [], [int(roots[0])]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != len(parents):
        raise ConfigError("Skeleton parents contain a cycle")
    return tuple(order)


def normalize_skin_weights(weights, tol=LOAD_WEIGHT_TOL):
    """Renormalize rows whose sums drift past WEIGHT_TOL but stay within tol of 1; reject anything worse."""
    w = np.array(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DataError("Skin weights must be finite and nonnegative")
    sums = w.sum(axis=1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad):
        raise DataError(f"{int(bad.sum())} skin weight rows do not sum to 1 (first: row {int(np.flatnonzero(bad)[0])})")
    drift = np.abs(sums - 1.0) > WEIGHT_TOL
    if np.any(drift):
        logger.debug("renormalized %d skin weight rows", int(drift.sum()))
    w[drift] = w[drift] / sums[drift, None]
    return w


@dataclass(frozen=True)
class TemplateMesh:
    rest_vertices: np.ndarray
    faces: np.ndarray
    joint_parents: np.ndarray
    joint_rest_positions: np.ndarray
    skin_weights: np.ndarray
    joint_names: tuple = ()
    order: tuple = field(init=False, repr=False)

    def __post_init__(self):
        verts = _frozen(self.rest_vertices, np.float64)
        faces = _frozen(self.faces, np.int64)
        parents = _frozen(self.joint_parents, np.int64)
        joints = _frozen(self.joint_rest_positions, np.float64)
        weights = _frozen(self.skin_weights, np.float64)
        if verts.ndim != 2 or verts.shape[1] != 3 or len(verts) < 3:
            raise ConfigError("rest_vertices must be M x 3 with M >= 3")
        if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) == 0:
            raise ConfigError("faces must be F x 3")
        if faces.min() < 0 or faces.max() >= len(verts):
            raise ConfigError("face index out of range")
        if joints.shape != (len(parents), 3) or len(parents) < 1:
            raise ConfigError("joint_rest_positions must be J x 3 with J >= 1")
        if weights.shape != (len(verts), len(parents)):
            raise ConfigError(f"skin_weights must be {len(verts)} x {len(parents)}, got {weights.shape}")
        if np.any(weights < 0) or np.any(np.abs(weights.sum(axis=1) - 1.0) > WEIGHT_TOL):
            raise ConfigError("skin weight rows must be nonnegative and sum to 1")
        if not np.all(np.isfinite(verts)):
            raise ConfigError("rest_vertices must be finite")
        tri = verts[faces]
        areas = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        if np.any(areas <= 1e-12):
            raise ConfigError(f"{int((areas <= 1e-12).sum())} degenerate faces in rest mesh")
        if self.joint_names and len(self.joint_names) != len(parents):
            raise ConfigError("joint_names length must equal J")
        object.__setattr__(self, "rest_vertices", verts)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "joint_parents", parents)
        object.__setattr__(self, "joint_rest_positions", joints)
        object.__setattr__(self, "skin_weights", weights)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "order", topological_order(parents))

    @property
    def num_vertices(self):
        return len(self.rest_vertices)

    @property
    def num_joints(self):
        return len(self.joint_parents)

    @property
    def num_faces(self):
        return len(self.faces)

    @property
    def root(self):
        return self.order[0]

    def joint_index(self, name):
        try:
            return self.joint_names.index(name)
        except ValueError as e:
            raise ConfigError(f"Unknown joint '{name}'") from e


@dataclass(frozen=True)
class Pose:
    """Per-joint unit quaternions (w, x, y, z), root translation and frame index."""

    joint_rotations: np.ndarray
    root_translation: np.ndarray
    frame_time: int = 0

    def __post_init__(self):
        q = np.array(self.joint_rotations, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 4:
            raise ConfigError("joint_rotations must be J x 4 quaternions (w, x, y, z)")
        norms = np.linalg.norm(q, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ConfigError("joint rotations must be unit quaternions")
        t = np.array(self.root_translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ConfigError("pose values must be finite")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "joint_rotations", q)
        object.__setattr__(self, "root_translation", t)
        object.__setattr__(self, "frame_time", int(self.frame_time))

    @property
    def num_joints(self):
        return len(self.joint_rotations)

    @classmethod
    def identity(cls, num_joints, frame_time=0):
        q = np.zeros((num_joints, 4))
        q[:, 0] = 1.0
        return cls(q, np.zeros(3), frame_time)

    @classmethod
    def from_rotations(cls, rotations, root_translation=(0.0, 0.0, 0.0), frame_time=0):
        """Build from a scipy Rotation stack or J x 3 x 3 orthonormal matrices."""
        if not isinstance(rotations, Rotation):
            mats = np.asarray(rotations, dtype=np.float64)
            if np.any(np.abs(np.linalg.det(mats) - 1.0) > UNIT_TOL):
                raise ConfigError("rotation matrices must have determinant +1")
            eye = np.einsum("jab,jcb->jac", mats, mats)
            if np.any(np.abs(eye - np.eye(3)) > UNIT_TOL):
                raise ConfigError("rotation matrices must be orthonormal")
            rotations = Rotation.from_matrix(mats)
        xyzw = rotations.as_quat()
        return cls(xyzw[:, [3, 0, 1, 2]], root_translation, frame_time)

    def rotation(self):
        return Rotation.from_quat(self.joint_rotations[:, [1, 2, 3, 0]])

    def rotation_matrices(self):
        mats = self.rotation().as_matrix()
        # exact identity for the identity quaternion
        ident = np.all(self.joint_rotations == np.array([1.0, 0.0, 0.0, 0.0]), axis=1)
        mats[ident] = np.eye(3)
        return mats

    def with_rotation(self, joint, rotation):
        """Copy with one joint's local rotation replaced (scipy Rotation)."""
        q = self.joint_rotations.copy()
        x, y, z, w = rotation.as_quat()
        q[joint] = (w, x, y, z)
        return Pose(q, self.root_translation, self.frame_time)


@dataclass(frozen=True)
class PosedVertices:
    positions: np.ndarray
    frame_time: int = 0

    def __post_init__(self):
        p = _frozen(self.positions, np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ConfigError("positions must be M x 3")
        if not np.all(np.isfinite(p)):
            raise DataError("posed vertex positions must be finite")
        object.__setattr__(self, "positions", p)

    def __len__(self):
        return len(self.positions)


def _local_transform(rot, center):
    """4x4 rotation about center: T(c) R T(-c)."""
    T = np.eye(4)
    T[:3, :3] = rot
    T[:3, 3] = center - rot @ center
    return T


def forward_kinematics(mesh, pose):
    """J x 4 x 4 skinning transforms mapping rest-space points to posed space."""
    if pose.num_joints != mesh.num_joints:
        raise ConfigError(f"Pose has {pose.num_joints} joints, skeleton has {mesh.num_joints}")
    rots = pose.rotation_matrices()
    out = np.empty((mesh.num_joints, 4, 4))
    for j in mesh.order:
        local = _local_transform(rots[j], mesh.joint_rest_positions[j])
        parent = mesh.joint_parents[j]
        if parent < 0:
            local[:3, 3] += pose.root_translation
            out[j] = local
        else:
            out[j] = out[parent] @ local
    return out


def pose_vertices(mesh, pose):
    transforms = forward_kinematics(mesh, pose)
    rest = mesh.rest_vertices
    w = mesh.skin_weights
    # displacement form so the rest pose reproduces rest_vertices exactly
    lin = transforms[:, :3, :3] - np.eye(3)
    moved = np.einsum("jab,vb->vja", lin, rest) + transforms[None, :, :3, 3]
    positions = rest + np.einsum("vj,vja->va", w, moved)
    return PosedVertices(positions, pose.frame_time)


def apply_global_rigid(mesh, pose, rotation, translation):
    """Pose whose skinned result equals the rigid motion (rotation, translation) of pose's result."""
    R = rotation.as_matrix()
    p0 = mesh.joint_rest_positions[mesh.root]
    root_rot = rotation * pose.rotation()[mesh.root]
    new_t = R @ (p0 + pose.root_translation) + np.asarray(translation, dtype=np.float64) - p0
    q = pose.joint_rotations.copy()
    x, y, z, w = root_rot.as_quat()
    q[mesh.root] = (w, x, y, z)
    return Pose(q, new_t, pose.frame_time)


def vertex_normals(positions, faces):
    """Area-weighted vertex normals; zero-length results stay zero."""
    pos = np.asarray(positions, dtype=np.float64)
    tri = pos[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals = np.zeros_like(pos)
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return np.divide(normals, norm, out=np.zeros_like(normals), where=norm > 0)
