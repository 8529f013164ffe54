"""
Kinematics Tool - homogeneous frames, skeleton rig, forward kinematics and pose encodings
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from utils.errors import DegenerateRotationError, InvalidInputError
from utils.logger import setup_logger

logger = setup_logger(__name__)

NORM_EPS = 1e-8
ROOT_PARENT = -1


@dataclass(frozen=True)
class RigidTransform:
    """x -> rotation @ x + translation; homogeneous matrix with last row (0, ..., 0, 1)"""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64)
        if rotation.ndim != 2 or rotation.shape[0] != rotation.shape[1]:
            raise InvalidInputError(f"Rotation must be square, got shape {rotation.shape}")
        if translation.shape != (rotation.shape[0],):
            raise InvalidInputError(
                f"Translation shape {translation.shape} does not match rotation {rotation.shape}"
            )
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @property
    def dim(self) -> int:
        return self.rotation.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "RigidTransform":
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def from_translation(cls, translation) -> "RigidTransform":
        translation = np.asarray(translation, dtype=np.float64)
        return cls(np.eye(translation.shape[0]), translation)

    @classmethod
    def from_rotation(cls, rotation) -> "RigidTransform":
        rotation = np.asarray(rotation, dtype=np.float64)
        return cls(rotation, np.zeros(rotation.shape[0]))

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=np.float64)
        d = matrix.shape[0] - 1
        return cls(matrix[:d, :d], matrix[:d, d])

    def matrix(self) -> np.ndarray:
        d = self.dim
        out = np.eye(d + 1)
        out[:d, :d] = self.rotation
        out[:d, d] = self.translation
        return out

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self · other"""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform points (..., d) as homogeneous points"""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


def rotation_matrix(params, dim: int) -> np.ndarray:
    """One angle (d=2) or an axis-angle 3-vector (d=3) to a rotation matrix"""
    params = np.atleast_1d(np.asarray(params, dtype=np.float64))
    if dim == 2:
        if params.shape != (1,):
            raise InvalidInputError(f"2D joints take one angle, got {params.shape}")
        c, s = np.cos(params[0]), np.sin(params[0])
        return np.array([[c, -s], [s, c]])
    if dim == 3:
        if params.shape != (3,):
            raise InvalidInputError(f"3D joints take an axis-angle 3-vector, got {params.shape}")
        angle = np.linalg.norm(params)
        if angle < 1e-12:
            return np.eye(3)
        k = params / angle
        K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
        return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
    raise InvalidInputError(f"Dimension must be 2 or 3, got {dim}")


def rotation_angle(rotation: np.ndarray) -> float:
    """Unsigned rotation angle in [0, pi]"""
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape == (2, 2):
        return float(abs(np.arctan2(rotation[1, 0], rotation[0, 0])))
    cos_angle = np.clip((np.trace(rotation) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_angle))


def joint_param_size(dim: int) -> int:
    return 1 if dim == 2 else 3


@dataclass(frozen=True)
class Rig:
    """Tree skeleton rooted at bone 0 with translation-only rest frames"""

    parents: Tuple[int, ...]
    rest_offsets: np.ndarray

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        if len(parents) == 0:
            raise InvalidInputError("A rig needs at least one bone")
        if offsets.ndim != 2 or offsets.shape[0] != len(parents) or offsets.shape[1] not in (2, 3):
            raise InvalidInputError(f"Rest offsets must be (B, 2|3), got {offsets.shape}")
        if parents[0] != ROOT_PARENT:
            raise InvalidInputError("Bone 0 must be the root")
        for b, p in enumerate(parents[1:], start=1):
            if not 0 <= p < b:
                raise InvalidInputError(f"Bone {b} has parent {p}; parents must precede children")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_offsets", offsets)

    @property
    def bone_count(self) -> int:
        return len(self.parents)

    @property
    def dim(self) -> int:
        return self.rest_offsets.shape[1]

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return [(p, b) for b, p in enumerate(self.parents) if p != ROOT_PARENT]

    def rest_translations(self) -> np.ndarray:
        """Cumulative rest offsets along each chain, (B, d)"""
        out = np.zeros_like(self.rest_offsets)
        for b, p in enumerate(self.parents):
            out[b] = self.rest_offsets[b] + (out[p] if p != ROOT_PARENT else 0.0)
        return out

    def rest_bones(self) -> "PosedBones":
        B, d = self.bone_count, self.dim
        rotations = np.tile(np.eye(d), (B, 1, 1))
        return PosedBones(rotations, self.rest_translations())

    def rest_pose(self) -> "Pose":
        return Pose(
            np.zeros((self.bone_count, joint_param_size(self.dim))),
            RigidTransform.identity(self.dim),
        )


@dataclass(frozen=True)
class Pose:
    joint_params: np.ndarray
    root_transform: RigidTransform

    def __post_init__(self):
        params = np.asarray(self.joint_params, dtype=np.float64)
        if params.ndim == 1:
            params = params[:, None]
        if not np.all(np.isfinite(params)):
            raise InvalidInputError("Joint parameters must be finite")
        object.__setattr__(self, "joint_params", params)

    def transformed(self, transform: RigidTransform) -> "Pose":
        """The same articulation carried by a global rigid motion G (G∘θ)"""
        return Pose(self.joint_params.copy(), transform.compose(self.root_transform))


class PosedBones:
    """Posed frames {B_b} with analytically cached inverses {C_b = B_b^-1}.

    Arrays: rotations (B, d, d), translations (B, d), inv_rotations, inv_translations.
    """

    __slots__ = ("rotations", "translations", "inv_rotations", "inv_translations")

    def __init__(self, rotations, translations):
        rotations = np.asarray(rotations, dtype=np.float64)
        translations = np.asarray(translations, dtype=np.float64)
        if rotations.ndim != 3 or translations.shape != rotations.shape[:2]:
            raise InvalidInputError(
                f"Bone arrays must be (B, d, d) and (B, d), got {rotations.shape} and {translations.shape}"
            )
        inv_rotations = np.transpose(rotations, (0, 2, 1))
        self.rotations = rotations
        self.translations = translations
        self.inv_rotations = inv_rotations
        self.inv_translations = -np.einsum("bij,bj->bi", inv_rotations, translations)

    @classmethod
    def from_inverse(cls, inv_rotations, inv_translations) -> "PosedBones":
        """Build from inverse frames C_b without numeric inversion"""
        inv_rotations = np.asarray(inv_rotations, dtype=np.float64)
        inv_translations = np.asarray(inv_translations, dtype=np.float64)
        rotations = np.transpose(inv_rotations, (0, 2, 1))
        translations = -np.einsum("bij,bj->bi", rotations, inv_translations)
        posed = cls(rotations, translations)
        posed.inv_rotations = inv_rotations
        posed.inv_translations = inv_translations
        return posed

    @property
    def bone_count(self) -> int:
        return self.rotations.shape[0]

    @property
    def dim(self) -> int:
        return self.rotations.shape[1]

    @property
    def bones(self) -> List[RigidTransform]:
        return [RigidTransform(r, t) for r, t in zip(self.rotations, self.translations)]

    @property
    def inverses(self) -> List[RigidTransform]:
        return [RigidTransform(r, t) for r, t in zip(self.inv_rotations, self.inv_translations)]

    @property
    def root_origin(self) -> np.ndarray:
        """t_0, the translation of bone 0"""
        return self.translations[0]

    def to_local(self, points) -> np.ndarray:
        """{B_b^-1 x}: points (N, d) -> (B, N, d)"""
        points = np.asarray(points, dtype=np.float64)
        return np.einsum("bij,nj->bni", self.inv_rotations, points) + self.inv_translations[:, None, :]

    def transformed(self, transform: RigidTransform) -> "PosedBones":
        """{G · B_b}"""
        rotations = np.einsum("ij,bjk->bik", transform.rotation, self.rotations)
        translations = self.translations @ transform.rotation.T + transform.translation
        return PosedBones(rotations, translations)

    def parent_relative_angles(self, parents: Sequence[int]) -> np.ndarray:
        """Rotation angle of each bone relative to its parent; 0 for the root"""
        angles = np.zeros(self.bone_count)
        for b, p in enumerate(parents):
            if p == ROOT_PARENT:
                continue
            angles[b] = rotation_angle(self.rotations[p].T @ self.rotations[b])
        return angles


def forward_kinematics(rig: Rig, pose: Pose) -> PosedBones:
    """B_b = root · prod over the chain of Translate(offset_a) · Rotate(joint_a)"""
    B, d = rig.bone_count, rig.dim
    k = joint_param_size(d)
    if pose.joint_params.shape != (B, k):
        raise InvalidInputError(
            f"Pose has joint parameters {pose.joint_params.shape}, rig expects {(B, k)}"
        )
    if pose.root_transform.dim != d:
        raise InvalidInputError(f"Root transform is {pose.root_transform.dim}D, rig is {d}D")

    rotations = np.empty((B, d, d))
    translations = np.empty((B, d))
    for b, p in enumerate(rig.parents):
        if p == ROOT_PARENT:
            parent_rot = pose.root_transform.rotation
            parent_trans = pose.root_transform.translation
        else:
            parent_rot, parent_trans = rotations[p], translations[p]
        translations[b] = parent_rot @ rig.rest_offsets[b] + parent_trans
        rotations[b] = parent_rot @ rotation_matrix(pose.joint_params[b], d)

    return PosedBones(rotations, translations)


def pose_encoding(posed: PosedBones) -> np.ndarray:
    """{B_b^-1 t_0} flattened to a (B*d,) vector; block 0 is always zero"""
    t0 = posed.root_origin
    return (np.einsum("bij,j->bi", posed.inv_rotations, t0) + posed.inv_translations).ravel()


def frame_encoding(posed: PosedBones) -> np.ndarray:
    """{B_b^-1} flattened (rotation rows then translation per bone), (B*(d*d+d),)"""
    B = posed.bone_count
    return np.concatenate(
        [posed.inv_rotations.reshape(B, -1), posed.inv_translations], axis=1
    ).ravel()


def rotation_from_two_vectors(u, v, eps: float = NORM_EPS) -> np.ndarray:
    """Gram-Schmidt rotation whose first columns follow u and v (only u in 2D)"""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = u.shape[0]

    norm_u = np.linalg.norm(u)
    if not np.isfinite(norm_u) or norm_u <= eps:
        raise DegenerateRotationError(f"First vector is too short (|u| = {norm_u:.3g})")
    r1 = u / norm_u

    if d == 2:
        return np.array([[r1[0], -r1[1]], [r1[1], r1[0]]])
    if d != 3:
        raise InvalidInputError(f"Dimension must be 2 or 3, got {d}")

    w = v - np.dot(v, r1) * r1
    norm_w = np.linalg.norm(w)
    if not np.isfinite(norm_w) or norm_w <= eps:
        raise DegenerateRotationError("Vectors are parallel; cannot build a rotation")
    r2 = w / norm_w
    r3 = np.cross(r1, r2)
    return np.stack([r1, r2, r3], axis=1)


def rotation_from_two_vectors_backward(u, v, grad_rotation) -> Tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradients of rotation_from_two_vectors w.r.t. u and v"""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    G = np.asarray(grad_rotation, dtype=np.float64)
    d = u.shape[0]

    norm_u = np.linalg.norm(u)
    r1 = u / norm_u

    if d == 2:
        g_r1 = G[:, 0] + np.array([G[1, 1], -G[0, 1]])
        g_u = (g_r1 - r1 * np.dot(r1, g_r1)) / norm_u
        return g_u, np.zeros_like(v)

    s = np.dot(v, r1)
    w = v - s * r1
    norm_w = np.linalg.norm(w)
    r2 = w / norm_w

    g_r1 = G[:, 0] + np.cross(r2, G[:, 2])
    g_r2 = G[:, 1] + np.cross(G[:, 2], r1)

    g_w = (g_r2 - r2 * np.dot(r2, g_r2)) / norm_w
    g_v = g_w - r1 * np.dot(r1, g_w)
    g_r1 = g_r1 - np.dot(r1, g_w) * v - s * g_w

    g_u = (g_r1 - r1 * np.dot(r1, g_r1)) / norm_u
    return g_u, g_v


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Project a drifted rotation back onto SO(d) from its leading columns"""
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape[0] == 2:
        return rotation_from_two_vectors(rotation[:, 0], rotation[:, 0])
    return rotation_from_two_vectors(rotation[:, 0], rotation[:, 1])
