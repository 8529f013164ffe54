"""
Shared builders and numeric checks for the test suite
"""

import numpy as np

from tools.kinematics import Pose, RigidTransform, joint_param_size, rotation_matrix

FD_STEP = 1e-7


def random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    if dim == 2:
        return rotation_matrix([rng.uniform(-np.pi, np.pi)], 2)
    return rotation_matrix(rng.normal(size=3), 3)


def random_rigid(rng: np.random.Generator, dim: int, spread: float = 2.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng, dim), rng.uniform(-spread, spread, size=dim))


def random_pose(rng: np.random.Generator, body, amplitude: float = 0.6, root: RigidTransform | None = None) -> Pose:
    k = joint_param_size(body.dim)
    joints = rng.uniform(-amplitude, amplitude, size=(body.bone_count, k))
    return Pose(joints, root or RigidTransform.identity(body.dim))


def central_difference(f, x: np.ndarray, indices=None, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar f at x (any shape) for the chosen flat indices"""
    x = np.array(x, dtype=np.float64)
    flat = x.ravel()
    indices = range(flat.size) if indices is None else indices
    out = np.zeros(len(indices))
    for j, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        up = f(flat.reshape(x.shape))
        flat[i] = old - h
        down = f(flat.reshape(x.shape))
        flat[i] = old
        out[j] = (up - down) / (2.0 * h)
    return out


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)
