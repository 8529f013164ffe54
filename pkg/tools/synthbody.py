"""
Synthetic Body Tool - articulated capsule body with an analytic occupancy oracle
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple

import numpy as np

from tools.kinematics import (
    Pose,
    PosedBones,
    RigidTransform,
    Rig,
    joint_param_size,
)
from utils.errors import InvalidInputError, SamplingExhaustedError
from utils.logger import setup_logger

logger = setup_logger(__name__)

BBOX_SCALE = 1.1
MAX_ATTEMPTS_PER_SAMPLE = 100
# skinning weights this close to the maximum count as tied; the lowest part index wins
SKINNING_TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CapsuleBody:
    """One capsule per bone, segment endpoints given in the bone's local frame"""

    rig: Rig
    seg_start: np.ndarray
    seg_end: np.ndarray
    radii: np.ndarray
    bulge: np.ndarray

    def __post_init__(self):
        B, d = self.rig.bone_count, self.rig.dim
        arrays = {}
        for name, shape in (
            ("seg_start", (B, d)),
            ("seg_end", (B, d)),
            ("radii", (B,)),
            ("bulge", (B,)),
        ):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.shape != shape:
                raise InvalidInputError(f"{name} must have shape {shape}, got {value.shape}")
            arrays[name] = value
            object.__setattr__(self, name, value)

        if np.any(arrays["radii"] <= 0):
            raise InvalidInputError("Capsule radii must be positive")
        if np.any(arrays["bulge"] < 0) or np.any(arrays["bulge"] >= 1):
            raise InvalidInputError("Bulge coefficients must lie in [0, 1)")
        if np.any(np.linalg.norm(arrays["seg_end"] - arrays["seg_start"], axis=1) <= 0):
            raise InvalidInputError("Capsule segments must have positive length")

    @property
    def bone_count(self) -> int:
        return self.rig.bone_count

    @property
    def dim(self) -> int:
        return self.rig.dim

    @property
    def mean_radius(self) -> float:
        return float(np.mean(self.radii))

    @property
    def is_rigid(self) -> bool:
        return bool(np.all(self.bulge == 0))


def chain_body(
    dim: int = 2,
    bone_count: int = 5,
    segment_length: float = 0.5,
    radius: float = 0.12,
    bulge: float = 0.3,
) -> CapsuleBody:
    """A straight chain along +x; each bone's capsule spans its segment to the next joint"""
    axis = np.zeros(dim)
    axis[0] = segment_length
    offsets = np.tile(axis, (bone_count, 1))
    offsets[0] = 0.0
    rig = Rig(tuple([-1] + list(range(bone_count - 1))), offsets)
    return CapsuleBody(
        rig=rig,
        seg_start=np.zeros((bone_count, dim)),
        seg_end=np.tile(axis, (bone_count, 1)),
        radii=np.full(bone_count, radius),
        bulge=np.full(bone_count, bulge),
    )


def bend_factors(body: CapsuleBody, posed: PosedBones) -> np.ndarray:
    """Parent-relative joint angle / pi, clamped to [0, 1]"""
    angles = posed.parent_relative_angles(body.rig.parents)
    return np.clip(angles / np.pi, 0.0, 1.0)


def effective_radii(body: CapsuleBody, posed: PosedBones) -> np.ndarray:
    return body.radii * (1.0 + body.bulge * bend_factors(body, posed))


def segment_distance(points: np.ndarray, start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Distance from points (..., N, d) to segments (..., d) broadcast per leading axis"""
    pa = points - start[..., None, :]
    ba = (end - start)[..., None, :]
    h = np.clip(np.sum(pa * ba, axis=-1) / np.sum(ba * ba, axis=-1), 0.0, 1.0)
    return np.linalg.norm(pa - h[..., None] * ba, axis=-1)


def part_distances(body: CapsuleBody, posed: PosedBones, points) -> np.ndarray:
    """Distance from each point to each posed capsule axis, (B, N)"""
    local = posed.to_local(np.atleast_2d(points))
    return segment_distance(local, body.seg_start, body.seg_end)


def part_occupancy(body: CapsuleBody, posed: PosedBones, points) -> np.ndarray:
    """Per-part capsule indicator, (B, N) bool"""
    radii = effective_radii(body, posed)
    return part_distances(body, posed, points) <= radii[:, None]


def gt_occupancy(body: CapsuleBody, posed: PosedBones, points) -> np.ndarray:
    """O(x|θ): 1 inside the union of posed capsules, else 0; (N,) uint8"""
    if posed.bone_count != body.bone_count:
        raise InvalidInputError(
            f"Posed bones ({posed.bone_count}) do not match the body ({body.bone_count})"
        )
    return np.any(part_occupancy(body, posed, points), axis=0).astype(np.uint8)


def posed_bbox(body: CapsuleBody, posed: PosedBones, scale: float = 1.0):
    """Axis-aligned box of the posed capsules, half-extents scaled about the center"""
    radii = effective_radii(body, posed)
    starts = np.einsum("bij,bj->bi", posed.rotations, body.seg_start) + posed.translations
    ends = np.einsum("bij,bj->bi", posed.rotations, body.seg_end) + posed.translations
    lo = np.minimum(starts, ends) - radii[:, None]
    hi = np.maximum(starts, ends) + radii[:, None]
    lo, hi = lo.min(axis=0), hi.max(axis=0)
    center, half = (lo + hi) / 2.0, (hi - lo) / 2.0 * scale
    return center - half, center + half


def bbox_diagonal(body: CapsuleBody, posed: PosedBones) -> float:
    lo, hi = posed_bbox(body, posed)
    return float(np.linalg.norm(hi - lo))


def capsule_surface_measures(body: CapsuleBody, radii: np.ndarray) -> np.ndarray:
    """Perimeter (2D) or area (3D) of each capsule"""
    lengths = np.linalg.norm(body.seg_end - body.seg_start, axis=1)
    if body.dim == 2:
        return 2.0 * lengths + 2.0 * np.pi * radii
    return 2.0 * np.pi * radii * lengths + 4.0 * np.pi * radii**2


class SurfaceSamples(NamedTuple):
    points: np.ndarray
    normals: np.ndarray
    parts: np.ndarray


def _orthonormal_complement(axis: np.ndarray) -> np.ndarray:
    """Two unit vectors spanning the plane orthogonal to a 3D axis"""
    helper = np.eye(3)[np.argmin(np.abs(axis))]
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return np.stack([e1, e2])


def _sample_capsule_local(
    rng: np.random.Generator, start: np.ndarray, end: np.ndarray, radius: float, count: int
):
    """Uniform-by-measure points and outward normals on one capsule, bone-local frame"""
    d = start.shape[0]
    seg = end - start
    length = np.linalg.norm(seg)
    axis = seg / length

    if d == 2:
        side = length
        cap = np.pi * radius
        total = 2.0 * side + 2.0 * cap
        s = rng.uniform(0.0, total, size=count)
        perp = np.array([-axis[1], axis[0]])

        upper = s < side
        lower = (s >= side) & (s < 2.0 * side)
        arc = np.clip((s - 2.0 * side) / radius, 0.0, 2.0 * np.pi)
        # end cap for arc in [0, π), start cap for [π, 2π); both sweep φ = arc - π/2
        phi = arc - np.pi / 2.0
        cap_normals = np.cos(phi)[:, None] * axis + np.sin(phi)[:, None] * perp
        cap_anchors = np.where((arc < np.pi)[:, None], end, start)

        along = np.where(upper, s, s - side)[:, None]
        side_anchors = start + along * axis
        normals = np.where(
            upper[:, None], perp, np.where(lower[:, None], -perp, cap_normals)
        )
        anchors = np.where((upper | lower)[:, None], side_anchors, cap_anchors)
        return anchors + radius * normals, normals

    cylinder = 2.0 * np.pi * radius * length
    sphere = 4.0 * np.pi * radius**2
    on_cylinder = rng.uniform(0.0, cylinder + sphere, size=count) < cylinder
    frame = _orthonormal_complement(axis)

    t = rng.uniform(0.0, length, size=count)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=count)
    cyl_normals = np.cos(phi)[:, None] * frame[0] + np.sin(phi)[:, None] * frame[1]
    cyl_anchors = start + t[:, None] * axis

    dirs = rng.normal(size=(count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    forward = dirs @ axis >= 0.0
    sph_anchors = np.where(forward[:, None], end, start)

    normals = np.where(on_cylinder[:, None], cyl_normals, dirs)
    anchors = np.where(on_cylinder[:, None], cyl_anchors, sph_anchors)
    return anchors + radius * normals, normals


def surface_samples(body: CapsuleBody, posed: PosedBones, n: int, seed) -> SurfaceSamples:
    """Area-proportional samples on the union boundary with outward normals and owner part"""
    if n < 1:
        raise InvalidInputError(f"Need at least one surface sample, got {n}")

    rng = np.random.default_rng(seed)
    radii = effective_radii(body, posed)
    measures = capsule_surface_measures(body, radii)
    probabilities = measures / measures.sum()

    points: List[np.ndarray] = []
    normals: List[np.ndarray] = []
    parts: List[np.ndarray] = []
    accepted = 0
    attempts = 0
    budget = MAX_ATTEMPTS_PER_SAMPLE * n

    while accepted < n:
        if attempts >= budget:
            raise SamplingExhaustedError(
                f"Only {accepted}/{n} surface samples survived after {attempts} attempts"
            )
        batch = min(max(2 * (n - accepted), 64), budget - attempts)
        attempts += batch
        owners = rng.choice(body.bone_count, size=batch, p=probabilities)

        batch_points = np.empty((batch, body.dim))
        batch_normals = np.empty((batch, body.dim))
        for b in range(body.bone_count):
            mask = owners == b
            count = int(mask.sum())
            if count == 0:
                continue
            local_points, local_normals = _sample_capsule_local(
                rng, body.seg_start[b], body.seg_end[b], radii[b], count
            )
            batch_points[mask] = local_points @ posed.rotations[b].T + posed.translations[b]
            batch_normals[mask] = local_normals @ posed.rotations[b].T

        distances = part_distances(body, posed, batch_points)
        inside_other = distances < radii[:, None] * (1.0 - 1e-9)
        inside_other[owners, np.arange(batch)] = False
        keep = ~np.any(inside_other, axis=0)

        take = np.flatnonzero(keep)[: n - accepted]
        points.append(batch_points[take])
        normals.append(batch_normals[take])
        parts.append(owners[take])
        accepted += take.size

    return SurfaceSamples(
        np.concatenate(points), np.concatenate(normals), np.concatenate(parts).astype(np.int64)
    )


def skinning_weights(body: CapsuleBody, vertices, temperature: float | None = None) -> np.ndarray:
    """Softmin over rest-pose capsule signed distances, (N, B) rows summing to 1"""
    vertices = np.atleast_2d(np.asarray(vertices, dtype=np.float64))
    if not np.all(np.isfinite(vertices)):
        raise InvalidInputError("Skinning weights need finite vertices")
    tau = temperature if temperature is not None else 0.1 * body.mean_radius

    rest = body.rig.rest_bones()
    signed = part_distances(body, rest, vertices) - body.radii[:, None]
    logits = -signed.T / tau
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)


def rest_locations(posed: PosedBones, rest: PosedBones, points, parts) -> np.ndarray:
    """Carry posed points owned by part b back to the rest pose: B̄_b · B_b^-1 · x"""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    parts = np.asarray(parts, dtype=np.int64)
    local = np.einsum("nij,nj->ni", posed.inv_rotations[parts], points) + posed.inv_translations[parts]
    return np.einsum("nij,nj->ni", rest.rotations[parts], local) + rest.translations[parts]


def dominant_parts(body: CapsuleBody, posed: PosedBones, points, owners) -> np.ndarray:
    """b*(v) = argmax_b w(v) evaluated at each surface sample's rest location"""
    rest = body.rig.rest_bones()
    weights = skinning_weights(body, rest_locations(posed, rest, points, owners))
    return np.argmax(weights >= weights.max(axis=1, keepdims=True) - SKINNING_TIE_TOLERANCE, axis=1)


@dataclass(frozen=True)
class AnimationSpec:
    """Per joint component: angle(t) = sum_i a_i sin(2π f_i t / rate + φ_i).

    amplitudes, frequencies, phases have shape (B, k, M) with k joint components
    and M sinusoids per component.
    """

    amplitudes: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray
    frame_count: int
    frame_rate: float = 30.0
    seed: int = 0

    def __post_init__(self):
        shapes = set()
        for name in ("amplitudes", "frequencies", "phases"):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.ndim != 3:
                raise InvalidInputError(f"{name} must be (B, k, M), got {value.shape}")
            shapes.add(value.shape)
            object.__setattr__(self, name, value)
        if len(shapes) != 1:
            raise InvalidInputError("Amplitude, frequency and phase tables must share one shape")
        if self.frame_count < 1 or self.frame_rate <= 0:
            raise InvalidInputError("Animations need frame_count >= 1 and a positive frame rate")
        if np.any(np.abs(self.amplitudes).sum(axis=2) >= np.pi):
            raise InvalidInputError("Summed amplitudes must stay below pi")
        offset = np.sum(self.amplitudes * np.sin(self.phases), axis=2)
        if np.any(np.abs(offset) > 1e-12):
            raise InvalidInputError("Frame 0 must be the rest pose: sum a_i sin(φ_i) must vanish")

    def max_angular_velocity(self) -> float:
        """Bound on |Δangle| per frame for every joint component"""
        per_joint = np.sum(np.abs(self.amplitudes) * 2.0 * np.pi * self.frequencies, axis=2)
        return float(per_joint.max() / self.frame_rate) if per_joint.size else 0.0


def random_animation_spec(
    body: CapsuleBody,
    frame_count: int,
    seed: int,
    max_velocity: float = 0.1,
    max_amplitude: float = 1.0,
    components: int = 2,
    frame_rate: float = 30.0,
    root_motion: bool = False,
) -> AnimationSpec:
    """Random sinusoid mixtures with per-frame angular speed bounded by max_velocity"""
    rng = np.random.default_rng(seed)
    B, k = body.bone_count, joint_param_size(body.dim)
    shape = (B, k, components)

    frequencies = rng.uniform(0.1, 0.6, size=shape)
    amplitudes = rng.uniform(0.3, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    phases = rng.choice([0.0, np.pi], size=shape)

    if not 0.0 < max_amplitude < np.pi:
        raise InvalidInputError(f"max_amplitude must lie in (0, π), got {max_amplitude}")

    # scale each joint so both the amplitude sum and the speed bound hold
    amp_sum = np.abs(amplitudes).sum(axis=2, keepdims=True)
    speed = np.sum(np.abs(amplitudes) * 2.0 * np.pi * frequencies, axis=2, keepdims=True) / frame_rate
    amplitudes = amplitudes * np.minimum(max_amplitude / amp_sum, max_velocity / speed)

    if not root_motion:
        amplitudes[0] = 0.0

    return AnimationSpec(amplitudes, frequencies, phases, frame_count, frame_rate, seed)


def joint_angles_at(spec: AnimationSpec, frame: int) -> np.ndarray:
    arg = 2.0 * np.pi * spec.frequencies * frame / spec.frame_rate + spec.phases
    return np.sum(spec.amplitudes * np.sin(arg), axis=2)


def generate_animation(body: CapsuleBody, spec: AnimationSpec) -> List[Pose]:
    B, k = body.bone_count, joint_param_size(body.dim)
    if spec.amplitudes.shape[:2] != (B, k):
        raise InvalidInputError(
            f"Animation tables are {spec.amplitudes.shape[:2]}, body expects {(B, k)}"
        )
    root = RigidTransform.identity(body.dim)
    return [Pose(joint_angles_at(spec, t), root) for t in range(spec.frame_count)]
