"""
Dataset Tool - per-frame occupancy samples, corpus split and the NASAOCC1 corpus file
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from tools.kinematics import Pose, RigidTransform, Rig, forward_kinematics, joint_param_size
from tools.synthbody import (
    BBOX_SCALE,
    CapsuleBody,
    bbox_diagonal,
    dominant_parts,
    generate_animation,
    gt_occupancy,
    posed_bbox,
    random_animation_spec,
    surface_samples,
)
from utils.binio import PayloadReader, PayloadWriter, as_f32_exact, read_container, write_container
from utils.errors import FormatError, InvalidInputError
from utils.logger import setup_logger

logger = setup_logger(__name__)

CORPUS_MAGIC = b"NASAOCC1"
CORPUS_VERSION = 1
# version u16, d u8, B u16
CORPUS_HEADER = struct.Struct("<HBH")


@dataclass
class FrameSamples:
    """Labeled evaluation/training samples for one posed frame.

    labels cover uniform_points followed by surface_points.
    """

    pose: Pose
    uniform_points: np.ndarray
    surface_points: np.ndarray
    labels: np.ndarray
    vertices: np.ndarray
    vertex_parts: np.ndarray
    sequence_id: int = 0
    frame_index: int = 0

    @property
    def points(self) -> np.ndarray:
        return np.concatenate([self.uniform_points, self.surface_points], axis=0)


@dataclass
class Corpus:
    body: CapsuleBody
    train_frames: List[FrameSamples]
    test_frames: List[FrameSamples]
    train_sequences: Tuple[int, ...] = ()
    test_sequences: Tuple[int, ...] = ()
    manifest: Dict = field(default_factory=dict)


def quantized_pose(pose: Pose) -> Pose:
    root = pose.root_transform
    return Pose(
        as_f32_exact(pose.joint_params),
        RigidTransform(as_f32_exact(root.rotation), as_f32_exact(root.translation)),
    )


def uniform_box_points(body: CapsuleBody, posed, count: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = posed_bbox(body, posed, scale=BBOX_SCALE)
    return rng.uniform(lo, hi, size=(count, body.dim))


def near_surface_points(
    body: CapsuleBody, posed, count: int, sigma_frac: float, rng: np.random.Generator
) -> np.ndarray:
    samples = surface_samples(body, posed, count, rng)
    sigma = sigma_frac * bbox_diagonal(body, posed)
    return samples.points + rng.normal(scale=sigma, size=samples.points.shape)


def _f32_inside_box(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Round to float32 without letting rounding push a point out of [lo, hi]"""
    lo32, hi32 = lo.astype(np.float32), hi.astype(np.float32)
    lo32 = np.where(lo32 < lo, np.nextafter(lo32, np.float32(np.inf)), lo32)
    hi32 = np.where(hi32 > hi, np.nextafter(hi32, np.float32(-np.inf)), hi32)
    return np.clip(points.astype(np.float32), lo32, hi32).astype(np.float64)


def surface_vertices(body: CapsuleBody, posed, count: int, rng: np.random.Generator):
    """Undisplaced surface samples and their dominant part b*"""
    samples = surface_samples(body, posed, count, rng)
    return samples.points, dominant_parts(body, posed, samples.points, samples.parts)


def build_frame_samples(
    body: CapsuleBody,
    pose: Pose,
    n_uniform: int,
    n_surface: int,
    n_vertices: int,
    sigma_frac: float = 0.03,
    seed=0,
    sequence_id: int = 0,
    frame_index: int = 0,
) -> FrameSamples:
    if min(n_uniform, n_surface, n_vertices) < 0 or n_uniform + n_surface < 1:
        raise InvalidInputError("Sample counts must be non-negative with at least one point")
    if sigma_frac <= 0:
        raise InvalidInputError(f"sigma_frac must be positive, got {sigma_frac}")

    rng = np.random.default_rng(seed)
    pose = quantized_pose(pose)
    posed = forward_kinematics(body.rig, pose)

    lo, hi = posed_bbox(body, posed, scale=BBOX_SCALE)
    uniform = _f32_inside_box(uniform_box_points(body, posed, n_uniform, rng), lo, hi)
    if n_surface > 0:
        surface = as_f32_exact(near_surface_points(body, posed, n_surface, sigma_frac, rng))
    else:
        surface = np.zeros((0, body.dim))

    if n_vertices > 0:
        vertices, parts = surface_vertices(body, posed, n_vertices, rng)
        vertices = as_f32_exact(vertices)
    else:
        vertices, parts = np.zeros((0, body.dim)), np.zeros(0, dtype=np.int64)

    labels = gt_occupancy(body, posed, np.concatenate([uniform, surface], axis=0))

    return FrameSamples(
        pose=pose,
        uniform_points=uniform,
        surface_points=surface,
        labels=labels,
        vertices=vertices,
        vertex_parts=parts.astype(np.int64),
        sequence_id=sequence_id,
        frame_index=frame_index,
    )


def split_sequences(sequence_count: int, test_count: int, seed: int) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    """Disjoint train/test sequence ids drawn from range(sequence_count)"""
    if not 0 < test_count < sequence_count:
        raise InvalidInputError(
            f"Need 0 < test sequences ({test_count}) < total sequences ({sequence_count})"
        )
    order = np.random.default_rng(seed).permutation(sequence_count)
    test = tuple(sorted(int(i) for i in order[:test_count]))
    train = tuple(sorted(int(i) for i in order[test_count:]))
    return train, test


def build_sequence(
    body: CapsuleBody,
    sequence_id: int,
    frame_count: int,
    n_uniform: int,
    n_surface: int,
    n_vertices: int,
    sigma_frac: float = 0.03,
    seed: int = 0,
    max_velocity: float = 0.1,
    max_amplitude: float = 1.0,
    components: int = 2,
    root_motion: bool = False,
) -> List[FrameSamples]:
    """One random animation with labeled samples for every frame; frame 0 is the rest pose"""
    spec = random_animation_spec(
        body,
        frame_count,
        seed=np.random.SeedSequence([seed, sequence_id]),
        max_velocity=max_velocity,
        max_amplitude=max_amplitude,
        components=components,
        root_motion=root_motion,
    )
    return [
        build_frame_samples(
            body,
            pose,
            n_uniform,
            n_surface,
            n_vertices,
            sigma_frac=sigma_frac,
            seed=frame_seed(seed, sequence_id, t),
            sequence_id=sequence_id,
            frame_index=t,
        )
        for t, pose in enumerate(generate_animation(body, spec))
    ]


# --- corpus file -------------------------------------------------------------------


def _write_frame(writer: PayloadWriter, frame: FrameSamples) -> None:
    root = frame.pose.root_transform
    writer.add_integers(
        [
            frame.sequence_id,
            frame.frame_index,
            frame.uniform_points.shape[0],
            frame.surface_points.shape[0],
            frame.vertices.shape[0],
        ]
    )
    writer.add_array(frame.pose.joint_params)
    writer.add_array(root.rotation)
    writer.add_array(root.translation)
    writer.add_array(frame.uniform_points)
    writer.add_array(frame.surface_points)
    writer.add_integers(frame.labels)
    writer.add_array(frame.vertices)
    writer.add_integers(frame.vertex_parts)


def _read_frame(reader: PayloadReader, d: int, B: int) -> FrameSamples:
    meta = reader.read_integers(expected=5)
    sequence_id, frame_index, n_uniform, n_surface, n_vertices = (int(v) for v in meta)
    k = joint_param_size(d)
    joint_params = reader.read_array(expected=B * k).reshape(B, k)
    rotation = reader.read_array(expected=d * d).reshape(d, d)
    translation = reader.read_array(expected=d)
    uniform = reader.read_array(expected=n_uniform * d).reshape(n_uniform, d)
    surface = reader.read_array(expected=n_surface * d).reshape(n_surface, d)
    labels = reader.read_integers(expected=n_uniform + n_surface).astype(np.uint8)
    vertices = reader.read_array(expected=n_vertices * d).reshape(n_vertices, d)
    parts = reader.read_integers(expected=n_vertices)
    return FrameSamples(
        pose=Pose(joint_params, RigidTransform(rotation, translation)),
        uniform_points=uniform,
        surface_points=surface,
        labels=labels,
        vertices=vertices,
        vertex_parts=parts,
        sequence_id=sequence_id,
        frame_index=frame_index,
    )


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    body = corpus.body
    d, B = body.dim, body.bone_count
    writer = PayloadWriter("<f4")

    writer.add_integers(body.rig.parents)
    writer.add_array(body.rig.rest_offsets)
    writer.add_array(body.seg_start)
    writer.add_array(body.seg_end)
    writer.add_array(body.radii)
    writer.add_array(body.bulge)
    writer.add_integers(corpus.train_sequences)
    writer.add_integers(corpus.test_sequences)
    writer.add_integers([len(corpus.train_frames), len(corpus.test_frames)])
    for frame in list(corpus.train_frames) + list(corpus.test_frames):
        _write_frame(writer, frame)

    header = CORPUS_HEADER.pack(CORPUS_VERSION, d, B)
    write_container(path, CORPUS_MAGIC, header, writer.payload())
    logger.info(
        f"Wrote corpus {path}: {len(corpus.train_frames)} train / {len(corpus.test_frames)} test frames"
    )


def read_corpus(path: str | Path) -> Corpus:
    (_, d, B), payload = read_container(path, CORPUS_MAGIC, CORPUS_VERSION, CORPUS_HEADER)
    reader = PayloadReader(payload, "<f4")

    parents = tuple(int(p) for p in reader.read_integers(expected=B))
    rig = Rig(parents, reader.read_array(expected=B * d).reshape(B, d))
    body = CapsuleBody(
        rig=rig,
        seg_start=reader.read_array(expected=B * d).reshape(B, d),
        seg_end=reader.read_array(expected=B * d).reshape(B, d),
        radii=reader.read_array(expected=B),
        bulge=reader.read_array(expected=B),
    )
    train_sequences = tuple(int(s) for s in reader.read_integers())
    test_sequences = tuple(int(s) for s in reader.read_integers())
    n_train, n_test = (int(v) for v in reader.read_integers(expected=2))

    frames = [_read_frame(reader, d, B) for _ in range(n_train + n_test)]
    if not reader.done():
        raise FormatError(f"{path} has trailing payload after its last frame")

    return Corpus(
        body=body,
        train_frames=frames[:n_train],
        test_frames=frames[n_train:],
        train_sequences=train_sequences,
        test_sequences=test_sequences,
    )


def corpus_poses(frames: Sequence[FrameSamples]) -> List[Pose]:
    return [frame.pose for frame in frames]


def quantized_body(body: CapsuleBody) -> CapsuleBody:
    """The body with every parameter rounded to float32, as the corpus file stores it"""
    return CapsuleBody(
        rig=Rig(body.rig.parents, as_f32_exact(body.rig.rest_offsets)),
        seg_start=as_f32_exact(body.seg_start),
        seg_end=as_f32_exact(body.seg_end),
        radii=as_f32_exact(body.radii),
        bulge=as_f32_exact(body.bulge),
    )


def frame_seed(seed: int, sequence_id: int, frame_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, sequence_id, frame_index])
