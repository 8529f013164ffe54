"""
Evaluation Tool - mIoU, level-set point extraction, Chamfer-L1, F-score and query throughput
"""

from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence

import numpy as np
import pandas as pd

from tools.dataset import FrameSamples, frame_seed
from tools.kinematics import PosedBones, Rig, forward_kinematics
from tools.synthbody import BBOX_SCALE, CapsuleBody, bbox_diagonal, posed_bbox, surface_samples
from utils.errors import InvalidInputError, PlainIOError, UndefinedMetricError, UnsupportedModelError
from utils.logger import setup_logger

logger = setup_logger(__name__)

LEVEL = 0.5
MIN_GRID_RES = 8
BRUTE_FORCE_LIMIT = 2000
QUERY_CHUNK = 65536
FSCORE_FRACTION = 0.01


# --- volumetric ----------------------------------------------------------------------


def iou(predicted, truth) -> float:
    """|pred ∧ gt| / |pred ∨ gt|; an empty union counts as a perfect match"""
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise InvalidInputError(f"Label shapes differ: {predicted.shape} vs {truth.shape}")
    union = np.count_nonzero(predicted | truth)
    if union == 0:
        return 1.0
    return np.count_nonzero(predicted & truth) / union


def predict_inside(model, posed: PosedBones, points) -> np.ndarray:
    return model.eval(posed, points, mode="hard") > LEVEL


def frame_iou(model, rig: Rig, frame: FrameSamples) -> float:
    posed = forward_kinematics(rig, frame.pose)
    return iou(predict_inside(model, posed, frame.points), frame.labels.astype(bool))


def miou(model, rig: Rig, frames: Sequence[FrameSamples]) -> float:
    if not frames:
        raise UndefinedMetricError("mIoU needs at least one frame")
    return float(np.mean([frame_iou(model, rig, frame) for frame in frames]))


# --- level-set extraction -----------------------------------------------------------


class SurfaceExtraction(NamedTuple):
    points: np.ndarray
    empty: bool
    cell_size: np.ndarray


def _evaluate_chunked(model, posed: PosedBones, points: np.ndarray) -> np.ndarray:
    out = np.empty(points.shape[0])
    for start in range(0, points.shape[0], QUERY_CHUNK):
        chunk = points[start : start + QUERY_CHUNK]
        out[start : start + chunk.shape[0]] = model.eval(posed, chunk, mode="hard")
    return out


def extract_surface_points(model, body: CapsuleBody, posed: PosedBones, grid_res: int = 64) -> SurfaceExtraction:
    """Linear-interpolation crossings of the 0.5 level on every grid edge over the 110% bbox"""
    if grid_res < MIN_GRID_RES:
        raise InvalidInputError(f"grid_res must be at least {MIN_GRID_RES}, got {grid_res}")

    d = body.dim
    lo, hi = posed_bbox(body, posed, scale=BBOX_SCALE)
    axes = [np.linspace(lo[i], hi[i], grid_res) for i in range(d)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    values = _evaluate_chunked(model, posed, mesh.reshape(-1, d)).reshape(mesh.shape[:-1])

    crossings = []
    for axis in range(d):
        head = [slice(None)] * d
        tail = [slice(None)] * d
        head[axis] = slice(0, -1)
        tail[axis] = slice(1, None)
        v0, v1 = values[tuple(head)], values[tuple(tail)]
        p0, p1 = mesh[tuple(head)], mesh[tuple(tail)]
        straddle = (v0 < LEVEL) != (v1 < LEVEL)
        if not np.any(straddle):
            continue
        a, b = v0[straddle], v1[straddle]
        t = np.clip((LEVEL - a) / (b - a), 0.0, 1.0)[:, None]
        crossings.append(p0[straddle] * (1.0 - t) + p1[straddle] * t)

    cell = (hi - lo) / (grid_res - 1)
    if not crossings:
        logger.warning(f"No 0.5 level-set crossings on a {grid_res}^{d} grid; model output is degenerate")
        return SurfaceExtraction(np.zeros((0, d)), True, cell)
    return SurfaceExtraction(np.concatenate(crossings, axis=0), False, cell)


# --- nearest neighbours -------------------------------------------------------------


@lru_cache(maxsize=None)
def _ring_offsets(ring: int, dim: int) -> np.ndarray:
    offsets = [
        o for o in itertools.product(range(-ring, ring + 1), repeat=dim) if max(abs(c) for c in o) == ring
    ]
    return np.array(offsets, dtype=np.int64).reshape(-1, dim)


class SpatialHash:
    """Uniform-grid bucketing of a point set for exact nearest-neighbour queries"""

    def __init__(self, points: np.ndarray, cell_size: float | None = None):
        self.points = np.asarray(points, dtype=np.float64)
        n, d = self.points.shape
        self.origin = self.points.min(axis=0)
        extent = max(float(np.max(self.points.max(axis=0) - self.origin)), 1e-12)
        self.cell_size = cell_size or extent / max(n ** (1.0 / d), 1.0)

        keys = np.floor((self.points - self.origin) / self.cell_size).astype(np.int64)
        self.key_min, self.key_max = keys.min(axis=0), keys.max(axis=0)
        unique, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(unique.shape[0] + 1))
        self.cells: Dict[tuple, np.ndarray] = {
            tuple(int(v) for v in key): order[bounds[i] : bounds[i + 1]] for i, key in enumerate(unique)
        }

    def nearest_sq(self, query: np.ndarray) -> float:
        d = self.points.shape[1]
        cell = np.floor((query - self.origin) / self.cell_size).astype(np.int64)
        last_ring = int(np.max(np.maximum(np.abs(cell - self.key_min), np.abs(cell - self.key_max))))
        best = np.inf
        ring = 0
        while True:
            for offset in _ring_offsets(ring, d):
                members = self.cells.get(tuple(int(v) for v in cell + offset))
                if members is None:
                    continue
                diff = self.points[members] - query
                best = min(best, float(np.min(np.einsum("ij,ij->i", diff, diff))))
            if best <= (ring * self.cell_size) ** 2 or ring >= last_ring:
                return best
            ring += 1


def nearest_sq_distances(queries, reference) -> np.ndarray:
    """Exact squared distance from every query to its nearest reference point"""
    queries = np.asarray(queries, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape[0] < BRUTE_FORCE_LIMIT or queries.shape[0] < BRUTE_FORCE_LIMIT:
        out = np.empty(queries.shape[0])
        step = max(1, 1_000_000 // max(reference.shape[0], 1))
        for start in range(0, queries.shape[0], step):
            diff = queries[start : start + step, None, :] - reference[None, :, :]
            out[start : start + step] = np.einsum("qnd,qnd->qn", diff, diff).min(axis=1)
        return out
    index = SpatialHash(reference)
    return np.array([index.nearest_sq(q) for q in queries])


def chamfer_l1(a, b) -> float:
    """0.5 · mean_a min_b ‖a − b‖ + 0.5 · mean_b min_a ‖a − b‖"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise UndefinedMetricError("Chamfer distance is undefined for an empty point set")
    a_to_b = np.sqrt(nearest_sq_distances(a, b))
    b_to_a = np.sqrt(nearest_sq_distances(b, a))
    return float(0.5 * a_to_b.mean() + 0.5 * b_to_a.mean())


def fscore(predicted, truth, threshold: float) -> float:
    """Harmonic mean (percent) of precision and recall under a squared-distance threshold"""
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape[0] == 0:
        raise UndefinedMetricError("F-score needs a non-empty reference set")
    if predicted.shape[0] == 0:
        return 0.0
    precision = 100.0 * np.mean(nearest_sq_distances(predicted, truth) <= threshold)
    recall = 100.0 * np.mean(nearest_sq_distances(truth, predicted) <= threshold)
    if precision + recall == 0:
        return 0.0
    return float(2.0 * precision * recall / (precision + recall))


# --- reports ------------------------------------------------------------------------


@dataclass
class FrameMetrics:
    sequence_id: int
    frame_index: int
    iou: float
    chamfer_l1: float
    fscore: float
    surface_points: int


@dataclass
class MetricsReport:
    model: str
    frames: List[FrameMetrics] = field(default_factory=list)

    @property
    def miou(self) -> float:
        return float(np.mean([f.iou for f in self.frames]))

    @property
    def chamfer_l1(self) -> float:
        return float(np.nanmean([f.chamfer_l1 for f in self.frames]))

    @property
    def fscore(self) -> float:
        return float(np.mean([f.fscore for f in self.frames]))

    def summary(self) -> Dict[str, float]:
        return {"model": self.model, "miou": self.miou, "chamfer_l1": self.chamfer_l1, "fscore": self.fscore}

    def to_frame(self) -> pd.DataFrame:
        """Per-frame rows followed by one aggregate row"""
        rows = [{"model": self.model, "row": "frame", **asdict(f)} for f in self.frames]
        rows.append(
            {
                "model": self.model,
                "row": "mean",
                "sequence_id": -1,
                "frame_index": -1,
                "iou": self.miou,
                "chamfer_l1": self.chamfer_l1,
                "fscore": self.fscore,
                "surface_points": int(np.sum([f.surface_points for f in self.frames])),
            }
        )
        return pd.DataFrame(rows)

    def write_csv(self, path: str | Path) -> None:
        try:
            self.to_frame().to_csv(path, index=False, float_format="%.10g")
        except OSError as e:
            raise PlainIOError(f"Cannot write metrics to {path}: {str(e)}") from e


def evaluate_frame(
    model,
    body: CapsuleBody,
    frame: FrameSamples,
    grid_res: int = 64,
    reference_count: int = 2000,
    seed: int = 0,
    fscore_fraction: float = FSCORE_FRACTION,
) -> FrameMetrics:
    """IoU on the stored samples; Chamfer (in body diagonals) and F-score on the level set"""
    posed = forward_kinematics(body.rig, frame.pose)
    frame_iou_value = iou(predict_inside(model, posed, frame.points), frame.labels.astype(bool))

    extraction = extract_surface_points(model, body, posed, grid_res)
    reference = surface_samples(
        body, posed, reference_count, frame_seed(seed, frame.sequence_id, frame.frame_index)
    ).points
    diag = bbox_diagonal(body, posed)

    if extraction.empty:
        chamfer = float("nan")
    else:
        chamfer = chamfer_l1(extraction.points, reference) / diag
    score = fscore(extraction.points, reference, (fscore_fraction * diag) ** 2)

    return FrameMetrics(
        sequence_id=frame.sequence_id,
        frame_index=frame.frame_index,
        iou=frame_iou_value,
        chamfer_l1=chamfer,
        fscore=score,
        surface_points=int(extraction.points.shape[0]),
    )


def evaluate_model(model, body: CapsuleBody, frames: Sequence[FrameSamples], name: str = "", **kwargs) -> MetricsReport:
    if not frames:
        raise UndefinedMetricError("Evaluation needs at least one frame")
    report = MetricsReport(name or model.kind)
    for frame in frames:
        report.frames.append(evaluate_frame(model, body, frame, **kwargs))
    return report


# --- model diagnostics --------------------------------------------------------------


def foreign_part_response(model, rig: Rig, frames: Sequence[FrameSamples]) -> np.ndarray:
    """Per part, the mean response at vertices owned by a different part, (B,)"""
    if not model.part_based:
        raise UnsupportedModelError("Foreign-part response needs a part-based model")
    B = rig.bone_count
    totals, counts = np.zeros(B), np.zeros(B)
    for frame in frames:
        if frame.vertices.shape[0] == 0:
            continue
        posed = forward_kinematics(rig, frame.pose)
        parts, _ = model.part_forward(posed, frame.vertices)
        foreign = frame.vertex_parts[None, :] != np.arange(B)[:, None]
        totals += np.where(foreign, parts, 0.0).sum(axis=1)
        counts += foreign.sum(axis=1)
    return np.divide(totals, counts, out=np.zeros(B), where=counts > 0)


def query_throughput(model, posed_frames: Sequence[PosedBones], query_count: int, seed: int = 0) -> Dict[str, float]:
    """Time query_count single-pose queries cycling through poses with no per-pose rebuild"""
    if query_count < 1 or not posed_frames:
        raise InvalidInputError("Throughput needs at least one query and one pose")
    rng = np.random.default_rng(seed)
    d = posed_frames[0].dim
    per_pose = int(np.ceil(query_count / len(posed_frames)))
    batches = []
    remaining = query_count
    for posed in posed_frames:
        n = min(per_pose, remaining)
        if n <= 0:
            break
        center = posed.translations.mean(axis=0)
        batches.append((posed, center + rng.uniform(-1.0, 1.0, size=(n, d))))
        remaining -= n

    start = time.perf_counter()
    for posed, points in batches:
        model.eval(posed, points, mode="hard")
    seconds = time.perf_counter() - start

    return {
        "queries": float(query_count),
        "seconds": seconds,
        "queries_per_second": query_count / seconds if seconds > 0 else float("inf"),
        "ms_per_query": 1000.0 * seconds / query_count,
    }
