"""
Trainer - occupancy and skinning-weight losses with the fresh-sample Adam training loop
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from tools.dataset import build_frame_samples
from tools.kinematics import Pose, PosedBones, forward_kinematics
from tools.neuralnet import AdamState, ParamVector, adam_step
from tools.occmodels import OccupancyModel, save_checkpoint
from tools.synthbody import CapsuleBody
from utils.config import TrainConfig
from utils.errors import (
    ConfigError,
    InvalidInputError,
    NonFiniteGradientError,
    PlainIOError,
    TrainingDivergedError,
    UnsupportedModelError,
)
from utils.logger import setup_logger

logger = setup_logger(__name__)

OWNER_TARGET = 0.5
BCE_CLIP = 1e-7
HISTORY_COLUMNS = ["step", "loss_total", "loss_occ", "loss_weights"]


@dataclass
class BatchFrame:
    """One posed frame of a minibatch: labeled query points and owned surface vertices"""

    posed: PosedBones
    points: np.ndarray
    labels: np.ndarray
    vertices: np.ndarray
    vertex_parts: np.ndarray


class LossTerms(NamedTuple):
    total: float
    occupancy: float
    weights: float


def batch_frame(body: CapsuleBody, samples) -> BatchFrame:
    return BatchFrame(
        posed=forward_kinematics(body.rig, samples.pose),
        points=samples.points,
        labels=samples.labels.astype(np.float64),
        vertices=samples.vertices,
        vertex_parts=samples.vertex_parts,
    )


def loss_occupancy(
    model: OccupancyModel,
    batch: Sequence[BatchFrame],
    kind: str = "l2",
    mode: str = "soft",
    grads: ParamVector | None = None,
    need_grad: bool = True,
) -> Tuple[float, ParamVector | None]:
    """Mean over every batch point of (gt − eval)² (l2) or binary cross-entropy (bce)"""
    total_points = sum(frame.points.shape[0] for frame in batch)
    if total_points == 0:
        raise InvalidInputError("Occupancy loss needs at least one labeled point")
    if kind not in ("l2", "bce"):
        raise InvalidInputError(f"Unknown occupancy loss {kind!r}")
    if need_grad and grads is None:
        grads = model.params.zeros_like()

    loss = 0.0
    for frame in batch:
        values, tape = model.forward(frame.posed, frame.points, mode)
        y = frame.labels
        if kind == "l2":
            residual = values - y
            loss += float(np.sum(residual * residual))
            upstream = 2.0 * residual / total_points
        else:
            v = np.clip(values, BCE_CLIP, 1.0 - BCE_CLIP)
            loss += float(-np.sum(y * np.log(v) + (1.0 - y) * np.log(1.0 - v)))
            upstream = (v - y) / (v * (1.0 - v)) / total_points
        if need_grad:
            model.backward(tape, upstream, grads)
    return loss / total_points, grads


def loss_weights(
    model: OccupancyModel,
    batch: Sequence[BatchFrame],
    grads: ParamVector | None = None,
    need_grad: bool = True,
) -> Tuple[float, ParamVector | None]:
    """(1/V)(1/B) Σ_frames Σ_v Σ_b (Ō_b(v) − I_b(v))², I = 0.5 at the owner part b*, else 0"""
    if not model.part_based:
        raise UnsupportedModelError("The skinning-weight loss needs a part-based model")
    total_vertices = sum(frame.vertices.shape[0] for frame in batch)
    if total_vertices == 0:
        return 0.0, grads
    B = model.config.bone_count
    scale = 1.0 / (total_vertices * B)
    if need_grad and grads is None:
        grads = model.params.zeros_like()

    loss = 0.0
    for frame in batch:
        if frame.vertices.shape[0] == 0:
            continue
        parts, tape = model.part_forward(frame.posed, frame.vertices)
        target = np.where(frame.vertex_parts[None, :] == np.arange(B)[:, None], OWNER_TARGET, 0.0)
        residual = parts - target
        loss += float(np.sum(residual * residual))
        if need_grad:
            model.part_backward(tape, 2.0 * scale * residual, grads)
    return loss * scale, grads


def total_loss(
    model: OccupancyModel,
    batch: Sequence[BatchFrame],
    lambda_weights: float,
    kind: str = "l2",
    mode: str = "soft",
) -> Tuple[LossTerms, ParamVector]:
    """L_occupancy + λ · L_weights; the weight term is skipped for the unstructured model"""
    occ, grads = loss_occupancy(model, batch, kind, mode)
    weights = 0.0
    if model.part_based:
        backprop = lambda_weights > 0
        weights, weight_grads = loss_weights(
            model, batch, model.params.zeros_like() if backprop else None, need_grad=backprop
        )
        if backprop:
            grads.data += lambda_weights * weight_grads.data
    else:
        lambda_weights = 0.0
    return LossTerms(occ + lambda_weights * weights, occ, weights), grads


def split_counts(total: int, parts: int, from_end: bool = False) -> List[int]:
    base, extra = divmod(total, parts)
    if from_end:
        return [base + (1 if j >= parts - extra else 0) for j in range(parts)]
    return [base + (1 if j < extra else 0) for j in range(parts)]


@dataclass
class TrainingResult:
    model: OccupancyModel
    history: pd.DataFrame
    skipped_steps: int = 0


class Trainer:
    """Per step: batch_frames training poses, fresh oracle samples, one Adam step"""

    def __init__(
        self,
        model: OccupancyModel,
        body: CapsuleBody,
        poses: Sequence[Pose],
        config: TrainConfig,
        checkpoint_dir: str | Path | None = None,
        progress: bool = True,
    ):
        if not poses:
            raise InvalidInputError("Training needs at least one pose")
        if model.config.dim != body.dim or model.config.bone_count != body.bone_count:
            raise InvalidInputError(
                f"Model is {model.config.bone_count} bones in {model.config.dim}D, "
                f"body is {body.bone_count} bones in {body.dim}D"
            )
        if config.points_uniform + config.points_surface < config.batch_frames:
            raise ConfigError("Need at least one training point per batch frame")

        self.model = model
        self.body = body
        self.poses = list(poses)
        self.config = config
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.progress = progress
        self.lambda_weights = config.lambda_weights if model.part_based else 0.0
        self.adam = AdamState.zeros(model.params.size, learning_rate=config.learning_rate)

        if not model.part_based and config.lambda_weights > 0:
            logger.info("Unstructured model: skinning-weight term disabled")

    def sample_batch(self, step: int) -> List[BatchFrame]:
        cfg = self.config
        F = cfg.batch_frames
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step]))
        chosen = rng.choice(len(self.poses), size=F, replace=len(self.poses) < F)
        uniform = split_counts(cfg.points_uniform, F)
        surface = split_counts(cfg.points_surface, F, from_end=True)
        vertices = split_counts(cfg.vertices if self.model.part_based else 0, F)

        batch = []
        for j, index in enumerate(chosen):
            samples = build_frame_samples(
                self.body,
                self.poses[int(index)],
                uniform[j],
                surface[j],
                vertices[j],
                sigma_frac=cfg.sigma_frac,
                seed=np.random.SeedSequence([cfg.seed, step, j]),
            )
            batch.append(batch_frame(self.body, samples))
        return batch

    def step(self, step: int) -> LossTerms:
        cfg = self.config
        batch = self.sample_batch(step)
        terms, grads = total_loss(self.model, batch, self.lambda_weights, cfg.occupancy_loss, cfg.blend)
        if not np.isfinite(terms.total):
            raise TrainingDivergedError(
                f"Non-finite loss at step {step}: occupancy={terms.occupancy}, weights={terms.weights}, "
                f"|params|max={np.max(np.abs(self.model.params.data)):.3g}"
            )

        adam_step(self.adam, self.model.params, grads)
        return terms

    def run(self) -> TrainingResult:
        cfg = self.config
        logger.info(
            f"Training {self.model.kind.upper()} ({self.model.parameter_count} parameters) for "
            f"{cfg.iterations} steps on {len(self.poses)} poses"
        )
        window: List[LossTerms] = []
        rows = []
        skipped = 0

        for step in tqdm(range(1, cfg.iterations + 1), desc=f"train {self.model.kind}", disable=not self.progress):
            try:
                window.append(self.step(step))
            except NonFiniteGradientError as e:
                skipped += 1
                logger.warning(f"Step {step} skipped: {str(e)}")

            if step % cfg.history_every == 0:
                if window:
                    means = np.mean(np.array(window), axis=0)
                    rows.append([step, *means])
                    logger.debug(f"step {step}: loss={means[0]:.6g} occ={means[1]:.6g} weights={means[2]:.6g}")
                else:
                    rows.append([step, np.nan, np.nan, np.nan])
                window = []

            if self.checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(self.model, self.checkpoint_dir / f"checkpoint_{step:06d}.nasaw")

        history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
        history["step"] = history["step"].astype(int)
        if skipped:
            logger.warning(f"{skipped} of {cfg.iterations} steps skipped on non-finite gradients")
        return TrainingResult(self.model, history, skipped)


def train(
    model: OccupancyModel,
    body: CapsuleBody,
    poses: Sequence[Pose],
    config: TrainConfig,
    progress: bool = False,
    checkpoint_dir: str | Path | None = None,
) -> TrainingResult:
    return Trainer(model, body, poses, config, checkpoint_dir=checkpoint_dir, progress=progress).run()


def write_history_csv(history: pd.DataFrame, path: str | Path) -> None:
    try:
        history.to_csv(path, index=False, float_format="%.10g")
    except OSError as e:
        raise PlainIOError(f"Cannot write loss history to {path}: {str(e)}") from e
