"""
Tracker - fits bone frames to per-frame point clouds with a Gaussian-smoothed occupancy
energy and a skeletal pose prior, optimizing inverse-frame updates with Adam
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from tools.dataset import FrameSamples, frame_seed
from tools.evaluation import chamfer_l1, extract_surface_points, fscore, iou, predict_inside
from tools.kinematics import (
    PosedBones,
    Rig,
    orthonormalize,
    rotation_from_two_vectors,
    rotation_from_two_vectors_backward,
)
from tools.neuralnet import AdamState, ParamSpec, ParamVector, adam_step
from tools.synthbody import CapsuleBody, bbox_diagonal, surface_samples
from utils.config import EvalConfig, TrackConfig
from utils.errors import DegenerateRotationError, InvalidInputError, NonFiniteGradientError, PlainIOError
from utils.logger import setup_logger

logger = setup_logger(__name__)

TARGET_LEVEL = 0.5
REPORT_COLUMNS = ["frame", "E_fit", "E_prior", "joint_error", "mIoU", "chamfer", "fscore"]


@dataclass
class TrackState:
    """Inverse bone frames C_b = B_b^-1; bone frames are never numerically inverted"""

    inv_rotations: np.ndarray
    inv_translations: np.ndarray

    @classmethod
    def from_posed(cls, posed: PosedBones) -> "TrackState":
        return cls(posed.inv_rotations.copy(), posed.inv_translations.copy())

    def posed(self) -> PosedBones:
        return PosedBones.from_inverse(self.inv_rotations, self.inv_translations)

    def copy(self) -> "TrackState":
        return TrackState(self.inv_rotations.copy(), self.inv_translations.copy())

    def bone_origins(self) -> np.ndarray:
        """t_b = -R_Cᵀ t_C for every bone, (B, d)"""
        return -np.einsum("bji,bj->bi", self.inv_rotations, self.inv_translations)

    def orthonormality_error(self) -> float:
        d = self.inv_rotations.shape[1]
        gram = np.einsum("bji,bjk->bik", self.inv_rotations, self.inv_rotations)
        return float(np.max(np.abs(gram - np.eye(d))))


class EnergyGrads(NamedTuple):
    value: float
    inv_rotations: np.ndarray
    inv_translations: np.ndarray


class FrameTrace(NamedTuple):
    energy_fit: float
    energy_prior: float
    failed: bool


# --- smoothed occupancy --------------------------------------------------------------


def perturbations(count: int, dim: int, samples: int, seed, antithetic: bool = True) -> np.ndarray:
    """Standard-normal offsets (samples, count, dim); antithetic pairs share |ε|"""
    rng = np.random.default_rng(seed)
    if not antithetic or samples == 1:
        return rng.standard_normal((samples, count, dim))
    half = samples // 2
    eps = rng.standard_normal((half, count, dim))
    out = [eps, -eps]
    if samples % 2:
        out.append(rng.standard_normal((1, count, dim)))
    return np.concatenate(out, axis=0)


def _sample_locations(cloud: np.ndarray, sigma: float, samples: int, seed, antithetic: bool) -> np.ndarray:
    if sigma == 0.0:
        return np.broadcast_to(cloud, (samples,) + cloud.shape)
    return cloud[None] + sigma * perturbations(cloud.shape[0], cloud.shape[1], samples, seed, antithetic)


def smoothed_occupancy(
    model,
    posed: PosedBones,
    points,
    sigma: float,
    samples: int,
    seed=0,
    antithetic: bool = True,
) -> np.ndarray:
    """Monte-Carlo estimate of E_{s~N(x, σ²I)}[O(s|θ)] for every x"""
    if samples < 1:
        raise InvalidInputError(f"Need at least one Monte-Carlo sample, got {samples}")
    if sigma < 0:
        raise InvalidInputError(f"Kernel width must be non-negative, got {sigma}")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    locations = _sample_locations(points, sigma, samples, seed, antithetic)
    values = model.eval(posed, locations.reshape(-1, points.shape[1]), mode="soft")
    return values.reshape(samples, points.shape[0]).mean(axis=0)


def fitting_energy_and_grad(
    model,
    state: TrackState,
    cloud: np.ndarray,
    sigma: float,
    samples: int,
    seed=0,
    antithetic: bool = True,
) -> EnergyGrads:
    """Σ_x (smoothed(x) − 0.5)² and its gradient w.r.t. the inverse frames at fixed perturbations"""
    B, d = state.inv_translations.shape
    if cloud.shape[0] == 0:
        return EnergyGrads(0.0, np.zeros((B, d, d)), np.zeros((B, d)))

    locations = _sample_locations(cloud, sigma, samples, seed, antithetic)
    values, tape = model.forward(state.posed(), locations.reshape(-1, d), mode="soft")
    smoothed = values.reshape(samples, -1).mean(axis=0)
    residual = smoothed - TARGET_LEVEL
    energy = float(np.sum(residual * residual))

    upstream = np.broadcast_to(2.0 * residual / samples, (samples, residual.size)).reshape(-1)
    grads = model.backward(tape, upstream)
    return EnergyGrads(energy, grads.inv_rotations, grads.inv_translations)


def fitting_energy(model, state: TrackState, cloud, config: TrackConfig, sigma: float, seed=0) -> float:
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, state.inv_translations.shape[1])
    samples, sigma = _kernel(config, sigma)
    if cloud.shape[0] == 0:
        return 0.0
    locations = _sample_locations(cloud, sigma, samples, seed, config.antithetic)
    values = model.eval(state.posed(), locations.reshape(-1, cloud.shape[1]), mode="soft")
    residual = values.reshape(samples, -1).mean(axis=0) - TARGET_LEVEL
    return float(np.sum(residual * residual))


def _kernel(config: TrackConfig, sigma: float) -> Tuple[int, float]:
    """(S, σ) actually used; smoothing off means one sample at the data point"""
    if not config.smoothing:
        return 1, 0.0
    return config.samples, sigma


# --- pose prior ----------------------------------------------------------------------


def prior_energy_and_grad(state: TrackState, rig: Rig) -> EnergyGrads:
    """Σ over rig edges (p, c) of ‖offset_c − C_p t_c‖², t_c the origin of bone c"""
    Cr, Ct = state.inv_rotations, state.inv_translations
    d_rot = np.zeros_like(Cr)
    d_trans = np.zeros_like(Ct)
    origins = state.bone_origins()
    energy = 0.0
    for parent, child in rig.edges:
        t_c = origins[child]
        r = rig.rest_offsets[child] - (Cr[parent] @ t_c + Ct[parent])
        energy += float(r @ r)
        g = 2.0 * r
        d_rot[parent] -= np.outer(g, t_c)
        d_trans[parent] -= g
        d_t = -Cr[parent].T @ g
        d_rot[child] -= np.outer(Ct[child], d_t)
        d_trans[child] -= Cr[child] @ d_t
    return EnergyGrads(energy, d_rot, d_trans)


def prior_energy(state: TrackState, rig: Rig) -> float:
    return prior_energy_and_grad(state, rig).value


# --- frame updates -------------------------------------------------------------------


def update_layout(bone_count: int, dim: int) -> List[ParamSpec]:
    return [
        ParamSpec("u", (bone_count, dim)),
        ParamSpec("v", (bone_count, dim)),
        ParamSpec("delta", (bone_count, dim)),
    ]


def identity_update(bone_count: int, dim: int) -> ParamVector:
    """u = e1, v = e2, δ = 0 for every bone"""
    update = ParamVector(update_layout(bone_count, dim))
    reset_update(update)
    return update


def reset_update(update: ParamVector) -> None:
    update.data[...] = 0.0
    update.view("u")[:, 0] = 1.0
    update.view("v")[:, 1] = 1.0
    update.bump()


def apply_update(state: TrackState, update: ParamVector) -> TrackState:
    """ΔC_b · C_b with ΔC_b = (R(u_b, v_b), δ_b)"""
    u, v, delta = update.view("u"), update.view("v"), update.view("delta")
    rotations = np.stack([rotation_from_two_vectors(u[b], v[b]) for b in range(u.shape[0])])
    return TrackState(
        np.einsum("bij,bjk->bik", rotations, state.inv_rotations),
        np.einsum("bij,bj->bi", rotations, state.inv_translations) + delta,
    )


def update_gradient(state: TrackState, update: ParamVector, grad_rot: np.ndarray, grad_trans: np.ndarray) -> ParamVector:
    """Chain dE/dC' (C' = ΔC·C) back to the update parameters (u, v, δ)"""
    grads = update.zeros_like()
    u, v = update.view("u"), update.view("v")
    d_delta_rot = np.einsum("bij,bkj->bik", grad_rot, state.inv_rotations) + np.einsum(
        "bi,bj->bij", grad_trans, state.inv_translations
    )
    for b in range(u.shape[0]):
        g_u, g_v = rotation_from_two_vectors_backward(u[b], v[b], d_delta_rot[b])
        grads.view("u")[b] = g_u
        grads.view("v")[b] = g_v
    grads.view("delta")[...] = grad_trans
    return grads


def commit(state: TrackState, update: ParamVector) -> TrackState:
    """Left-compose the update and re-orthonormalize each rotation factor"""
    moved = apply_update(state, update)
    moved.inv_rotations = np.stack([orthonormalize(r) for r in moved.inv_rotations])
    return moved


def total_energy_and_grad(model, rig: Rig, state: TrackState, cloud, config: TrackConfig, sigma: float, seed):
    samples, sigma = _kernel(config, sigma)
    fit = fitting_energy_and_grad(model, state, cloud, sigma, samples, seed, config.antithetic)
    prior = prior_energy_and_grad(state, rig)
    w = config.w_prior
    return (
        fit.value,
        prior.value,
        fit.inv_rotations + w * prior.inv_rotations,
        fit.inv_translations + w * prior.inv_translations,
    )


def track_frame(
    model,
    rig: Rig,
    state_prev: TrackState,
    cloud,
    config: TrackConfig,
    sigma: float,
    frame_index: int = 0,
) -> Tuple[TrackState, FrameTrace]:
    """Adam on per-bone (u, v, δ) about the current frames, committing and re-centering every step"""
    B, d = state_prev.inv_translations.shape
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, d)
    state = state_prev.copy()
    update = identity_update(B, d)
    adam = AdamState.zeros(update.size, learning_rate=config.learning_rate)

    try:
        for it in range(config.steps_per_frame):
            seed = np.random.SeedSequence([config.seed, frame_index, it])
            e_fit, e_prior, g_rot, g_trans = total_energy_and_grad(model, rig, state, cloud, config, sigma, seed)
            if not np.isfinite(e_fit + config.w_prior * e_prior):
                raise FloatingPointError(f"energy became non-finite at iteration {it}")
            adam_step(adam, update, update_gradient(state, update, g_rot, g_trans))
            state = commit(state, update)
            reset_update(update)

        final_seed = np.random.SeedSequence([config.seed, frame_index, config.steps_per_frame])
        e_fit, e_prior, _, _ = total_energy_and_grad(model, rig, state, cloud, config, sigma, final_seed)
        if not np.isfinite(e_fit + config.w_prior * e_prior):
            raise FloatingPointError("final energy is non-finite")
    except (FloatingPointError, NonFiniteGradientError, DegenerateRotationError, InvalidInputError) as e:
        logger.warning(f"Tracking frame {frame_index} failed ({str(e)}); keeping the previous state")
        return state_prev.copy(), FrameTrace(float("nan"), float("nan"), True)

    return state, FrameTrace(e_fit, e_prior, False)


# --- sequences -----------------------------------------------------------------------


def joint_error(state: TrackState, truth: PosedBones, diagonal: float) -> float:
    """Mean distance between recovered and true bone origins, in body diagonals"""
    distances = np.linalg.norm(state.bone_origins() - truth.translations, axis=1)
    return float(distances.mean() / diagonal)


@dataclass
class TrackingResult:
    states: List[TrackState]
    traces: List[FrameTrace]
    report: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=REPORT_COLUMNS))

    @property
    def failed_frames(self) -> List[int]:
        return [i for i, t in enumerate(self.traces) if t.failed]

    def write_csv(self, path) -> None:
        try:
            self.report.to_csv(path, index=False, float_format="%.10g")
        except OSError as e:
            raise PlainIOError(f"Cannot write tracking report to {path}: {str(e)}") from e


def frame_metrics(
    model,
    body: CapsuleBody,
    state: TrackState,
    truth: PosedBones,
    samples: FrameSamples | None,
    eval_config: EvalConfig,
) -> Tuple[float, float, float]:
    """(IoU, Chamfer in body diagonals, F-score) of the model at the recovered pose"""
    estimate = state.posed()
    miou = float("nan")
    if samples is not None:
        miou = iou(predict_inside(model, estimate, samples.points), samples.labels.astype(bool))
        seed = frame_seed(eval_config.seed, samples.sequence_id, samples.frame_index)
    else:
        seed = eval_config.seed

    extraction = extract_surface_points(model, body, estimate, eval_config.grid_res)
    reference = surface_samples(body, truth, eval_config.reference_points, seed).points
    diag = bbox_diagonal(body, truth)
    chamfer = float("nan") if extraction.empty else chamfer_l1(extraction.points, reference) / diag
    score = fscore(extraction.points, reference, (eval_config.fscore_fraction * diag) ** 2)
    return miou, chamfer, score


def track_sequence(
    model,
    body: CapsuleBody,
    initial: PosedBones,
    clouds: Sequence[np.ndarray],
    config: TrackConfig,
    truths: Sequence[PosedBones] | None = None,
    eval_frames: Sequence[FrameSamples] | None = None,
    eval_config: EvalConfig | None = None,
    progress: bool = False,
) -> TrackingResult:
    """Frame 0 is the given initial state; each later frame starts from the previous solution"""
    if not clouds:
        raise InvalidInputError("Tracking needs at least one point cloud")
    if truths is not None and len(truths) != len(clouds):
        raise InvalidInputError(f"{len(truths)} ground-truth poses for {len(clouds)} clouds")

    rig = body.rig
    diagonal = bbox_diagonal(body, rig.rest_bones())
    sigma = config.sigma_frac * diagonal
    eval_config = eval_config or EvalConfig()

    state = TrackState.from_posed(initial)
    e_fit = fitting_energy(model, state, clouds[0], config, sigma, np.random.SeedSequence([config.seed, 0]))
    states = [state]
    traces = [FrameTrace(e_fit, prior_energy(state, rig), False)]

    for t in tqdm(range(1, len(clouds)), desc="track", disable=not progress):
        state, trace = track_frame(model, rig, state, clouds[t], config, sigma, frame_index=t)
        states.append(state)
        traces.append(trace)
        logger.debug(f"frame {t}: E_fit={trace.energy_fit:.6g} E_prior={trace.energy_prior:.6g}")

    rows = []
    for t, (state, trace) in enumerate(zip(states, traces)):
        row = {"frame": t, "E_fit": trace.energy_fit, "E_prior": trace.energy_prior}
        if truths is not None:
            row["joint_error"] = joint_error(state, truths[t], diagonal)
            samples = eval_frames[t] if eval_frames is not None else None
            row["mIoU"], row["chamfer"], row["fscore"] = frame_metrics(
                model, body, state, truths[t], samples, eval_config
            )
        else:
            row.update({"joint_error": np.nan, "mIoU": np.nan, "chamfer": np.nan, "fscore": np.nan})
        rows.append(row)

    result = TrackingResult(states, traces, pd.DataFrame(rows, columns=REPORT_COLUMNS))
    if result.failed_frames:
        logger.warning(f"Tracking failed on frames {result.failed_frames}")
    return result
