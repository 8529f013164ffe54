"""
End-to-end runs on desk-scale synthetic corpora: model ordering, ablations, tracking recovery, query cost
"""

from dataclasses import dataclass, replace
from typing import List

import numpy as np
import pytest

from runners.tracker import TrackState, track_sequence
from runners.trainer import train
from tools.dataset import FrameSamples, build_frame_samples, build_sequence, corpus_poses, quantized_body, split_sequences
from tools.evaluation import evaluate_model, foreign_part_response, miou, query_throughput
from tools.kinematics import Pose, RigidTransform, forward_kinematics
from tools.occmodels import ModelConfig, build_model
from tools.synthbody import CapsuleBody, chain_body, generate_animation, random_animation_spec, surface_samples
from utils.config import TrackConfig, TrainConfig

pytestmark = pytest.mark.slow

SEED = 0
# 5000 steps with the default batch; a larger step than the 1e-4 default to converge at this length
TRAIN = TrainConfig(learning_rate=1e-3)
SHORT_TRAIN = replace(TRAIN, iterations=2000)


@dataclass
class Setting:
    body: CapsuleBody
    train_frames: List[FrameSamples]
    test_frames: List[FrameSamples]


def corpus_frames(body, sequence_ids, n_uniform, n_surface, n_vertices) -> List[FrameSamples]:
    frames = []
    for sequence_id in sequence_ids:
        frames.extend(build_sequence(body, sequence_id, 50, n_uniform, n_surface, n_vertices, seed=SEED))
    return frames


def build_setting(bulge: float) -> Setting:
    """B=5 chain, 8 training and 2 held-out sequences of 50 frames"""
    body = quantized_body(chain_body(dim=2, bone_count=5, bulge=bulge))
    train_ids, test_ids = split_sequences(10, 2, seed=SEED)
    return Setting(
        body,
        corpus_frames(body, train_ids, 200, 200, 64),
        corpus_frames(body, test_ids, 1000, 1000, 256),
    )


def fit(kind, body, poses, config=TRAIN, **model_overrides):
    model = build_model(ModelConfig(kind=kind, dim=body.dim, bone_count=body.bone_count, **model_overrides), seed=SEED)
    return train(model, body, poses, config)


def clouds_for(body, truths, points=500):
    return [surface_samples(body, posed, points, seed=t).points for t, posed in enumerate(truths)]


def held_out_sequence(body, frames, seed, max_velocity):
    spec = random_animation_spec(body, frames, seed=seed, max_velocity=max_velocity)
    return [forward_kinematics(body.rig, pose) for pose in generate_animation(body, spec)]


def mean_joint_error(model, body, truths, config=TrackConfig()):
    result = track_sequence(model, body, truths[0], clouds_for(body, truths), config, truths=truths)
    assert result.failed_frames == []
    return float(result.report["joint_error"].mean())


@pytest.fixture(scope="module")
def deformable():
    return build_setting(bulge=0.3)


@pytest.fixture(scope="module")
def deformable_runs(deformable):
    poses = corpus_poses(deformable.train_frames)
    return {kind: fit(kind, deformable.body, poses) for kind in ("u", "r", "d")}


@pytest.fixture(scope="module")
def two_bone():
    """Rigid 2-bone chain and an R model trained on its random poses"""
    body = quantized_body(chain_body(dim=2, bone_count=2, bulge=0.0))
    poses = generate_animation(body, random_animation_spec(body, 200, seed=4))
    return body, fit("r", body, poses, SHORT_TRAIN).model


def child_angle(state: TrackState) -> float:
    posed = state.posed()
    relative = posed.rotations[0].T @ posed.rotations[1]
    return float(np.arctan2(relative[1, 0], relative[0, 0]))


# --- reconstruction ----------------------------------------------------------------


def test_deformable_beats_rigid_beats_unstructured(deformable, deformable_runs):
    scores = {
        kind: evaluate_model(run.model, deformable.body, deformable.test_frames, grid_res=64, reference_count=2000)
        for kind, run in deformable_runs.items()
    }
    u, r, d = scores["u"], scores["r"], scores["d"]
    assert d.miou >= r.miou + 0.02
    assert r.miou >= u.miou + 0.02
    assert d.fscore >= r.fscore + 0.02
    assert r.fscore >= u.fscore + 0.02


def test_training_halves_the_loss(deformable_runs):
    for run in deformable_runs.values():
        losses = run.history["loss_total"].to_numpy()
        assert losses[-1] <= 0.5 * losses[0]


def test_rigid_model_generalizes_on_the_rigid_corpus():
    setting = build_setting(bulge=0.0)
    model = fit("r", setting.body, corpus_poses(setting.train_frames)).model
    test_score = miou(model, setting.body.rig, setting.test_frames)
    train_score = miou(model, setting.body.rig, setting.train_frames[::5])
    assert test_score >= 0.93
    assert abs(train_score - test_score) <= 0.02


def test_projection_does_not_hurt(deformable, deformable_runs):
    without = fit("d", deformable.body, corpus_poses(deformable.train_frames), use_projection=False).model
    rig = deformable.body.rig
    assert miou(without, rig, deformable.test_frames) <= miou(deformable_runs["d"].model, rig, deformable.test_frames)


def test_weight_loss_prevents_part_collapse(deformable, deformable_runs):
    rig = deformable.body.rig
    no_weights = fit("r", deformable.body, corpus_poses(deformable.train_frames), replace(TRAIN, lambda_weights=0.0))
    assert foreign_part_response(no_weights.model, rig, deformable.test_frames).max() > 0.3
    assert foreign_part_response(deformable_runs["r"].model, rig, deformable.test_frames).max() <= 0.2


def test_single_part_rigid_model_fits():
    body = quantized_body(chain_body(dim=2, bone_count=1))
    poses = generate_animation(body, random_animation_spec(body, 50, seed=3, root_motion=True))
    model = fit("r", body, poses, SHORT_TRAIN).model
    frames = [build_frame_samples(body, pose, 500, 500, 0, seed=t) for t, pose in enumerate(poses)]
    assert miou(model, body.rig, frames) >= 0.95


def test_deformable_queries_are_cheap(deformable, deformable_runs):
    posed = [forward_kinematics(deformable.body.rig, f.pose) for f in deformable.test_frames]
    timing = query_throughput(deformable_runs["d"].model, posed, 100_000)
    assert timing["seconds"] <= 10.0


# --- tracking ------------------------------------------------------------------------


def test_tracking_follows_a_moderate_sequence(deformable, deformable_runs):
    truths = held_out_sequence(deformable.body, 60, seed=101, max_velocity=0.1)
    assert mean_joint_error(deformable_runs["d"].model, deformable.body, truths) <= 0.05


def test_prior_and_smoothing_help_on_a_hard_sequence(deformable, deformable_runs):
    model, body = deformable_runs["d"].model, deformable.body
    truths = held_out_sequence(body, 30, seed=202, max_velocity=0.3)
    default = mean_joint_error(model, body, truths)
    assert mean_joint_error(model, body, truths, TrackConfig(w_prior=0.0)) > default
    assert mean_joint_error(model, body, truths, TrackConfig(smoothing=False)) > default


def test_child_rotation_is_recovered(two_bone):
    body, model = two_bone
    joints = np.zeros((2, 1))
    joints[1, 0] = 0.2
    truths = [body.rig.rest_bones(), forward_kinematics(body.rig, Pose(joints, RigidTransform.identity(2)))]
    assert child_angle(TrackState.from_posed(truths[1])) == pytest.approx(0.2)

    result = track_sequence(model, body, truths[0], clouds_for(body, truths), TrackConfig())
    assert abs(child_angle(result.states[1]) - 0.2) <= 0.02


def test_tracker_stays_at_the_optimum(two_bone):
    body, model = two_bone
    truth = forward_kinematics(body.rig, Pose(np.array([[0.3], [-0.5]]), RigidTransform.identity(2)))
    config = TrackConfig(sigma_frac=0.01, learning_rate=1e-5, steps_per_frame=20)
    result = track_sequence(model, body, truth, clouds_for(body, [truth, truth]), config)

    start, end = result.states
    assert np.max(np.abs(end.bone_origins() - start.bone_origins())) <= 1e-3
    assert abs(child_angle(end) - child_angle(start)) <= 1e-3


def test_static_sequence_does_not_drift_away(two_bone):
    body, model = two_bone
    truth = body.rig.rest_bones()
    shifted = RigidTransform(np.eye(2), np.array([0.05, 0.03]))
    initial = forward_kinematics(body.rig, Pose(np.zeros((2, 1)), shifted))
    clouds = clouds_for(body, [truth]) * 8
    config = TrackConfig(learning_rate=1e-3)
    result = track_sequence(model, body, initial, clouds, config, truths=[truth] * 8)

    errors = result.report["joint_error"].to_numpy()
    assert np.all(np.diff(errors) <= 2e-3)
    assert errors[-1] < 0.5 * errors[0]
