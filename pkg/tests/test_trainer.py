import numpy as np
import pytest

from runners.trainer import (
    HISTORY_COLUMNS,
    BatchFrame,
    Trainer,
    batch_frame,
    loss_occupancy,
    loss_weights,
    split_counts,
    total_loss,
    train,
    write_history_csv,
)
from tests.helpers import central_difference, random_pose, relative_error
from tools.dataset import build_frame_samples
from tools.kinematics import forward_kinematics
from tools.neuralnet import adam_step
from tools.occmodels import ModelConfig, build_model
from tools.synthbody import chain_body, generate_animation, random_animation_spec
from utils.config import TrainConfig
from utils.errors import InvalidInputError, TrainingDivergedError, UnsupportedModelError


def small_model(kind, body, seed=0):
    return build_model(ModelConfig(kind=kind, dim=body.dim, bone_count=body.bone_count, width=6, code_dim=2), seed)


@pytest.fixture
def batch(rng, body2d):
    frames = []
    for j in range(2):
        samples = build_frame_samples(body2d, random_pose(rng, body2d), 20, 20, 10, seed=j)
        frames.append(batch_frame(body2d, samples))
    return frames


@pytest.fixture
def poses(body2d):
    return generate_animation(body2d, random_animation_spec(body2d, 10, seed=1))


def small_train_config(**overrides):
    values = dict(
        batch_frames=2,
        points_uniform=32,
        points_surface=32,
        vertices=16,
        iterations=200,
        history_every=100,
        learning_rate=1e-3,
    )
    values.update(overrides)
    return TrainConfig(**values)


def test_split_counts():
    assert split_counts(10, 3) == [4, 3, 3]
    assert split_counts(10, 3, from_end=True) == [3, 3, 4]
    assert sum(split_counts(1024, 12)) == 1024


def _param_gradient_check(model, loss_of_params, analytic, rng):
    base = model.params.data.copy()
    indices = rng.choice(base.size, size=min(60, base.size), replace=False)

    def objective(flat):
        model.params.data[...] = flat
        return loss_of_params()

    numeric = central_difference(objective, base, indices)
    model.params.data[...] = base
    assert relative_error(analytic.data[indices], numeric) < 1e-4


@pytest.mark.parametrize("kind", ["u", "r", "d"])
@pytest.mark.parametrize("loss", ["l2", "bce"])
def test_occupancy_loss_gradient(rng, body2d, batch, kind, loss):
    model = small_model(kind, body2d, seed=4)
    value, grads = loss_occupancy(model, batch, kind=loss)
    assert value > 0.0
    _param_gradient_check(
        model, lambda: loss_occupancy(model, batch, kind=loss, need_grad=False)[0], grads, rng
    )


@pytest.mark.parametrize("kind", ["r", "d"])
def test_total_loss_gradient_includes_weight_term(rng, body2d, batch, kind):
    model = small_model(kind, body2d, seed=6)
    terms, grads = total_loss(model, batch, lambda_weights=0.5)
    assert terms.weights > 0.0
    assert terms.total == pytest.approx(terms.occupancy + 0.5 * terms.weights)
    _param_gradient_check(model, lambda: total_loss(model, batch, 0.5)[0].total, grads, rng)


def test_weight_loss_needs_parts(body2d, batch):
    with pytest.raises(UnsupportedModelError):
        loss_weights(small_model("u", body2d), batch)


def test_unstructured_total_loss_drops_weight_term(body2d, batch):
    model = small_model("u", body2d)
    terms, _ = total_loss(model, batch, lambda_weights=0.5)
    assert terms.weights == 0.0
    assert terms.total == terms.occupancy


def test_unknown_occupancy_loss(body2d, batch):
    with pytest.raises(InvalidInputError):
        loss_occupancy(small_model("r", body2d), batch, kind="hinge")


def test_training_history_and_determinism(tmp_path, body2d, poses):
    config = small_train_config()
    first = train(small_model("r", body2d), body2d, poses, config)
    second = train(small_model("r", body2d), body2d, poses, config)

    assert list(first.history.columns) == HISTORY_COLUMNS
    assert len(first.history) == config.iterations // 100
    assert list(first.history["step"]) == [100, 200]
    assert np.all(np.isfinite(first.history[["loss_total", "loss_occ", "loss_weights"]].to_numpy()))
    np.testing.assert_array_equal(first.model.params.data, second.model.params.data)

    path = tmp_path / "loss.csv"
    write_history_csv(first.history, path)
    assert path.read_text().splitlines()[0] == ",".join(HISTORY_COLUMNS)


def test_training_writes_periodic_checkpoints(tmp_path, body2d, poses):
    config = small_train_config(iterations=4, history_every=2, checkpoint_every=2)
    train(small_model("d", body2d), body2d, poses, config, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["checkpoint_000002.nasaw", "checkpoint_000004.nasaw"]


def test_trainer_rejects_mismatched_body(body2d, body3d, poses):
    with pytest.raises(InvalidInputError):
        Trainer(small_model("r", body3d), body2d, poses, small_train_config())
    with pytest.raises(InvalidInputError):
        Trainer(small_model("r", body2d), body2d, [], small_train_config())


def test_divergence_is_reported(body2d, poses):
    model = small_model("r", body2d)
    model.params.data[...] = np.nan
    trainer = Trainer(model, body2d, poses, small_train_config(), progress=False)
    with pytest.raises(TrainingDivergedError):
        trainer.step(1)


@pytest.mark.slow
def test_training_lowers_the_loss(body2d, poses):
    config = small_train_config(iterations=3000, learning_rate=3e-3, points_uniform=128, points_surface=128)
    model = build_model(ModelConfig(kind="r", dim=2, bone_count=body2d.bone_count, width=16), seed=0)
    losses = train(model, body2d, poses, config).history["loss_total"].to_numpy()
    # trailing window against the first window
    assert losses[-1] <= 0.5 * losses[0]


def test_constant_half_predictor_has_quarter_occupancy_loss(body2d, batch):
    model = small_model("r", body2d)
    model.params.data[...] = 0.0
    value, _ = loss_occupancy(model, batch, need_grad=False)
    assert value == pytest.approx(0.25, abs=1e-12)


def test_weight_loss_hand_case_with_two_parts(rng):
    body = chain_body(dim=2, bone_count=2)
    model = small_model("r", body)
    model.params.data[...] = 0.0
    posed = forward_kinematics(body.rig, random_pose(rng, body))
    vertices = rng.uniform(-1.0, 1.0, size=(6, 2))
    frame = BatchFrame(posed, np.zeros((0, 2)), np.zeros(0), vertices, np.array([0, 1, 1, 0, 1, 0]))

    # owner (0.5 - 0.5)² + other (0.5 - 0)², averaged over two parts
    value, _ = loss_weights(model, [frame], need_grad=False)
    assert value == pytest.approx(0.125, abs=1e-12)


def test_zero_lambda_matches_pure_occupancy_training(body2d, poses):
    config = small_train_config(iterations=20, history_every=10, lambda_weights=0.0)
    trained = train(small_model("d", body2d), body2d, poses, config).model

    model = small_model("d", body2d)
    trainer = Trainer(model, body2d, poses, config, progress=False)
    for step in range(1, config.iterations + 1):
        _, grads = loss_occupancy(model, trainer.sample_batch(step), config.occupancy_loss, config.blend)
        adam_step(trainer.adam, model.params, grads)

    np.testing.assert_array_equal(trained.params.data, model.params.data)
