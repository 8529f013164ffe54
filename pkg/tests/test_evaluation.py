import numpy as np
import pytest

from tests.helpers import random_pose, random_rigid
from tools.dataset import build_frame_samples
from tools.evaluation import (
    MetricsReport,
    SpatialHash,
    chamfer_l1,
    evaluate_frame,
    evaluate_model,
    extract_surface_points,
    foreign_part_response,
    fscore,
    iou,
    miou,
    nearest_sq_distances,
    query_throughput,
)
from tools.kinematics import forward_kinematics
from tools.occmodels import ModelConfig, OracleModel, build_model
from tools.synthbody import chain_body, effective_radii, part_distances, surface_samples
from utils.errors import InvalidInputError, UndefinedMetricError, UnsupportedModelError


class ConstantModel:
    """Stand-in model whose output never crosses the level set"""

    kind = "const"
    part_based = False

    def eval(self, posed, points, mode="soft"):
        return np.zeros(np.atleast_2d(points).shape[0])


@pytest.fixture
def frames(rng, body2d):
    return [
        build_frame_samples(body2d, random_pose(rng, body2d), 300, 300, 40, seed=i, sequence_id=0, frame_index=i)
        for i in range(3)
    ]


def test_iou_cases():
    assert iou([1, 1, 0], [1, 1, 0]) == 1.0
    assert iou([1, 0, 0], [0, 1, 0]) == 0.0
    assert iou([0, 0], [0, 0]) == 1.0
    assert iou([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(1.0 / 3.0)
    with pytest.raises(InvalidInputError):
        iou([1, 0], [1, 0, 0])


def test_chamfer_and_fscore_cases():
    a = np.array([[0.0, 0.0]])
    b = np.array([[1.0, 0.0]])
    assert chamfer_l1(a, a) == 0.0
    assert chamfer_l1(a, b) == pytest.approx(1.0)
    assert fscore(a, a, 1e-6) == pytest.approx(100.0)
    assert fscore(a, b, 0.5) == 0.0
    assert fscore(np.zeros((0, 2)), b, 0.5) == 0.0
    with pytest.raises(UndefinedMetricError):
        fscore(a, np.zeros((0, 2)), 0.5)
    with pytest.raises(UndefinedMetricError):
        chamfer_l1(np.zeros((0, 2)), b)


def test_spatial_hash_matches_brute_force(rng):
    reference = rng.uniform(-1.0, 1.0, size=(2500, 3))
    queries = rng.uniform(-1.5, 1.5, size=(2100, 3))
    hashed = nearest_sq_distances(queries, reference)

    brute = np.empty(queries.shape[0])
    for start in range(0, queries.shape[0], 100):
        diff = queries[start : start + 100, None, :] - reference[None]
        brute[start : start + 100] = np.einsum("qnd,qnd->qn", diff, diff).min(axis=1)
    np.testing.assert_allclose(hashed, brute, rtol=1e-12, atol=1e-15)

    index = SpatialHash(reference)
    assert index.nearest_sq(reference[17]) == 0.0


def test_oracle_scores_perfect_iou(body2d, frames):
    oracle = OracleModel(body2d)
    assert miou(oracle, body2d.rig, frames) == 1.0

    metrics = evaluate_frame(oracle, body2d, frames[0], grid_res=64, reference_count=500)
    assert metrics.iou == 1.0
    assert metrics.chamfer_l1 < 0.02
    assert metrics.fscore > 50.0
    assert metrics.surface_points > 0


def test_extracted_points_lie_near_the_surface(rng, body2d):
    posed = forward_kinematics(body2d.rig, random_pose(rng, body2d))
    extraction = extract_surface_points(OracleModel(body2d), body2d, posed, grid_res=64)
    assert not extraction.empty
    clearance = part_distances(body2d, posed, extraction.points) - effective_radii(body2d, posed)[:, None]
    nearest = np.abs(clearance.min(axis=0))
    assert np.all(nearest <= np.max(extraction.cell_size) + 1e-9)


def test_degenerate_model_has_no_surface(body2d, frames):
    posed = forward_kinematics(body2d.rig, frames[0].pose)
    extraction = extract_surface_points(ConstantModel(), body2d, posed, grid_res=16)
    assert extraction.empty
    assert extraction.points.shape == (0, 2)

    metrics = evaluate_frame(ConstantModel(), body2d, frames[0], grid_res=16, reference_count=100)
    assert np.isnan(metrics.chamfer_l1)
    assert metrics.fscore == 0.0
    assert metrics.iou == 0.0

    with pytest.raises(InvalidInputError):
        extract_surface_points(ConstantModel(), body2d, posed, grid_res=4)


def test_metrics_report_rows(tmp_path, body2d, frames):
    report = evaluate_model(OracleModel(body2d), body2d, frames, grid_res=16, reference_count=100)
    assert isinstance(report, MetricsReport)
    table = report.to_frame()
    assert len(table) == len(frames) + 1
    assert list(table["row"]) == ["frame"] * len(frames) + ["mean"]
    assert table["iou"].iloc[-1] == pytest.approx(1.0)

    path = tmp_path / "metrics.csv"
    report.write_csv(path)
    assert path.read_text().count("\n") == len(frames) + 2

    with pytest.raises(UndefinedMetricError):
        evaluate_model(OracleModel(body2d), body2d, [])


def test_foreign_part_response(body2d, frames):
    model = build_model(ModelConfig(kind="r", dim=2, bone_count=3, width=6))
    response = foreign_part_response(model, body2d.rig, frames)
    assert response.shape == (3,)
    assert np.all((response > 0.0) & (response < 1.0))
    with pytest.raises(UnsupportedModelError):
        foreign_part_response(build_model(ModelConfig(kind="u", dim=2, bone_count=3, width=6)), body2d.rig, frames)


def test_query_throughput(body2d, frames):
    model = build_model(ModelConfig(kind="d", dim=2, bone_count=3, width=6))
    posed = [forward_kinematics(body2d.rig, f.pose) for f in frames]
    stats = query_throughput(model, posed, 1000)
    assert stats["queries"] == 1000.0
    assert stats["queries_per_second"] > 0.0
    with pytest.raises(InvalidInputError):
        query_throughput(model, posed, 0)


def test_single_capsule_crossings_stay_within_a_cell_and_a_half(rng):
    body = chain_body(dim=2, bone_count=1)
    posed = forward_kinematics(body.rig, random_pose(rng, body, root=random_rigid(rng, 2, spread=0.5)))
    extraction = extract_surface_points(OracleModel(body), body, posed, grid_res=128)
    assert not extraction.empty
    clearance = part_distances(body, posed, extraction.points)[0] - effective_radii(body, posed)[0]
    assert np.all(np.abs(clearance) <= 1.5 * np.linalg.norm(extraction.cell_size))


def test_corrupting_predictions_never_raises_iou(rng, frames):
    truth = frames[0].labels.astype(bool)
    order = rng.permutation(truth.size)
    scores = []
    for percent in (0, 1, 5, 10, 25):
        predicted = truth.copy()
        flipped = order[: int(round(percent / 100 * truth.size))]
        predicted[flipped] = ~predicted[flipped]
        scores.append(iou(predicted, truth))
    assert scores[0] == 1.0
    assert all(a >= b for a, b in zip(scores, scores[1:]))


@pytest.mark.slow
def test_oracle_chamfer_halves_as_the_grid_doubles(rng, body2d):
    posed = forward_kinematics(body2d.rig, random_pose(rng, body2d, root=random_rigid(rng, 2, spread=0.5)))
    reference = surface_samples(body2d, posed, 50_000, seed=9).points
    oracle = OracleModel(body2d)
    chamfers = [
        chamfer_l1(extract_surface_points(oracle, body2d, posed, grid_res=res).points, reference) for res in (32, 64, 128)
    ]
    for coarse, fine in zip(chamfers, chamfers[1:]):
        assert 0.35 <= fine / coarse <= 0.65
