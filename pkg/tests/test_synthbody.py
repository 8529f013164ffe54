import numpy as np
import pytest

from tests.helpers import random_pose, random_rigid
from tools.kinematics import Pose, Rig, RigidTransform, forward_kinematics
from tools.synthbody import (
    AnimationSpec,
    CapsuleBody,
    bbox_diagonal,
    bend_factors,
    capsule_surface_measures,
    chain_body,
    dominant_parts,
    effective_radii,
    generate_animation,
    gt_occupancy,
    joint_angles_at,
    part_distances,
    part_occupancy,
    posed_bbox,
    random_animation_spec,
    rest_locations,
    skinning_weights,
    surface_samples,
)
from utils.errors import InvalidInputError


def test_rest_chain_membership(body2d):
    posed = body2d.rig.rest_bones()
    points = np.array([[0.25, 0.0], [1.4, 0.05], [0.25, 0.5], [-0.5, 0.0]])
    np.testing.assert_array_equal(gt_occupancy(body2d, posed, points), [1, 1, 0, 0])


def test_occupancy_is_equivariant(rng, body3d):
    pose = random_pose(rng, body3d)
    posed = forward_kinematics(body3d.rig, pose)
    lo, hi = posed_bbox(body3d, posed, scale=1.1)
    points = rng.uniform(lo, hi, size=(2000, 3))
    reference = gt_occupancy(body3d, posed, points)
    assert 0 < reference.sum() < points.shape[0]
    for _ in range(10):
        G = random_rigid(rng, 3)
        moved = forward_kinematics(body3d.rig, pose.transformed(G))
        np.testing.assert_array_equal(gt_occupancy(body3d, moved, G.apply(points)), reference)


def test_bulge_grows_with_bend(body2d):
    joints = np.zeros((3, 1))
    joints[1, 0] = np.pi / 2
    posed = forward_kinematics(body2d.rig, Pose(joints, RigidTransform.identity(2)))
    np.testing.assert_allclose(bend_factors(body2d, posed), [0.0, 0.5, 0.0], atol=1e-12)
    expected = body2d.radii * np.array([1.0, 1.0 + body2d.bulge[1] * 0.5, 1.0])
    np.testing.assert_allclose(effective_radii(body2d, posed), expected)


def test_rigid_body_keeps_radii(rng, rigid2d):
    posed = forward_kinematics(rigid2d.rig, random_pose(rng, rigid2d))
    np.testing.assert_array_equal(effective_radii(rigid2d, posed), rigid2d.radii)
    assert rigid2d.is_rigid


def test_body_rejects_bad_bulge():
    with pytest.raises(InvalidInputError):
        chain_body(bulge=1.0)


@pytest.mark.parametrize("dim", [2, 3])
def test_surface_samples_lie_on_the_union_boundary(rng, body2d, body3d, dim):
    body = body2d if dim == 2 else body3d
    posed = forward_kinematics(body.rig, random_pose(rng, body))
    samples = surface_samples(body, posed, 400, seed=7)

    radii = effective_radii(body, posed)
    distances = part_distances(body, posed, samples.points)
    owner = distances[samples.parts, np.arange(400)]
    np.testing.assert_allclose(owner, radii[samples.parts], atol=1e-9)
    assert np.all(distances >= radii[:, None] * (1.0 - 1e-6))
    np.testing.assert_allclose(np.linalg.norm(samples.normals, axis=1), 1.0)

    lo, hi = posed_bbox(body, posed)
    assert np.all(samples.points >= lo - 1e-9) and np.all(samples.points <= hi + 1e-9)


def test_surface_samples_are_seeded(body2d):
    posed = body2d.rig.rest_bones()
    a = surface_samples(body2d, posed, 100, seed=3)
    b = surface_samples(body2d, posed, 100, seed=3)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.parts, b.parts)


def test_skinning_weights_pick_the_nearest_bone(body2d):
    vertices = np.array([[0.25, 0.12], [0.75, -0.12], [1.25, 0.12]])
    weights = skinning_weights(body2d, vertices)
    np.testing.assert_allclose(weights.sum(axis=1), 1.0)
    np.testing.assert_array_equal(weights.argmax(axis=1), [0, 1, 2])


def test_random_animation_starts_at_rest_and_respects_speed(body2d):
    spec = random_animation_spec(body2d, 60, seed=5, max_velocity=0.1)
    np.testing.assert_allclose(joint_angles_at(spec, 0), 0.0, atol=1e-12)
    assert spec.max_angular_velocity() <= 0.1 + 1e-12

    poses = generate_animation(body2d, spec)
    angles = np.stack([p.joint_params for p in poses])
    assert len(poses) == 60
    assert np.max(np.abs(np.diff(angles, axis=0))) <= 0.1 + 1e-12
    np.testing.assert_array_equal(angles[:, 0], 0.0)


def test_animation_spec_rejects_non_rest_first_frame():
    shape = (2, 1, 1)
    with pytest.raises(InvalidInputError):
        AnimationSpec(np.full(shape, 0.5), np.full(shape, 0.2), np.full(shape, 0.3), frame_count=10)


def two_capsules():
    rig = Rig((-1, 0), np.array([[0.0, 0.0], [2.0, 0.0]]))
    return CapsuleBody(
        rig=rig,
        seg_start=np.zeros((2, 2)),
        seg_end=np.array([[0.5, 0.0], [1.0, 0.0]]),
        radii=np.array([0.1, 0.2]),
        bulge=np.zeros(2),
    )


def test_surface_samples_follow_capsule_measure():
    body = two_capsules()
    samples = surface_samples(body, body.rig.rest_bones(), 100_000, seed=1)
    expected = capsule_surface_measures(body, body.radii)
    expected = expected / expected.sum() * 100_000
    counts = np.bincount(samples.parts, minlength=2)
    np.testing.assert_allclose(counts, expected, rtol=0.05)


def test_equidistant_vertex_ties_to_the_lower_part():
    body = chain_body(dim=2, bone_count=2)
    rest = body.rig.rest_bones()
    # above the shared joint: same distance to both capsules
    vertices = np.array([[0.5, 0.13], [0.5, -0.2], [0.5, 0.31]])
    weights = skinning_weights(body, vertices)
    np.testing.assert_allclose(weights[:, 0], weights[:, 1], atol=1e-9)
    np.testing.assert_array_equal(dominant_parts(body, rest, vertices, np.array([1, 1, 0])), [0, 0, 0])


def test_far_point_is_outside(rng, body2d):
    posed = forward_kinematics(body2d.rig, random_pose(rng, body2d))
    lo, hi = posed_bbox(body2d, posed)
    far = 0.5 * (lo + hi) + 3.0 * bbox_diagonal(body2d, posed) * np.array([[0.6, 0.8], [-1.0, 0.0]])
    np.testing.assert_array_equal(gt_occupancy(body2d, posed, far), [0, 0])


def test_animation_matches_the_sinusoid_formula(body2d):
    amplitudes = np.array([[[0.0, 0.0]], [[0.4, -0.2]], [[0.1, 0.3]]])
    frequencies = np.array([[[0.5, 1.0]], [[0.25, 0.5]], [[1.5, 0.2]]])
    phases = np.array([[[0.0, 0.0]], [[0.0, np.pi]], [[np.pi, 0.0]]])
    spec = AnimationSpec(amplitudes, frequencies, phases, frame_count=20, frame_rate=10.0)
    poses = generate_animation(body2d, spec)

    for t in (0, 7, 19):
        for b in range(3):
            expected = sum(
                amplitudes[b, 0, i] * np.sin(2.0 * np.pi * frequencies[b, 0, i] * t / 10.0 + phases[b, 0, i])
                for i in range(2)
            )
            assert poses[t].joint_params[b, 0] == pytest.approx(expected, abs=1e-12)


def test_zero_amplitudes_stay_at_rest(body3d):
    shape = (3, 3, 2)
    spec = AnimationSpec(np.zeros(shape), np.full(shape, 0.4), np.zeros(shape), frame_count=6)
    for pose in generate_animation(body3d, spec):
        np.testing.assert_array_equal(pose.joint_params, 0.0)


def test_rigid_part_occupancy_is_pose_invariant_in_local_frames(rng, rigid2d):
    rest = rigid2d.rig.rest_bones()
    samples = surface_samples(rigid2d, rest, 1000, seed=4)
    offsets = rng.choice([-0.02, 0.02], size=1000)[:, None]
    points = samples.points + offsets * samples.normals
    columns = np.arange(1000)
    reference = part_occupancy(rigid2d, rest, points)[samples.parts, columns]
    assert 0 < reference.sum() < 1000

    for _ in range(10):
        posed = forward_kinematics(rigid2d.rig, random_pose(rng, rigid2d, root=random_rigid(rng, 2)))
        # B_b · B̄_b^-1 · x carries each rest point onto its owner in this pose
        moved = rest_locations(rest, posed, points, samples.parts)
        np.testing.assert_array_equal(part_occupancy(rigid2d, posed, moved)[samples.parts, columns], reference)
