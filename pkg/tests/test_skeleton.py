import numpy as np
import pytest

from meshutils import TriMesh
from skeleton import (Skeleton, Pose, SkinWeights, InvalidSkeleton,
                      InvalidWeights, forward_kinematics, lbs_apply,
                      transfer_skin_weights, pose_feature,
                      apply_pose_offsets, apply_pose_offsets_batch,
                      humanoid_skeleton, walk_pose, write_skeleton_json,
                      read_skeleton_json)


def _chain():
    return Skeleton([-1, 0], [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])


def _transforms(*translations):
    T = np.tile(np.eye(4), (len(translations), 1, 1))
    for j, t in enumerate(translations):
        T[j, :3, 3] = t
    return T


def test_skeleton_needs_single_leading_root():
    with pytest.raises(InvalidSkeleton):
        Skeleton([0, -1], np.zeros((2, 3)))
    with pytest.raises(InvalidSkeleton):
        Skeleton([-1, 2, 0], np.zeros((3, 3)))


def test_pose_rejects_half_turns_and_nans():
    with pytest.raises(ValueError):
        Pose([[0.0, 0.0, np.pi]])
    with pytest.raises(ValueError):
        Pose([[np.nan, 0.0, 0.0]])


def test_rest_pose_gives_identity_skinning():
    skel = humanoid_skeleton(24)
    _, skinning = forward_kinematics(skel, Pose.rest(24))
    np.testing.assert_array_equal(skinning,
                                  np.broadcast_to(np.eye(4), skinning.shape))


def test_root_translation_is_pure_translation():
    skel = humanoid_skeleton(8)
    pose = Pose(np.zeros((8, 3)), [0.1, -0.2, 0.3])
    _, skinning = forward_kinematics(skel, pose)
    expected = np.tile(np.eye(4), (8, 1, 1))
    expected[:, :3, 3] = [0.1, -0.2, 0.3]
    np.testing.assert_allclose(skinning, expected, atol=1e-12)


def test_child_origin_follows_root_rotation():
    world, _ = forward_kinematics(_chain(),
                                  Pose([[0, 0, np.pi/2], [0, 0, 0]]))
    np.testing.assert_allclose(world[1, :3, 3], [0.0, 1.0, 0.0], atol=1e-12)


def test_lbs_rest_is_identity_copy():
    pts = np.random.default_rng(0).normal(size=(5, 3))
    W = np.full((5, 2), 0.5)
    out = lbs_apply(pts, W, _transforms([0, 0, 0], [0, 0, 0]))
    np.testing.assert_array_equal(out, pts)
    assert out is not pts


def test_lbs_translation_and_convex_blend():
    pts = np.array([[1.0, 2.0, 3.0]])
    shifted = lbs_apply(pts, [[0.0, 1.0]],
                        _transforms([0, 0, 0], [0, 0, 1]))
    np.testing.assert_allclose(shifted, [[1.0, 2.0, 4.0]])
    blended = lbs_apply(pts, [[0.5, 0.5]],
                        _transforms([0, 0, 0], [2, 0, 0]))
    np.testing.assert_allclose(blended, [[2.0, 2.0, 3.0]])


def test_lbs_rejects_rows_off_the_simplex():
    with pytest.raises(InvalidWeights):
        lbs_apply(np.zeros((1, 3)), [[0.7, 0.7]],
                  _transforms([0, 0, 0], [0, 0, 1]))
    with pytest.raises(InvalidWeights):
        SkinWeights([[1.5, -0.5]])


def test_pose_feature_shapes_and_values():
    assert np.array_equal(pose_feature(Pose.rest(24)), np.zeros(207))

    rot = np.zeros((2, 3))
    rot[1] = [0.0, 0.0, np.pi]
    np.testing.assert_allclose(pose_feature(rot),
                               np.diag([-2.0, -2.0, 0.0]).ravel(),
                               atol=1e-12)


def test_pose_feature_ignores_root():
    skel = humanoid_skeleton(6)
    pose = walk_pose(skel, 0.7)
    other = Pose(pose.joint_rotations.copy(), pose.root_translation)
    other.joint_rotations[0] = [0.3, -0.2, 0.1]
    np.testing.assert_array_equal(pose_feature(pose), pose_feature(other))


def test_pose_offsets():
    p = np.array([1.0, 2.0, 3.0])
    dp = np.zeros((9, 3))
    np.testing.assert_array_equal(apply_pose_offsets(p, dp, np.ones(9)), p)

    dp[4] = [0.0, 0.0, 0.2]
    np.testing.assert_array_equal(apply_pose_offsets(p, dp, np.zeros(9)), p)
    e = np.zeros(9)
    e[4] = 1.0
    np.testing.assert_allclose(apply_pose_offsets(p, dp, e), [1.0, 2.0, 3.2])

    with pytest.raises(ValueError):
        apply_pose_offsets(p, np.zeros((8, 3)), e)
    with pytest.raises(ValueError):
        apply_pose_offsets_batch(p[None], np.zeros((2, 9, 3)), e)


def test_weight_transfer_copies_nearest_body_row():
    body = TriMesh([[0.0, 0, 0], [1.0, 0, 0]], np.zeros((0, 3)))
    W = SkinWeights([[1.0, 0.0], [0.25, 0.75]])
    cloth = TriMesh([[0.3, 0, 0], [1.0, 0, 0]], np.zeros((0, 3)))
    out = transfer_skin_weights(cloth, body, W)
    np.testing.assert_array_equal(out.matrix, [[1.0, 0.0], [0.25, 0.75]])

    with pytest.raises(InvalidWeights):
        transfer_skin_weights(cloth, TriMesh(np.zeros((0, 3)),
                                             np.zeros((0, 3))),
                              SkinWeights(np.zeros((0, 2))))


def test_weight_transfer_follows_cloth_order():
    rng = np.random.default_rng(9)
    body = TriMesh(rng.uniform(-1, 1, (40, 3)), np.zeros((0, 3)))
    W = SkinWeights(rng.dirichlet(np.ones(5), size=40))
    cloth = rng.uniform(-1.2, 1.2, (25, 3))
    perm = rng.permutation(25)
    out = transfer_skin_weights(TriMesh(cloth, np.zeros((0, 3))), body, W)
    shuffled = transfer_skin_weights(TriMesh(cloth[perm], np.zeros((0, 3))),
                                     body, W)
    np.testing.assert_array_equal(shuffled.matrix, out.matrix[perm])


def test_humanoid_joint_range():
    assert humanoid_skeleton(6).joint_count == 6
    with pytest.raises(InvalidSkeleton):
        humanoid_skeleton(5)
    with pytest.raises(InvalidSkeleton):
        humanoid_skeleton(25)


def test_walk_phase_zero_is_rest():
    skel = humanoid_skeleton(12)
    assert walk_pose(skel, 0.0).is_rest()
    assert not walk_pose(skel, 1.0).is_rest()


def test_skeleton_json_round_trip(tmp_path):
    skel = humanoid_skeleton(10)
    poses = [walk_pose(skel, 0.3), walk_pose(skel, 1.1)]
    path = str(tmp_path / 'skeleton.json')
    write_skeleton_json(path, skel, pose=poses[0], poses=poses)
    back, pose, back_poses = read_skeleton_json(path)
    assert back.parents == skel.parents
    assert back.names == skel.names
    np.testing.assert_allclose(back.rest_world_origins,
                               skel.rest_world_origins, atol=1e-12)
    np.testing.assert_allclose(pose.joint_rotations, poses[0].joint_rotations)
    assert len(back_poses) == 2
