#!/usr/bin/env python

'''
skeleton.py - kinematic trees, forward kinematics, linear blend skinning,
pose-corrective offsets and skin-weight transfer.

Rigid transforms are 4 x 4 homogeneous matrices. Skinning transforms map rest
(canonical) world coordinates to posed world coordinates, so they are all
exactly the identity at the rest pose.

====================
types:
    Skeleton
    Pose
    SkinWeights

kinematics:
    forward_kinematics
    humanoid_skeleton
    walk_pose

skinning:
    lbs_apply
    lbs_apply_backward
    blend_transforms
    transfer_skin_weights

pose correctives:
    pose_feature
    apply_pose_offsets
    apply_pose_offsets_batch

I/O:
    write_skeleton_json
    read_skeleton_json
====================
'''

import os
import json
import logging
from datetime import datetime

import numpy as np
from scipy.spatial.transform import Rotation

from gaussians import quat_to_matrix

LOGGER = logging.getLogger(__name__)


class InvalidSkeleton(ValueError):
    pass


class InvalidWeights(ValueError):
    pass


WEIGHT_TOL = 1e-6

# name, parent, rest world position (meters, y up, facing +z, T-pose)
HUMANOID_JOINTS = [
    ('pelvis', -1, (0.0, 0.95, 0.0)),
    ('spine', 0, (0.0, 1.20, 0.0)),
    ('l_hip', 0, (0.10, 0.90, 0.0)),
    ('r_hip', 0, (-0.10, 0.90, 0.0)),
    ('l_knee', 2, (0.10, 0.50, 0.0)),
    ('r_knee', 3, (-0.10, 0.50, 0.0)),
    ('neck', 1, (0.0, 1.48, 0.0)),
    ('l_shoulder', 1, (0.18, 1.44, 0.0)),
    ('r_shoulder', 1, (-0.18, 1.44, 0.0)),
    ('l_elbow', 7, (0.46, 1.44, 0.0)),
    ('r_elbow', 8, (-0.46, 1.44, 0.0)),
    ('head', 6, (0.0, 1.62, 0.0)),
    ('l_ankle', 4, (0.10, 0.10, 0.0)),
    ('r_ankle', 5, (-0.10, 0.10, 0.0)),
    ('l_wrist', 9, (0.70, 1.44, 0.0)),
    ('r_wrist', 10, (-0.70, 1.44, 0.0)),
    ('l_foot', 12, (0.10, 0.04, 0.07)),
    ('r_foot', 13, (-0.10, 0.04, 0.07)),
    ('l_hand', 14, (0.78, 1.44, 0.0)),
    ('r_hand', 15, (-0.78, 1.44, 0.0)),
    ('l_toe', 16, (0.10, 0.02, 0.15)),
    ('r_toe', 17, (-0.10, 0.02, 0.15)),
    ('l_finger', 18, (0.86, 1.44, 0.0)),
    ('r_finger', 19, (-0.86, 1.44, 0.0)),
]


###########
## TYPES ##
###########

class Skeleton(object):
    '''
    A kinematic tree in topological order.

    Args:
        parents (list of int): parent index per joint, -1 for the root.
        rest_local_rotations (J x 3 x 3 or None): rest rotation relative to
        the parent frame; identity if None.
        rest_local_translations (J x 3): joint origin in the parent frame,
        meters. The root's translation is its world position.
        names (list of str or None)
    '''

    def __init__(self, parents, rest_local_translations,
                 rest_local_rotations=None, names=None):

        self.parents = [int(p) for p in parents]
        J = len(self.parents)
        if J < 1:
            raise InvalidSkeleton('skeleton has no joints')

        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if roots != [0]:
            raise InvalidSkeleton('need exactly one root at index 0, got %s'
                                  % roots)
        for j, p in enumerate(self.parents[1:], start=1):
            if not (0 <= p < j):
                raise InvalidSkeleton('joint %d has parent %d; parents must '
                                      'precede children' % (j, p))

        self.rest_local_translations = np.asarray(
            rest_local_translations, dtype=np.float64).reshape(J, 3)
        if rest_local_rotations is None:
            self.rest_local_rotations = np.tile(np.eye(3), (J, 1, 1))
        else:
            self.rest_local_rotations = np.asarray(
                rest_local_rotations, dtype=np.float64).reshape(J, 3, 3)
        self.names = (list(names) if names is not None
                      else ['joint%02d' % j for j in range(J)])

        # rest world frames
        self.rest_world_rotations = np.empty((J, 3, 3))
        self.rest_world_origins = np.empty((J, 3))
        for j, p in enumerate(self.parents):
            if p < 0:
                self.rest_world_rotations[j] = self.rest_local_rotations[j]
                self.rest_world_origins[j] = self.rest_local_translations[j]
            else:
                Rp = self.rest_world_rotations[p]
                self.rest_world_rotations[j] = Rp @ self.rest_local_rotations[j]
                self.rest_world_origins[j] = (
                    Rp @ self.rest_local_translations[j] +
                    self.rest_world_origins[p]
                )

    @property
    def joint_count(self):
        return len(self.parents)

    def rest_world_transforms(self):
        J = self.joint_count
        T = np.tile(np.eye(4), (J, 1, 1))
        T[:, :3, :3] = self.rest_world_rotations
        T[:, :3, 3] = self.rest_world_origins
        return T


class Pose(object):
    '''
    Per-joint axis-angle rotations (radians) and a root translation (meters).
    '''

    def __init__(self, joint_rotations, root_translation=None):
        self.joint_rotations = np.asarray(joint_rotations,
                                          dtype=np.float64).reshape(-1, 3)
        if root_translation is None:
            root_translation = np.zeros(3)
        self.root_translation = np.asarray(root_translation,
                                           dtype=np.float64).reshape(3)

        if (not np.all(np.isfinite(self.joint_rotations)) or
                not np.all(np.isfinite(self.root_translation))):
            raise ValueError('pose components must be finite')
        angles = np.linalg.norm(self.joint_rotations, axis=1)
        if np.any(angles >= np.pi):
            raise ValueError('axis-angle magnitudes must be below pi, '
                             'got max %.6f' % angles.max())

    @classmethod
    def rest(cls, joint_count):
        return cls(np.zeros((joint_count, 3)), np.zeros(3))

    @property
    def joint_count(self):
        return self.joint_rotations.shape[0]

    def is_rest(self):
        return (not np.any(self.joint_rotations) and
                not np.any(self.root_translation))


class SkinWeights(object):
    '''
    Row-stochastic N x J weight matrix.
    '''

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise InvalidWeights('skin weights must be an N x J matrix')
        check_weight_rows(self.matrix)

    @property
    def shape(self):
        return self.matrix.shape

    def __len__(self):
        return self.matrix.shape[0]


def check_weight_rows(matrix):
    matrix = np.asarray(matrix)
    if matrix.size == 0:
        return True
    if np.any(matrix < 0) or not np.all(np.isfinite(matrix)):
        raise InvalidWeights('skin weights must be finite and nonnegative')
    rowsum = matrix.sum(axis=1)
    bad = np.abs(rowsum - 1.0) > WEIGHT_TOL
    if np.any(bad):
        raise InvalidWeights('%d weight rows are off the simplex (first: row '
                             '%d sums to %.9f)' % (bad.sum(),
                                                   np.argmax(bad),
                                                   rowsum[np.argmax(bad)]))
    return True


def _weight_matrix(weights):
    if isinstance(weights, SkinWeights):
        return weights.matrix
    return np.asarray(weights, dtype=np.float64)


################
## KINEMATICS ##
################

def axis_angle_to_matrix(rotvecs):
    '''
    Rodrigues rotation for (K x 3) rotation vectors. Zero vectors map to the
    identity exactly.
    '''
    rotvecs = np.asarray(rotvecs, dtype=np.float64).reshape(-1, 3)
    out = np.tile(np.eye(3), (rotvecs.shape[0], 1, 1))
    nonzero = np.any(rotvecs != 0.0, axis=1)
    if np.any(nonzero):
        out[nonzero] = Rotation.from_rotvec(rotvecs[nonzero]).as_matrix()
    return out


def forward_kinematics(skeleton, pose):
    '''
    Returns:
        (world, skinning): J x 4 x 4 posed joint frames, and the skinning
        transforms world(pose) . world(rest)^-1.

    Each skinning transform is accumulated root first as
    A_j = A_parent . [R', o_j - R' o_j] with o_j the rest world origin and R'
    the joint rotation expressed in the rest world frame; the root adds the
    pose's translation.
    '''
    J = skeleton.joint_count
    if pose.joint_count != J:
        raise InvalidSkeleton('pose has %d joints, skeleton has %d'
                              % (pose.joint_count, J))

    local = axis_angle_to_matrix(pose.joint_rotations)
    Rw = skeleton.rest_world_rotations
    origins = skeleton.rest_world_origins

    skinning = np.empty((J, 4, 4))
    for j, p in enumerate(skeleton.parents):
        if np.any(pose.joint_rotations[j]):
            Rj = Rw[j] @ local[j] @ Rw[j].T
        else:
            Rj = np.eye(3)
        C = np.eye(4)
        C[:3, :3] = Rj
        C[:3, 3] = origins[j] - Rj @ origins[j]
        if p < 0:
            C[:3, 3] += pose.root_translation
            skinning[j] = C
        else:
            skinning[j] = skinning[p] @ C

    world = skinning @ skeleton.rest_world_transforms()
    return world, skinning


def _is_identity(transforms):
    return np.array_equal(transforms,
                          np.broadcast_to(np.eye(4), transforms.shape))


##############
## SKINNING ##
##############

def blend_transforms(weights, transforms):
    '''
    Per-point blended linear part M = sum_j w_j R_j (N x 3 x 3) and
    translation t = sum_j w_j t_j (N x 3).
    '''
    W = _weight_matrix(weights)
    M = np.einsum('nj,jab->nab', W, transforms[:, :3, :3])
    t = W @ transforms[:, :3, 3]
    return M, t


def lbs_apply(points, weights, transforms):
    '''
    p' = sum_j w_j (A_j p). Returns an exact copy of the points when every
    transform is the identity.
    '''
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    W = _weight_matrix(weights)
    if W.shape[0] != points.shape[0] or W.shape[1] != transforms.shape[0]:
        raise InvalidWeights('weights are %s for %d points and %d transforms'
                             % (W.shape, points.shape[0], transforms.shape[0]))
    check_weight_rows(W)

    if _is_identity(transforms):
        return points.copy()

    M, t = blend_transforms(W, transforms)
    return np.einsum('nab,nb->na', M, points) + t


def lbs_apply_backward(points, weights, transforms, dout):
    '''
    Gradients of lbs_apply wrt the points (N x 3) and the weights (N x J).
    '''
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    W = _weight_matrix(weights)
    M, _ = blend_transforms(W, transforms)
    dpoints = np.einsum('nab,na->nb', M, dout)
    # posed position of every point under every joint
    per_joint = (np.einsum('jab,nb->nja', transforms[:, :3, :3], points) +
                 transforms[None, :, :3, 3])
    dweights = np.einsum('nja,na->nj', per_joint, dout)
    return dpoints, dweights


def transfer_skin_weights(cloth_mesh, body_mesh, body_weights):
    '''
    Copies to each cloth vertex the weight row of its nearest body vertex
    (Euclidean, ties to the lowest body index).
    '''
    from losses import nearest_neighbors

    W = _weight_matrix(body_weights)
    if body_mesh.n_vertices == 0:
        raise InvalidWeights('cannot transfer weights from an empty body mesh')
    if W.shape[0] != body_mesh.n_vertices:
        raise InvalidWeights('body weights have %d rows for %d vertices'
                             % (W.shape[0], body_mesh.n_vertices))

    idx, _ = nearest_neighbors(cloth_mesh.vertices, body_mesh.vertices)
    return SkinWeights(W[idx].copy())


#####################
## POSE CORRECTIVES ##
#####################

def pose_feature(pose):
    '''
    Concatenation of flatten(R(theta_j) - I) over the non-root joints, length
    9 (J-1). Accepts a Pose or a raw J x 3 array of rotation vectors.
    '''
    rotvecs = (pose.joint_rotations if isinstance(pose, Pose)
               else np.asarray(pose, dtype=np.float64).reshape(-1, 3))
    R = axis_angle_to_matrix(rotvecs[1:])
    return (R - np.eye(3)).reshape(-1)


def apply_pose_offsets(point, dp, feature):
    '''
    point + feature^T dp for one point; dp is K x 3, feature has length K.
    '''
    point = np.asarray(point, dtype=np.float64).reshape(3)
    dp = np.asarray(dp, dtype=np.float64)
    feature = np.asarray(feature, dtype=np.float64).reshape(-1)
    if dp.ndim != 2 or dp.shape != (feature.shape[0], 3):
        raise ValueError('pose offsets are %s, feature has length %d'
                         % (dp.shape, feature.shape[0]))
    return point + feature @ dp


def apply_pose_offsets_batch(points, dp, feature):
    '''
    Batched apply_pose_offsets: points N x 3, dp N x K x 3.
    '''
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    feature = np.asarray(feature, dtype=np.float64).reshape(-1)
    if dp.shape != (points.shape[0], feature.shape[0], 3):
        raise ValueError('pose offsets are %s for %d points and a feature of '
                         'length %d' % (dp.shape, points.shape[0],
                                        feature.shape[0]))
    if not np.any(feature):
        return points.copy()
    return points + np.einsum('k,nkc->nc', feature, dp)


#######################
## PROCEDURAL HUMANOID ##
#######################

def humanoid_skeleton(joint_count=24):
    '''
    The first joint_count joints of a T-posed humanoid (y up, meters). Rest
    rotations are identity.
    '''
    if not (6 <= joint_count <= len(HUMANOID_JOINTS)):
        raise InvalidSkeleton('humanoid skeleton supports 6..%d joints'
                              % len(HUMANOID_JOINTS))

    joints = HUMANOID_JOINTS[:joint_count]
    world = np.array([j[2] for j in joints])
    parents = [j[1] for j in joints]
    local = np.array([world[j] - (world[p] if p >= 0 else 0.0)
                      for j, p in enumerate(parents)])
    return Skeleton(parents, local, names=[j[0] for j in joints])


def walk_pose(skeleton, phase, amplitude=0.45, root_sway=0.03):
    '''
    One frame of a walk cycle. All angles are amplitude * sin(phase) terms,
    so phase 0 is the rest pose.
    '''
    J = skeleton.joint_count
    names = skeleton.names
    s = np.sin(phase)
    rot = np.zeros((J, 3))

    def setrot(name, vec):
        if name in names:
            rot[names.index(name)] = vec

    # hips swing about x, knees bend on the back swing
    setrot('l_hip', (amplitude*s, 0.0, 0.0))
    setrot('r_hip', (-amplitude*s, 0.0, 0.0))
    setrot('l_knee', (0.6*amplitude*max(s, 0.0), 0.0, 0.0))
    setrot('r_knee', (0.6*amplitude*max(-s, 0.0), 0.0, 0.0))
    # arms counter-swing and hang a little from the T-pose
    setrot('l_shoulder', (-0.5*amplitude*s, 0.0, -0.5*amplitude*abs(s)))
    setrot('r_shoulder', (0.5*amplitude*s, 0.0, 0.5*amplitude*abs(s)))
    setrot('l_elbow', (0.0, 0.3*amplitude*abs(s), 0.0))
    setrot('r_elbow', (0.0, -0.3*amplitude*abs(s), 0.0))
    setrot('spine', (0.0, 0.15*amplitude*s, 0.0))
    setrot('head', (0.0, -0.1*amplitude*s, 0.0))

    root = np.array([root_sway*s, 0.0, 0.0])
    return Pose(rot, root)


#########
## I/O ##
#########

def _pose_to_dict(pose):
    return {'axis_angles': pose.joint_rotations.tolist(),
            'root_translation': pose.root_translation.tolist()}


def _pose_from_dict(d):
    return Pose(np.array(d['axis_angles'], dtype=np.float64),
                np.array(d['root_translation'], dtype=np.float64))


def write_skeleton_json(path, skeleton, pose=None, poses=None):
    '''
    {joints: [{name, parent, rest_rotation_quat, rest_translation}],
     pose: {axis_angles, root_translation}, poses: [...]}
    '''
    joints = []
    quats = Rotation.from_matrix(skeleton.rest_local_rotations).as_quat()
    for j in range(skeleton.joint_count):
        x, y, z, w = quats[j]
        joints.append({
            'name': skeleton.names[j],
            'parent': (None if skeleton.parents[j] < 0
                       else skeleton.parents[j]),
            'rest_rotation_quat': [float(w), float(x), float(y), float(z)],
            'rest_translation': skeleton.rest_local_translations[j].tolist(),
        })

    payload = {'joints': joints}
    if pose is not None:
        payload['pose'] = _pose_to_dict(pose)
    if poses is not None:
        payload['poses'] = [_pose_to_dict(p) for p in poses]

    with open(path, 'w') as outfd:
        json.dump(payload, outfd, indent=1)

    LOGGER.debug('%sZ: wrote %d-joint skeleton to %s' %
                 (datetime.utcnow().isoformat(), skeleton.joint_count, path))
    return path


def read_skeleton_json(path):
    '''
    Returns (skeleton, pose or None, list of poses).
    '''
    if not os.path.exists(path):
        raise InvalidSkeleton('skeleton file does not exist: %s' % path)

    with open(path) as infd:
        payload = json.load(infd)

    joints = payload['joints']
    parents = [-1 if j['parent'] is None else int(j['parent'])
               for j in joints]
    rots = quat_to_matrix(np.array([j['rest_rotation_quat'] for j in joints],
                                   dtype=np.float64))
    trans = np.array([j['rest_translation'] for j in joints],
                     dtype=np.float64)
    names = [j.get('name', 'joint%02d' % i) for i, j in enumerate(joints)]
    skeleton = Skeleton(parents, trans, rest_local_rotations=rots,
                        names=names)

    pose = _pose_from_dict(payload['pose']) if 'pose' in payload else None
    poses = [_pose_from_dict(p) for p in payload.get('poses', [])]
    return skeleton, pose, poses
