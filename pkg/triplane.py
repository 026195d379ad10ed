#!/usr/bin/env python

'''
triplane.py - three axis-aligned feature planes sampled bilinearly.

Grids are node-centered: node i of a res-node axis sits at normalized
coordinate i/(res-1), so the res nodes span [0,1] including both ends.
Queries are normalized by the field's bounding box and clamped to [0,1].

====================
    TriPlaneField
    AvatarField
    init_field
    field_bbox_for
    sample
    sample_batch
    sample_backward
    sample_backward_batch
====================
'''

import logging

import numpy as np

LOGGER = logging.getLogger(__name__)

# (first axis, second axis) of each plane, in feature order XY, XZ, YZ
PLANE_AXES = ((0, 1), (0, 2), (1, 2))
PLANE_NAMES = ('xy', 'xz', 'yz')


class TriPlaneField(object):
    '''
    Args:
        planes (np.ndarray): 3 x res x res x C, in the order XY, XZ, YZ.
        Plane XY is indexed [ix, iy], XZ [ix, iz], YZ [iy, iz].
        bbox_min, bbox_max: world-space corners of the box mapped to [0,1]^3.
    '''

    def __init__(self, planes, bbox_min, bbox_max):
        self.planes = np.asarray(planes, dtype=np.float64)
        if (self.planes.ndim != 4 or self.planes.shape[0] != 3 or
                self.planes.shape[1] != self.planes.shape[2]):
            raise ValueError('planes must be 3 x res x res x C, got %s'
                             % (self.planes.shape,))
        if self.planes.shape[1] < 2:
            raise ValueError('planes need at least 2 nodes per axis')
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64).reshape(3)
        if np.any(self.bbox_max - self.bbox_min <= 0):
            raise ValueError('bbox needs positive extent on every axis')

    @property
    def res(self):
        return self.planes.shape[1]

    @property
    def channels(self):
        return self.planes.shape[3]

    @property
    def feature_dim(self):
        return 3*self.channels

    def copy(self):
        return TriPlaneField(self.planes.copy(), self.bbox_min.copy(),
                             self.bbox_max.copy())


class AvatarField(object):
    '''
    Separate canonical-space fields for the body and the (single, shared)
    cloth layer.
    '''

    def __init__(self, body_field, cloth_field):
        if body_field.feature_dim != cloth_field.feature_dim:
            raise ValueError('body and cloth fields must share a feature '
                             'length')
        self.body_field = body_field
        self.cloth_field = cloth_field

    def field_for(self, tag_name):
        return self.body_field if tag_name == 'Body' else self.cloth_field


def field_bbox_for(points, pad):
    '''
    Axis-aligned box around points grown by pad meters on every side.
    '''
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points.min(axis=0) - pad, points.max(axis=0) + pad


def init_field(res, channels, bbox_min, bbox_max, scale=1e-2, rng=None):
    '''
    Planes drawn from U(-scale, scale).
    '''
    if rng is None:
        rng = np.random.default_rng(0)
    planes = rng.uniform(-scale, scale, size=(3, res, res, channels))
    return TriPlaneField(planes, bbox_min, bbox_max)


def _corners(field, points):
    '''
    Lower node indices (N x 3) and fractional offsets (N x 3) per axis.
    '''
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u = (points - field.bbox_min) / (field.bbox_max - field.bbox_min)
    u = np.clip(u, 0.0, 1.0)
    g = u*(field.res - 1)
    i0 = np.minimum(np.floor(g).astype(np.int64), field.res - 2)
    return i0, g - i0


def _bilinear_weights(fa, fb):
    # node order: (0,0), (1,0), (0,1), (1,1)
    return np.stack([(1.0 - fa)*(1.0 - fb), fa*(1.0 - fb),
                     (1.0 - fa)*fb, fa*fb], axis=1)


_OFFSETS = ((0, 0), (1, 0), (0, 1), (1, 1))


def sample_batch(field, points):
    '''
    Features for N points, N x 3C, concatenated XY | XZ | YZ.
    '''
    i0, frac = _corners(field, points)
    n = i0.shape[0]
    C = field.channels
    out = np.empty((n, 3*C))
    for k, (a, b) in enumerate(PLANE_AXES):
        plane = field.planes[k]
        w = _bilinear_weights(frac[:, a], frac[:, b])
        acc = np.zeros((n, C))
        for m, (da, db) in enumerate(_OFFSETS):
            acc += w[:, m, None]*plane[i0[:, a] + da, i0[:, b] + db]
        out[:, k*C:(k+1)*C] = acc
    return out


def sample(field, p):
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError('query point must be finite')
    return sample_batch(field, p[None])[0]


def sample_backward_batch(field, points, upstream):
    '''
    Dense gradient of sum(upstream * sample_batch(field, points)) wrt the
    planes, 3 x res x res x C.
    '''
    i0, frac = _corners(field, points)
    C = field.channels
    upstream = np.asarray(upstream, dtype=np.float64).reshape(i0.shape[0],
                                                             3*C)
    dplanes = np.zeros_like(field.planes)
    for k, (a, b) in enumerate(PLANE_AXES):
        w = _bilinear_weights(frac[:, a], frac[:, b])
        g = upstream[:, k*C:(k+1)*C]
        for m, (da, db) in enumerate(_OFFSETS):
            np.add.at(dplanes[k], (i0[:, a] + da, i0[:, b] + db),
                      w[:, m, None]*g)
    return dplanes


def sample_backward(field, p, upstream):
    '''
    Gradients for one query as {(plane, i, j): C-vector} over the (at most
    12) nodes it touches. Nodes with zero bilinear weight are left out.
    '''
    i0, frac = _corners(field, np.asarray(p, dtype=np.float64).reshape(1, 3))
    C = field.channels
    upstream = np.asarray(upstream, dtype=np.float64).reshape(3*C)
    grads = {}
    for k, (a, b) in enumerate(PLANE_AXES):
        w = _bilinear_weights(frac[:, a], frac[:, b])[0]
        g = upstream[k*C:(k+1)*C]
        for m, (da, db) in enumerate(_OFFSETS):
            if w[m] == 0.0:
                continue
            key = (k, int(i0[0, a] + da), int(i0[0, b] + db))
            grads[key] = w[m]*g
    return grads
