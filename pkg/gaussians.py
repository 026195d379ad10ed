#!/usr/bin/env python

'''
gaussians.py - splat primitives, spherical-harmonic appearance, and layer
initialization from meshes.

A GaussianLayer keeps its primitives as parallel arrays (struct of arrays) so
the renderer and optimizer work on whole layers at once. GaussianPrimitive is
the per-row view.

====================
primitive types:
    LayerTag
    GaussianPrimitive
    GaussianLayer

quaternion helpers:
    normalize_quats
    quat_to_matrix
    quat_to_matrix_backward
    shortest_arc_quat

appearance:
    sh_basis
    eval_sh
    eval_sh_batch
    eval_sh_backward
    rgb_to_sh_dc

initialization and I/O:
    init_from_mesh
    write_layer
    read_layer
====================
'''

import os
import enum
import logging
from datetime import datetime

import numpy as np
from scipy.special import expit, logit

import shared_variables as sv
from meshutils import InvalidMesh

LOGGER = logging.getLogger(__name__)


class LayerFormatError(ValueError):
    pass


class LayerTag(enum.Enum):
    Body = 0
    Cloth = 1
    Scene = 2


##########################
## QUATERNIONS (w,x,y,z) ##
##########################

def normalize_quats(quats):
    '''
    Renormalize-on-write for stored rotations. Quaternions with norm below
    QUAT_NORM_TOL carry no rotation and are rejected.
    '''
    quats = np.asarray(quats, dtype=np.float64)
    norms = np.linalg.norm(quats, axis=-1, keepdims=True)
    if np.any(norms < sv.QUAT_NORM_TOL):
        raise ValueError('cannot normalize a (near) zero quaternion')
    return quats/norms


def quat_to_matrix(quats):
    '''
    Rotation matrices for (..., 4) quaternions; the quaternions are
    normalized first, so the gradient in quat_to_matrix_backward goes through
    the normalization.
    '''
    q = normalize_quats(quats)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0*(y*y + z*z)
    R[..., 0, 1] = 2.0*(x*y - w*z)
    R[..., 0, 2] = 2.0*(x*z + w*y)
    R[..., 1, 0] = 2.0*(x*y + w*z)
    R[..., 1, 1] = 1.0 - 2.0*(x*x + z*z)
    R[..., 1, 2] = 2.0*(y*z - w*x)
    R[..., 2, 0] = 2.0*(x*z - w*y)
    R[..., 2, 1] = 2.0*(y*z + w*x)
    R[..., 2, 2] = 1.0 - 2.0*(x*x + y*y)
    return R


def quat_to_matrix_backward(quats, dR):
    '''
    Gradient of a scalar loss wrt the raw (unnormalized) quaternions, given
    dL/dR.
    '''
    quats = np.asarray(quats, dtype=np.float64)
    norm = np.linalg.norm(quats, axis=-1, keepdims=True)
    q = quats / norm
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    G = dR

    gw = 2.0*(-z*G[..., 0, 1] + y*G[..., 0, 2] + z*G[..., 1, 0]
              - x*G[..., 1, 2] - y*G[..., 2, 0] + x*G[..., 2, 1])
    gx = 2.0*(y*G[..., 0, 1] + z*G[..., 0, 2] + y*G[..., 1, 0]
              - 2.0*x*G[..., 1, 1] - w*G[..., 1, 2] + z*G[..., 2, 0]
              + w*G[..., 2, 1] - 2.0*x*G[..., 2, 2])
    gy = 2.0*(-2.0*y*G[..., 0, 0] + x*G[..., 0, 1] + w*G[..., 0, 2]
              + x*G[..., 1, 0] + z*G[..., 1, 2] - w*G[..., 2, 0]
              + z*G[..., 2, 1] - 2.0*y*G[..., 2, 2])
    gz = 2.0*(-2.0*z*G[..., 0, 0] - w*G[..., 0, 1] + x*G[..., 0, 2]
              + w*G[..., 1, 0] - 2.0*z*G[..., 1, 1] + y*G[..., 1, 2]
              + x*G[..., 2, 0] + y*G[..., 2, 1])

    dq = np.stack([gw, gx, gy, gz], axis=-1)
    # through q = quats/|quats|
    dq = (dq - q*np.sum(q*dq, axis=-1, keepdims=True)) / norm
    return dq


def shortest_arc_quat(normals):
    '''
    Quaternions rotating +z onto each (unit) normal along the shortest arc.
    A normal of exactly -z maps to a half turn about x.
    '''
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    q = np.stack([1.0 + n[:, 2], -n[:, 1], n[:, 0], np.zeros(len(n))],
                 axis=1)
    antipodal = np.linalg.norm(q, axis=1) < 1e-12
    q[antipodal] = np.array([0.0, 1.0, 0.0, 0.0])
    return normalize_quats(q)


#####################
## PRIMITIVE TYPES ##
#####################

class GaussianPrimitive(object):
    '''
    One anisotropic splat in canonical space.

    Args:
        center: 3-vector, meters.
        rotation: unit quaternion (w,x,y,z); renormalized on construction.
        log_scale: 3-vector, log-meters along the local axes.
        opacity_logit: scalar; opacity is sigmoid(opacity_logit).
        sh_coeffs: 16 x 3, degree-3 real SH per rgb channel.
    '''

    def __init__(self, center, rotation, log_scale, opacity_logit, sh_coeffs):
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.rotation = normalize_quats(
            np.asarray(rotation, dtype=np.float64).reshape(4))
        self.log_scale = np.asarray(log_scale, dtype=np.float64).reshape(3)
        self.opacity_logit = float(opacity_logit)
        self.sh_coeffs = np.asarray(sh_coeffs,
                                    dtype=np.float64).reshape(sv.SH_NCOEFFS, 3)

    @property
    def opacity(self):
        return float(expit(self.opacity_logit))

    @property
    def scale(self):
        return np.exp(self.log_scale)


class GaussianLayer(object):
    '''
    A tagged set of primitives, stored as parallel arrays.

    Args:
        tag (LayerTag): Body, Cloth or Scene.
        centers (N x 3), quats (N x 4), log_scales (N x 3),
        opacity_logits (N,), sh (N x 16 x 3).
        skin_binding (N int array or None): row index of each primitive into
        a SkinWeights matrix. Required for Body and Cloth, forbidden for Scene.
    '''

    def __init__(self, tag, centers, quats, log_scales, opacity_logits, sh,
                 skin_binding=None):

        self.tag = LayerTag(tag) if not isinstance(tag, LayerTag) else tag
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        n = self.centers.shape[0]
        self.quats = normalize_quats(
            np.asarray(quats, dtype=np.float64).reshape(n, 4))
        self.log_scales = np.asarray(log_scales,
                                     dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(opacity_logits,
                                         dtype=np.float64).reshape(n)
        self.sh = np.asarray(sh, dtype=np.float64).reshape(n, sv.SH_NCOEFFS, 3)

        if self.tag == LayerTag.Scene:
            if skin_binding is not None:
                raise ValueError('Scene layers carry no skin binding')
            self.skin_binding = None
        else:
            if skin_binding is None:
                raise ValueError('%s layers need a skin binding'
                                 % self.tag.name)
            self.skin_binding = np.asarray(skin_binding,
                                           dtype=np.int64).reshape(n)

    def __len__(self):
        return self.centers.shape[0]

    @property
    def opacities(self):
        return expit(self.opacity_logits)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def primitive(self, i):
        return GaussianPrimitive(self.centers[i], self.quats[i],
                                 self.log_scales[i], self.opacity_logits[i],
                                 self.sh[i])

    @classmethod
    def from_primitives(cls, tag, primitives, skin_binding=None):
        prims = list(primitives)
        return cls(tag,
                   [p.center for p in prims],
                   [p.rotation for p in prims],
                   [p.log_scale for p in prims],
                   [p.opacity_logit for p in prims],
                   [p.sh_coeffs for p in prims],
                   skin_binding=skin_binding)

    def copy(self):
        return GaussianLayer(
            self.tag, self.centers.copy(), self.quats.copy(),
            self.log_scales.copy(), self.opacity_logits.copy(), self.sh.copy(),
            skin_binding=(None if self.skin_binding is None
                          else self.skin_binding.copy())
        )

    def check_binding(self, n_rows):
        '''
        Binding indices must address rows of an n_rows-row SkinWeights.
        '''
        if self.skin_binding is None:
            return True
        if len(self) and (self.skin_binding.min() < 0 or
                          self.skin_binding.max() >= n_rows):
            raise ValueError('skin binding out of range for %d weight rows'
                             % n_rows)
        return True

    def enforce_invariants(self):
        '''
        Renormalize quaternions and cap scales below MAX_SCALE_METERS. Called
        after every optimizer write.
        '''
        self.quats = normalize_quats(self.quats)
        cap = np.log(sv.MAX_SCALE_METERS) - 1e-6
        np.minimum(self.log_scales, cap, out=self.log_scales)


############################
## SPHERICAL HARMONICS    ##
############################

def sh_basis(dirs, with_jacobian=False):
    '''
    Real SH basis up to degree 3 at unit directions dirs (N x 3).

    Returns:
        Y (N x 16), and if with_jacobian, dY/ddir (N x 16 x 3).
    '''
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x*x, y*y, z*z
    C1, C2, C3 = sv.SH_C1, sv.SH_C2, sv.SH_C3
    n = dirs.shape[0]

    Y = np.empty((n, sv.SH_NCOEFFS))
    Y[:, 0] = sv.SH_C0
    Y[:, 1] = -C1*y
    Y[:, 2] = C1*z
    Y[:, 3] = -C1*x
    Y[:, 4] = C2[0]*x*y
    Y[:, 5] = C2[1]*y*z
    Y[:, 6] = C2[2]*(2.0*zz - xx - yy)
    Y[:, 7] = C2[3]*x*z
    Y[:, 8] = C2[4]*(xx - yy)
    Y[:, 9] = C3[0]*y*(3.0*xx - yy)
    Y[:, 10] = C3[1]*x*y*z
    Y[:, 11] = C3[2]*y*(4.0*zz - xx - yy)
    Y[:, 12] = C3[3]*z*(2.0*zz - 3.0*xx - 3.0*yy)
    Y[:, 13] = C3[4]*x*(4.0*zz - xx - yy)
    Y[:, 14] = C3[5]*z*(xx - yy)
    Y[:, 15] = C3[6]*x*(xx - 3.0*yy)

    if not with_jacobian:
        return Y

    J = np.zeros((n, sv.SH_NCOEFFS, 3))
    J[:, 1, 1] = -C1
    J[:, 2, 2] = C1
    J[:, 3, 0] = -C1
    J[:, 4, 0], J[:, 4, 1] = C2[0]*y, C2[0]*x
    J[:, 5, 1], J[:, 5, 2] = C2[1]*z, C2[1]*y
    J[:, 6, 0], J[:, 6, 1], J[:, 6, 2] = -2.0*C2[2]*x, -2.0*C2[2]*y, 4.0*C2[2]*z
    J[:, 7, 0], J[:, 7, 2] = C2[3]*z, C2[3]*x
    J[:, 8, 0], J[:, 8, 1] = 2.0*C2[4]*x, -2.0*C2[4]*y
    J[:, 9, 0] = C3[0]*6.0*x*y
    J[:, 9, 1] = C3[0]*(3.0*xx - 3.0*yy)
    J[:, 10, 0], J[:, 10, 1], J[:, 10, 2] = (C3[1]*y*z, C3[1]*x*z,
                                             C3[1]*x*y)
    J[:, 11, 0] = C3[2]*(-2.0*x*y)
    J[:, 11, 1] = C3[2]*(4.0*zz - xx - 3.0*yy)
    J[:, 11, 2] = C3[2]*8.0*y*z
    J[:, 12, 0] = C3[3]*(-6.0*x*z)
    J[:, 12, 1] = C3[3]*(-6.0*y*z)
    J[:, 12, 2] = C3[3]*(6.0*zz - 3.0*xx - 3.0*yy)
    J[:, 13, 0] = C3[4]*(4.0*zz - 3.0*xx - yy)
    J[:, 13, 1] = C3[4]*(-2.0*x*y)
    J[:, 13, 2] = C3[4]*8.0*x*z
    J[:, 14, 0] = C3[5]*2.0*x*z
    J[:, 14, 1] = C3[5]*(-2.0*y*z)
    J[:, 14, 2] = C3[5]*(xx - yy)
    J[:, 15, 0] = C3[6]*(3.0*xx - 3.0*yy)
    J[:, 15, 1] = C3[6]*(-6.0*x*y)

    return Y, J


def eval_sh_batch(sh, dirs):
    '''
    Colors of N splats seen along unit directions dirs.

    Returns:
        (rgb (N x 3) clamped to [0,1], raw (N x 3) before clamping).
    '''
    sh = np.asarray(sh, dtype=np.float64).reshape(-1, sv.SH_NCOEFFS, 3)
    Y = sh_basis(dirs)
    raw = np.einsum('nk,nkc->nc', Y, sh) + sv.SH_DC_OFFSET
    return np.clip(raw, 0.0, 1.0), raw


def eval_sh(sh_coeffs, view_dir):
    '''
    rgb in [0,1] for one 16 x 3 coefficient block and a unit view direction.
    '''
    view_dir = np.asarray(view_dir, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-6:
        raise ValueError('view_dir must be a unit vector')
    rgb, _ = eval_sh_batch(np.asarray(sh_coeffs)[None], view_dir[None])
    return rgb[0]


def eval_sh_backward(sh, dirs, raw, drgb):
    '''
    Gradients of eval_sh_batch. Channels clamped in the forward pass pass no
    gradient.

    Returns:
        (dsh (N x 16 x 3), ddirs (N x 3)) where ddirs is wrt the unit
        directions as given.
    '''
    sh = np.asarray(sh, dtype=np.float64).reshape(-1, sv.SH_NCOEFFS, 3)
    Y, J = sh_basis(dirs, with_jacobian=True)
    g = np.where((raw > 0.0) & (raw < 1.0), drgb, 0.0)
    dsh = Y[:, :, None] * g[:, None, :]
    dY = np.einsum('nkc,nc->nk', sh, g)
    ddirs = np.einsum('nk,nkd->nd', dY, J)
    return dsh, ddirs


def rgb_to_sh_dc(rgb):
    '''
    DC coefficients whose evaluation (with the +0.5 offset) gives rgb.
    '''
    return (np.asarray(rgb, dtype=np.float64) - sv.SH_DC_OFFSET) / sv.SH_C0


####################
## INITIALIZATION ##
####################

def init_from_mesh(mesh, tag):
    '''
    One primitive per mesh vertex.

    center = vertex; rotation = shortest arc from +z to the vertex normal;
    tangential scales = half the mean incident-edge length, normal scale =
    NORMAL_SCALE_RATIO times that; opacity = INIT_OPACITY; SH DC from the
    vertex color (or INIT_GRAY), higher bands zero.

    Body and Cloth layers are bound to the mesh-aligned weight rows
    (binding[i] = i).
    '''
    tag = LayerTag(tag) if not isinstance(tag, LayerTag) else tag
    n = mesh.n_vertices
    if n < 1:
        raise InvalidMesh('cannot initialize a layer from an empty mesh')

    normals = np.asarray(mesh.normals, dtype=np.float64)
    nnorm = np.linalg.norm(normals, axis=1)
    if np.any(nnorm <= 1e-12) or not np.all(np.isfinite(nnorm)):
        raise InvalidMesh('mesh has %d zero-length normals'
                          % np.sum(~(nnorm > 1e-12)))
    normals = normals / nnorm[:, None]

    mean_edge = mesh.mean_incident_edge_length()
    if not np.all(np.isfinite(mean_edge)) or np.any(mean_edge <= 0):
        raise InvalidMesh('every vertex needs an incident edge of '
                          'nonzero length')

    tangential = 0.5*mean_edge
    scales = np.stack([tangential, tangential,
                       sv.NORMAL_SCALE_RATIO*tangential], axis=1)

    quats = shortest_arc_quat(normals)

    if mesh.colors is not None:
        rgb = mesh.colors
    else:
        rgb = np.tile(np.array(sv.INIT_GRAY), (n, 1))
    sh = np.zeros((n, sv.SH_NCOEFFS, 3))
    sh[:, 0, :] = rgb_to_sh_dc(rgb)

    opacity_logits = np.full(n, float(logit(sv.INIT_OPACITY)))

    binding = None if tag == LayerTag.Scene else np.arange(n, dtype=np.int64)

    return GaussianLayer(tag, mesh.vertices.copy(), quats, np.log(scales),
                         opacity_logits, sh, skin_binding=binding)


###################
## LGS1 LAYER I/O ##
###################

_HEADER_DTYPE = np.dtype([('magic', 'S4'), ('tag', 'u1'), ('count', '<u4')])
_RECORD_DTYPE = np.dtype([('center', '<f4', (3,)),
                          ('quat', '<f4', (4,)),
                          ('log_scale', '<f4', (3,)),
                          ('opacity_logit', '<f4'),
                          ('sh', '<f4', (3*sv.SH_NCOEFFS,))])


def write_layer(path, layer):
    '''
    Writes the little-endian LGS1 layer file: header {magic, tag u8,
    count u32} then 59 float32 per primitive.
    '''
    header = np.zeros(1, dtype=_HEADER_DTYPE)
    header['magic'] = sv.LAYER_MAGIC
    header['tag'] = layer.tag.value
    header['count'] = len(layer)

    records = np.zeros(len(layer), dtype=_RECORD_DTYPE)
    records['center'] = layer.centers
    records['quat'] = layer.quats
    records['log_scale'] = layer.log_scales
    records['opacity_logit'] = layer.opacity_logits
    records['sh'] = layer.sh.reshape(len(layer), 3*sv.SH_NCOEFFS)

    with open(path, 'wb') as outfd:
        outfd.write(header.tobytes())
        outfd.write(records.tobytes())

    LOGGER.debug('%sZ: wrote %d %s splats to %s' %
                 (datetime.utcnow().isoformat(), len(layer), layer.tag.name,
                  path))
    return path


def read_layer(path):
    '''
    Reads an LGS1 layer file. Body/Cloth layers get the identity binding.
    '''
    if not os.path.exists(path):
        raise LayerFormatError('layer file does not exist: %s' % path)

    with open(path, 'rb') as infd:
        payload = infd.read()

    if len(payload) < _HEADER_DTYPE.itemsize:
        raise LayerFormatError('%s: truncated header' % path)
    header = np.frombuffer(payload[:_HEADER_DTYPE.itemsize],
                           dtype=_HEADER_DTYPE)[0]
    if header['magic'] != sv.LAYER_MAGIC:
        raise LayerFormatError('%s: bad magic %r' % (path, header['magic']))
    count = int(header['count'])
    body = payload[_HEADER_DTYPE.itemsize:]
    if len(body) != count*_RECORD_DTYPE.itemsize:
        raise LayerFormatError('%s: expected %d primitives, payload has %d '
                               'bytes' % (path, count, len(body)))
    try:
        tag = LayerTag(int(header['tag']))
    except ValueError:
        raise LayerFormatError('%s: unknown layer tag %d'
                               % (path, header['tag']))

    records = np.frombuffer(body, dtype=_RECORD_DTYPE)
    binding = None if tag == LayerTag.Scene else np.arange(count)

    return GaussianLayer(tag,
                         records['center'].astype(np.float64),
                         records['quat'].astype(np.float64),
                         records['log_scale'].astype(np.float64),
                         records['opacity_logit'].astype(np.float64),
                         records['sh'].astype(np.float64).reshape(
                             count, sv.SH_NCOEFFS, 3),
                         skin_binding=binding)
