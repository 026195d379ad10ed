#!/usr/bin/env python

'''
decoders.py - MLP heads that turn triplane features into per-splat
appearance, geometry corrections and deformation (skin weights plus
pose-corrective offsets), and the 6D rotation map.

Head layouts (slices of the raw head output):

    D_A, 49:         [0:48] SH coefficients (16 x 3, row major), [48] opacity
                     logit
    D_G, 12:         [0:3] dmu, [3:9] dr6, [9:12] dlog_scale
    D_D, J+27(J-1):  [0:J] skinning logits, [J:] pose offsets, 9(J-1) x 3

====================
MLP plumbing:
    MlpParams
    init_mlp
    mlp_forward
    mlp_backward

heads:
    DecoderSet
    init_decoders
    decode_appearance
    decode_geometry
    decode_deformation
    split_appearance
    split_geometry
    split_deformation

geometry:
    rot6d_to_matrix
    rot6d_to_matrix_batch
    rot6d_to_matrix_backward
    apply_geometry
    apply_geometry_batch
    apply_geometry_backward

simplex:
    softmax
    softmax_backward
====================
'''

import logging

import numpy as np
from scipy.special import expit

import shared_variables as sv
from gaussians import quat_to_matrix

LOGGER = logging.getLogger(__name__)

ROT6D_EPS = 1e-9
IDENTITY_R6 = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

APPEARANCE_DIM = sv.SH_NCOEFFS*3 + 1
GEOMETRY_DIM = 12


class DegenerateRotation(ValueError):
    pass


def deformation_dim(joint_count):
    return joint_count + 27*(joint_count - 1)


def pose_offset_rows(joint_count):
    return 9*(joint_count - 1)


####################
## MLP PARAMETERS ##
####################

class MlpParams(object):
    '''
    Affine layers, ReLU on the hidden layers, linear output.

    Args:
        weights (list of np.ndarray): layer k maps dim d_k to d_{k+1} and is
        stored d_k x d_{k+1}, so a batch X (N x d_0) goes through X @ W + b.
        biases (list of np.ndarray): one d_{k+1} vector per layer.
    '''

    def __init__(self, weights, biases, activation='relu'):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1)
                       for b in biases]
        self.activation = activation

        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError('need one bias per weight matrix')
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != b.shape[0]:
                raise ValueError('layer %d: weight %s does not match bias %s'
                                 % (k, w.shape, b.shape))
            if k and self.weights[k-1].shape[1] != w.shape[0]:
                raise ValueError('layer %d input dim %d does not chain from '
                                 'layer %d output dim %d'
                                 % (k, w.shape[0], k-1,
                                    self.weights[k-1].shape[1]))
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError('layer %d has non-finite parameters' % k)

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    @property
    def hidden(self):
        return [w.shape[1] for w in self.weights[:-1]]

    def named(self, prefix):
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out['%s.W%d' % (prefix, k)] = w
            out['%s.b%d' % (prefix, k)] = b
        return out

    def copy(self):
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)


def init_mlp(in_dim, hidden, out_dim, rng, head_bias=None):
    '''
    He-uniform hidden layers; the output layer starts at zero weights with
    bias head_bias (zeros if None), so the head initially emits a constant.
    '''
    dims = [in_dim] + list(hidden) + [out_dim]
    weights, biases = [], []
    for k in range(len(dims) - 1):
        if k == len(dims) - 2:
            weights.append(np.zeros((dims[k], dims[k+1])))
            b = (np.zeros(out_dim) if head_bias is None
                 else np.asarray(head_bias, dtype=np.float64).copy())
            biases.append(b)
        else:
            limit = np.sqrt(6.0/dims[k])
            weights.append(rng.uniform(-limit, limit,
                                       size=(dims[k], dims[k+1])))
            biases.append(np.zeros(dims[k+1]))
    return MlpParams(weights, biases)


def mlp_forward(params, x):
    '''
    Returns (output, cache). x may be one feature vector or an N x d batch.
    '''
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    if X.shape[1] != params.in_dim:
        raise ValueError('input has dim %d, MLP expects %d'
                         % (X.shape[1], params.in_dim))

    inputs, pre = [], []
    h = X
    nlayers = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if k < nlayers - 1 else z

    cache = {'inputs': inputs, 'pre': pre, 'single': single}
    return (h[0] if single else h), cache


def mlp_backward(params, cache, upstream):
    '''
    Returns (grads, dx): grads = {'W': [...], 'b': [...]} aligned with the
    parameter lists, dx shaped like the forward input.
    '''
    g = np.asarray(upstream, dtype=np.float64)
    if cache['single']:
        g = g[None]
    nlayers = len(params.weights)
    dW = [None]*nlayers
    db = [None]*nlayers
    for k in range(nlayers - 1, -1, -1):
        if k < nlayers - 1:
            g = g*(cache['pre'][k] > 0.0)
        dW[k] = cache['inputs'][k].T @ g
        db[k] = g.sum(axis=0)
        g = g @ params.weights[k].T
    dx = g[0] if cache['single'] else g
    return {'W': dW, 'b': db}, dx


#############
## SIMPLEX ##
#############

def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(w, dw):
    return w*(dw - np.sum(w*dw, axis=-1, keepdims=True))


#####################
## 6D ROTATION MAP ##
#####################

def _rot6d_parts(r6):
    r6 = np.asarray(r6, dtype=np.float64).reshape(-1, 6)
    a, b = r6[:, :3], r6[:, 3:]
    na = np.linalg.norm(a, axis=1)
    if np.any(na < ROT6D_EPS):
        raise DegenerateRotation('6D rotation with a zero first vector')
    c1 = a / na[:, None]
    s = np.sum(b*c1, axis=1)
    bp = b - s[:, None]*c1
    nb = np.linalg.norm(bp, axis=1)
    if np.any(nb < ROT6D_EPS):
        raise DegenerateRotation('6D rotation with parallel vectors')
    c2 = bp / nb[:, None]
    c3 = np.cross(c1, c2)
    return a, b, na, c1, s, nb, c2, c3


def rot6d_to_matrix_batch(r6):
    _, _, _, c1, _, _, c2, c3 = _rot6d_parts(r6)
    return np.stack([c1, c2, c3], axis=-1)


def rot6d_to_matrix(r6):
    '''
    Gram-Schmidt of the two 3-vectors in r6; the columns of the result are
    c1, c2 and c1 x c2.
    '''
    return rot6d_to_matrix_batch(np.asarray(r6).reshape(1, 6))[0]


def rot6d_to_matrix_backward(r6, dR):
    '''
    Gradient wrt r6 (N x 6) given dL/dR (N x 3 x 3).
    '''
    a, b, na, c1, s, nb, c2, c3 = _rot6d_parts(r6)
    dR = np.asarray(dR, dtype=np.float64).reshape(-1, 3, 3)
    g1, g2, g3 = dR[:, :, 0], dR[:, :, 1], dR[:, :, 2]

    dc1 = g1 + np.cross(c2, g3)
    dc2 = g2 + np.cross(g3, c1)

    dbp = (dc2 - c2*np.sum(c2*dc2, axis=1)[:, None]) / nb[:, None]
    db = dbp - c1*np.sum(c1*dbp, axis=1)[:, None]
    dc1 = dc1 - s[:, None]*dbp - np.sum(dbp*c1, axis=1)[:, None]*b

    da = (dc1 - c1*np.sum(c1*dc1, axis=1)[:, None]) / na[:, None]
    return np.concatenate([da, db], axis=1)


###########
## HEADS ##
###########

class GeometryCorrection(object):
    def __init__(self, dmu, dr6, ds):
        self.dmu = np.asarray(dmu, dtype=np.float64).reshape(3)
        self.dr6 = np.asarray(dr6, dtype=np.float64).reshape(6)
        self.ds = np.asarray(ds, dtype=np.float64).reshape(3)


class DeformationOutput(object):
    def __init__(self, w, dp):
        self.w = np.asarray(w, dtype=np.float64)
        self.dp = np.asarray(dp, dtype=np.float64)


class DecoderSet(object):
    '''
    The three heads D_A, D_G, D_D. They are shared by the body and cloth
    layers; only the triplanes are per layer.
    '''

    def __init__(self, D_A, D_G, D_D, joint_count):
        self.D_A = D_A
        self.D_G = D_G
        self.D_D = D_D
        self.joint_count = int(joint_count)
        if D_A.out_dim != APPEARANCE_DIM:
            raise ValueError('D_A must emit %d values' % APPEARANCE_DIM)
        if D_G.out_dim != GEOMETRY_DIM:
            raise ValueError('D_G must emit %d values' % GEOMETRY_DIM)
        if D_D.out_dim != deformation_dim(self.joint_count):
            raise ValueError('D_D must emit %d values for %d joints'
                             % (deformation_dim(self.joint_count),
                                self.joint_count))

    def heads(self):
        return (('D_A', self.D_A), ('D_G', self.D_G), ('D_D', self.D_D))

    def named(self):
        out = {}
        for name, head in self.heads():
            out.update(head.named(name))
        return out

    def copy(self):
        return DecoderSet(self.D_A.copy(), self.D_G.copy(), self.D_D.copy(),
                          self.joint_count)


def init_decoders(feature_dim, joint_count, hidden, rng):
    '''
    Zero-weight output layers everywhere; D_G's bias is the identity 6D
    rotation so the initial geometry correction is exactly no-op.
    '''
    geometry_bias = np.zeros(GEOMETRY_DIM)
    geometry_bias[3:9] = IDENTITY_R6
    return DecoderSet(
        init_mlp(feature_dim, hidden, APPEARANCE_DIM, rng),
        init_mlp(feature_dim, hidden, GEOMETRY_DIM, rng,
                 head_bias=geometry_bias),
        init_mlp(feature_dim, hidden, deformation_dim(joint_count), rng),
        joint_count
    )


def split_appearance(raw):
    raw = np.asarray(raw, dtype=np.float64)
    sh = raw[..., :48].reshape(raw.shape[:-1] + (sv.SH_NCOEFFS, 3))
    return sh, raw[..., 48]


def split_geometry(raw):
    raw = np.asarray(raw, dtype=np.float64)
    return raw[..., 0:3], raw[..., 3:9], raw[..., 9:12]


def split_deformation(raw, joint_count):
    raw = np.asarray(raw, dtype=np.float64)
    logits = raw[..., :joint_count]
    dp = raw[..., joint_count:].reshape(
        raw.shape[:-1] + (pose_offset_rows(joint_count), 3)
    )
    return logits, dp


def decode_appearance(params, f):
    '''
    Returns (sh 16 x 3, opacity) for one feature vector.
    '''
    raw, _ = mlp_forward(params, f)
    sh, logit = split_appearance(raw)
    return sh, float(expit(logit))


def decode_geometry(params, f):
    raw, _ = mlp_forward(params, f)
    return GeometryCorrection(*split_geometry(raw))


def decode_deformation(params, f, joint_count, prior_logits=None):
    '''
    Softmax skinning weights and the 9(J-1) x 3 pose offsets. prior_logits,
    if given, are added to the head's logits before the softmax.
    '''
    raw, _ = mlp_forward(params, f)
    logits, dp = split_deformation(raw, joint_count)
    if prior_logits is not None:
        logits = logits + prior_logits
    return DeformationOutput(softmax(logits), dp)


##############################
## APPLYING THE CORRECTIONS ##
##############################

def apply_geometry_batch(centers, R_canon, log_scales, dmu, dr6, ds):
    '''
    mu_def = mu + dmu, R_def = R_canon R(dr6), s_def = exp(log_scale) exp(ds).

    Returns (mu_def, R_def, s_def, R6) where R6 are the decoded rotations.
    '''
    R6 = rot6d_to_matrix_batch(dr6)
    mu_def = centers + dmu
    R_def = R_canon @ R6
    s_def = np.exp(log_scales)*np.exp(ds)
    return mu_def, R_def, s_def, R6


def apply_geometry(canon, corr):
    '''
    One GaussianPrimitive plus a GeometryCorrection.
    '''
    mu, R, s, _ = apply_geometry_batch(
        canon.center[None], quat_to_matrix(canon.rotation)[None],
        canon.log_scale[None], corr.dmu[None], corr.dr6[None],
        corr.ds[None]
    )
    return mu[0], R[0], s[0]


def apply_geometry_backward(R_canon, dr6, R6, s_def, dmu_def, dR_def,
                            ds_def):
    '''
    Returns (d_centers, d_R_canon, d_log_scales, d_dmu, d_dr6, d_ds).
    '''
    d_centers = dmu_def
    d_dmu = dmu_def
    d_R_canon = dR_def @ np.swapaxes(R6, 1, 2)
    dR6 = np.swapaxes(R_canon, 1, 2) @ dR_def
    d_dr6 = rot6d_to_matrix_backward(dr6, dR6)
    d_log = ds_def*s_def
    return d_centers, d_R_canon, d_log, d_dmu, d_dr6, d_log.copy()
