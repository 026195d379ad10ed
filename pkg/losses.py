#!/usr/bin/env python

'''
losses.py - training objectives with analytic gradients.

Every loss is unweighted; total_loss applies the lambda weights exactly once.
Each loss has a *_grad companion returning (value, gradient(s)).

====================
configuration:
    LossConfig

robust Chamfer:
    geman_mcclure
    SpaceHash
    nearest_neighbors
    chamfer_sim_loss
    chamfer_sim_loss_grad

regularizers:
    arap_loss
    arap_loss_grad
    mask_loss
    mask_loss_grad
    cloth_lbs_loss
    cloth_lbs_loss_grad

image terms:
    l1_loss
    l1_loss_grad
    ssim_map
    ssim_loss
    ssim_loss_grad
    register_lpips
    clear_lpips
    lpips_loss_grad

combination:
    LOSS_TERMS
    total_loss
====================
'''

import logging

import numpy as np
from scipy.signal import convolve2d

from configutils import InvalidConfig

LOGGER = logging.getLogger(__name__)

# switch from brute-force to the hash grid above this many points
BRUTE_FORCE_MAX = 5000
_BRUTE_CHUNK = 512

# order of the loss CSV columns and of the weighted sum
LOSS_TERMS = ('l1', 'ssim', 'lpips', 'cloth_lbs', 'sim', 'arap', 'mask')
LAMBDA_KEYS = {'l1': 'lambda_l1', 'ssim': 'lambda_ssim',
               'lpips': 'lambda_lpips', 'cloth_lbs': 'lambda_cloth_lbs',
               'sim': 'lambda_sim', 'arap': 'lambda_arap',
               'mask': 'lambda_mask'}


class EmptyPointSet(ValueError):
    pass


class EmptyEdgeSet(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class LossConfig(object):
    '''
    Loss weights and loss hyperparameters, read from the 'losses' config
    section.
    '''

    def __init__(self, lambda_l1=0.8, lambda_ssim=0.2, lambda_lpips=1.0,
                 lambda_sim=1.0, lambda_arap=0.5, lambda_mask=1.0,
                 lambda_cloth_lbs=1000.0, gm_scale=0.05, ssim_window=11,
                 ssim_c1=0.01**2, ssim_c2=0.03**2):

        self.lambda_l1 = float(lambda_l1)
        self.lambda_ssim = float(lambda_ssim)
        self.lambda_lpips = float(lambda_lpips)
        self.lambda_sim = float(lambda_sim)
        self.lambda_arap = float(lambda_arap)
        self.lambda_mask = float(lambda_mask)
        self.lambda_cloth_lbs = float(lambda_cloth_lbs)
        self.gm_scale = float(gm_scale)
        self.ssim_window = int(ssim_window)
        self.ssim_c1 = float(ssim_c1)
        self.ssim_c2 = float(ssim_c2)

        for term, key in LAMBDA_KEYS.items():
            if getattr(self, key) < 0:
                raise InvalidConfig('%s must be nonnegative' % key)
        if self.gm_scale <= 0:
            raise InvalidConfig('gm_scale must be positive')
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise InvalidConfig('ssim_window must be a positive odd integer')
        if self.ssim_c1 <= 0 or self.ssim_c2 <= 0:
            raise InvalidConfig('ssim_c1 and ssim_c2 must be positive')

    @classmethod
    def from_config(cls, cfg):
        section = cfg['losses'] if 'losses' in cfg else cfg
        return cls(**section)

    def weight(self, term):
        return getattr(self, LAMBDA_KEYS[term])


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatch('%s: shapes %s and %s differ'
                            % (what, a.shape, b.shape))


###################
## ROBUST CHAMFER ##
###################

def geman_mcclure(x, sigma):
    '''
    rho(x) = x^2 / (x^2 + sigma^2).
    '''
    if sigma <= 0:
        raise InvalidConfig('Geman-McClure scale must be positive, got %r'
                            % sigma)
    x = np.asarray(x, dtype=np.float64)
    x2 = x*x
    return x2 / (x2 + sigma*sigma)


def _sqdist(query, ref):
    '''
    Pairwise squared distances, len(query) x len(ref). Both the brute-force
    and hash-grid searches go through here so their distances agree bitwise.
    '''
    d0 = query[:, None, 0] - ref[None, :, 0]
    d1 = query[:, None, 1] - ref[None, :, 1]
    d2 = query[:, None, 2] - ref[None, :, 2]
    return d0*d0 + d1*d1 + d2*d2


class SpaceHash(object):
    '''
    Uniform grid over a reference point set. Cells are keyed by their integer
    coordinates and hold ascending point indices.
    '''

    def __init__(self, points, cell_size=None):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = self.points.shape[0]
        self.minima = self.points.min(axis=0)
        spans = self.points.max(axis=0) - self.minima

        if cell_size is None:
            # about two points per cell for volume-filling sets
            extent = max(float(spans.max()), 1e-9)
            cell_size = extent*min((2.0/n)**(1.0/3.0), 1.0)
        self.div = float(cell_size)
        self.inv_div = 1.0/self.div

        spaces = self.to_space(self.points)
        self.sizes = spaces.max(axis=0) + 1
        self.cells = {}
        for i_point, space in enumerate(map(tuple, spaces)):
            self.cells.setdefault(space, []).append(i_point)
        self.cells = {k: np.array(v, dtype=np.int64)
                      for k, v in self.cells.items()}

    def to_space(self, points):
        return np.floor((points - self.minima)*self.inv_div).astype(np.int64)

    def shell(self, space, r):
        '''
        Point indices in the occupied cells at Chebyshev distance exactly r.
        '''
        found = []
        s0, s1, s2 = space
        ranges = [range(max(-r, -s), min(r, size - 1 - s) + 1)
                  for s, size in zip(space, self.sizes)]
        for a in ranges[0]:
            for b in ranges[1]:
                for c in ranges[2]:
                    if max(abs(a), abs(b), abs(c)) != r:
                        continue
                    cell = self.cells.get((s0+a, s1+b, s2+c))
                    if cell is not None:
                        found.append(cell)
        return found

    def ring_bounds(self, space):
        '''
        First ring that can touch the grid, and the ring that covers all of
        it.
        '''
        space = np.asarray(space)
        below = np.maximum(-space, 0)
        above = np.maximum(space - (self.sizes - 1), 0)
        r_min = int(np.max(np.maximum(below, above)))
        r_max = int(np.max(np.maximum(np.abs(space),
                                      np.abs(space - (self.sizes - 1)))))
        return r_min, r_max

    def nearest(self, query):
        '''
        Index of and squared distance to the nearest reference point for
        every query; ties go to the lowest index.
        '''
        query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
        nq = query.shape[0]
        idx = np.empty(nq, dtype=np.int64)
        d2 = np.empty(nq)

        qspaces = self.to_space(query)
        groups = {}
        for i, space in enumerate(map(tuple, qspaces)):
            groups.setdefault(space, []).append(i)

        for space, members in groups.items():
            members = np.array(members, dtype=np.int64)
            r, r_max = self.ring_bounds(space)
            candidates = []
            while True:
                candidates.extend(self.shell(space, r))
                if candidates:
                    cand = np.sort(np.concatenate(candidates))
                    dist = _sqdist(query[members], self.points[cand])
                    best = np.argmin(dist, axis=1)
                    best_d2 = dist[np.arange(len(members)), best]
                    # every point within r cells' width has been seen
                    reach = r*self.div*(1.0 - 1e-9)
                    if r >= r_max or np.all(best_d2 < reach*reach):
                        idx[members] = cand[best]
                        d2[members] = best_d2
                        break
                elif r >= r_max:
                    raise EmptyPointSet('spatial hash found no points')
                r += 1

        return idx, d2


def nearest_neighbors(query, ref, method='auto'):
    '''
    For each query point, (index of nearest ref point, squared distance).
    Ties resolve to the lowest ref index in both search methods.

    method: 'brute', 'hash', or 'auto' (hash above BRUTE_FORCE_MAX points).
    '''
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    if ref.shape[0] == 0:
        raise EmptyPointSet('nearest-neighbor search over an empty set')
    if query.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)

    if method == 'auto':
        method = ('hash' if max(query.shape[0], ref.shape[0]) > BRUTE_FORCE_MAX
                  else 'brute')

    if method == 'hash':
        return SpaceHash(ref).nearest(query)
    elif method != 'brute':
        raise ValueError('unknown nearest-neighbor method %r' % method)

    idx = np.empty(query.shape[0], dtype=np.int64)
    d2 = np.empty(query.shape[0])
    for start in range(0, query.shape[0], _BRUTE_CHUNK):
        stop = start + _BRUTE_CHUNK
        dist = _sqdist(query[start:stop], ref)
        best = np.argmin(dist, axis=1)
        idx[start:stop] = best
        d2[start:stop] = dist[np.arange(dist.shape[0]), best]
    return idx, d2


def _gm_scale(cfg):
    if isinstance(cfg, LossConfig):
        return cfg.gm_scale
    return float(cfg)


def chamfer_sim_loss_grad(pred, gt, cfg, method='auto'):
    '''
    Robust bidirectional Chamfer distance and its gradients.

    Returns:
        (value, dpred, dgt)
    '''
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise EmptyPointSet('Chamfer loss needs two non-empty point sets')
    sigma = _gm_scale(cfg)
    if sigma <= 0:
        raise InvalidConfig('gm_scale must be positive')
    s2 = sigma*sigma

    nn_pg, d2_pg = nearest_neighbors(pred, gt, method=method)
    nn_gp, d2_gp = nearest_neighbors(gt, pred, method=method)

    forward = np.mean(d2_pg/(d2_pg + s2))
    backward = np.mean(d2_gp/(d2_gp + s2))
    value = 0.5*(forward + backward)

    dpred = np.zeros_like(pred)
    dgt = np.zeros_like(gt)

    # d rho / d (d^2) = s2 / (d^2 + s2)^2, d (d^2)/dp = 2 (p - q)
    c_pg = (0.5/pred.shape[0])*s2/(d2_pg + s2)**2
    v_pg = 2.0*c_pg[:, None]*(pred - gt[nn_pg])
    dpred += v_pg
    np.add.at(dgt, nn_pg, -v_pg)

    c_gp = (0.5/gt.shape[0])*s2/(d2_gp + s2)**2
    v_gp = 2.0*c_gp[:, None]*(gt - pred[nn_gp])
    dgt += v_gp
    np.add.at(dpred, nn_gp, -v_gp)

    return value, dpred, dgt


def chamfer_sim_loss(pred, gt, cfg, method='auto'):
    return chamfer_sim_loss_grad(pred, gt, cfg, method=method)[0]


##################
## REGULARIZERS ##
##################

def arap_loss_grad(vertices, edges):
    '''
    Population variance of the edge lengths and its gradient wrt the
    vertices. Lengths are sorted before reducing so the value does not
    depend on edge order.
    '''
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.shape[0] == 0:
        raise EmptyEdgeSet('ARAP loss needs at least one edge')

    d = vertices[edges[:, 0]] - vertices[edges[:, 1]]
    lengths = np.sqrt(np.sum(d*d, axis=1))
    ordered = np.sort(lengths)
    mean = np.mean(ordered)
    value = np.mean((ordered - mean)**2)

    nE = edges.shape[0]
    dl = 2.0*(lengths - mean)/nE
    safe = np.where(lengths > 0, lengths, 1.0)
    dd = (dl/safe)[:, None]*d
    dd[lengths == 0] = 0.0
    dverts = np.zeros_like(vertices)
    np.add.at(dverts, edges[:, 0], dd)
    np.add.at(dverts, edges[:, 1], -dd)
    return value, dverts


def arap_loss(vertices, edges):
    return arap_loss_grad(vertices, edges)[0]


def mask_loss_grad(rendered, gt):
    '''
    Per-pixel mean squared error between the rendered matte and the binary
    mask; gradient wrt the rendered matte.
    '''
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same_shape(rendered, gt, 'mask loss')
    diff = rendered - gt
    return np.mean(diff*diff), 2.0*diff/diff.size


def mask_loss(rendered, gt):
    return mask_loss_grad(rendered, gt)[0]


def cloth_lbs_loss_grad(W_pred, W_gt):
    '''
    Mean over all N x J entries of the squared weight difference.
    '''
    W_pred = getattr(W_pred, 'matrix', W_pred)
    W_gt = getattr(W_gt, 'matrix', W_gt)
    W_pred = np.asarray(W_pred, dtype=np.float64)
    W_gt = np.asarray(W_gt, dtype=np.float64)
    _check_same_shape(W_pred, W_gt, 'cloth LBS loss')
    diff = W_pred - W_gt
    return np.mean(diff*diff), 2.0*diff/diff.size


def cloth_lbs_loss(W_pred, W_gt):
    return cloth_lbs_loss_grad(W_pred, W_gt)[0]


#################
## IMAGE TERMS ##
#################

def l1_loss_grad(img, gt):
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same_shape(img, gt, 'L1 loss')
    diff = img - gt
    return np.mean(np.abs(diff)), np.sign(diff)/diff.size


def l1_loss(img, gt):
    return l1_loss_grad(img, gt)[0]


def _as_channels(img):
    img = np.asarray(img, dtype=np.float64)
    return img[:, :, None] if img.ndim == 2 else img


def _effective_window(shape, window):
    w = min(int(window), shape[0], shape[1])
    return w if w % 2 == 1 else w - 1


def _box(x, w):
    return convolve2d(x, np.full((w, w), 1.0/(w*w)), mode='valid')


def _box_adjoint(g, w):
    return convolve2d(g, np.full((w, w), 1.0/(w*w)), mode='full')


def _ssim_parts(img, gt, window, c1, c2):
    x = _as_channels(img)
    y = _as_channels(gt)
    w = _effective_window(x.shape, window)
    parts = []
    for ch in range(x.shape[2]):
        xc, yc = x[:, :, ch], y[:, :, ch]
        mx, my = _box(xc, w), _box(yc, w)
        mxx, myy, mxy = _box(xc*xc, w), _box(yc*yc, w), _box(xc*yc, w)
        vx, vy, cxy = mxx - mx*mx, myy - my*my, mxy - mx*my
        A1 = 2.0*mx*my + c1
        A2 = 2.0*cxy + c2
        B1 = mx*mx + my*my + c1
        B2 = vx + vy + c2
        parts.append((mx, my, A1, A2, B1, B2, A1*A2/(B1*B2)))
    return w, parts


def ssim_map(img, gt, window=11, c1=0.01**2, c2=0.03**2):
    '''
    SSIM over every fully interior box window, one map per channel
    (Hv x Wv x C).
    '''
    _, parts = _ssim_parts(img, gt, window, c1, c2)
    return np.stack([p[-1] for p in parts], axis=-1)


def ssim_loss_grad(img, gt, cfg=None):
    '''
    1 - mean SSIM, and its gradient wrt img.
    '''
    cfg = cfg or LossConfig()
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same_shape(img, gt, 'SSIM loss')

    w, parts = _ssim_parts(img, gt, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2)
    count = sum(p[-1].size for p in parts)
    value = 1.0 - sum(np.sum(p[-1]) for p in parts)/count

    x = _as_channels(img)
    y = _as_channels(gt)
    dimg = np.zeros_like(x)
    dS = -1.0/count
    for ch, (mx, my, A1, A2, B1, B2, S) in enumerate(parts):
        B = B1*B2
        # S as a function of the box moments mean(x), mean(x^2), mean(xy)
        g_mx = dS*((2.0*my*A2 - 2.0*my*A1)/B - S*(2.0*mx/B1 - 2.0*mx/B2))
        g_mxx = dS*(-S/B2)
        g_mxy = dS*(2.0*A1/B)
        dimg[:, :, ch] = (_box_adjoint(g_mx, w) +
                          2.0*x[:, :, ch]*_box_adjoint(g_mxx, w) +
                          y[:, :, ch]*_box_adjoint(g_mxy, w))

    return value, dimg.reshape(img.shape)


def ssim_loss(img, gt, cfg=None):
    cfg = cfg or LossConfig()
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same_shape(img, gt, 'SSIM loss')
    return 1.0 - float(np.mean(ssim_map(img, gt, cfg.ssim_window,
                                        cfg.ssim_c1, cfg.ssim_c2)))


_LPIPS_FN = None


def register_lpips(fn):
    '''
    Registers fn(img, gt) -> (value, dimg) as the perceptual term.
    '''
    global _LPIPS_FN
    _LPIPS_FN = fn


def clear_lpips():
    global _LPIPS_FN
    _LPIPS_FN = None


def lpips_loss_grad(img, gt):
    '''
    The registered perceptual term, or (0, zeros) when none is registered.
    '''
    if _LPIPS_FN is None:
        return 0.0, np.zeros_like(np.asarray(img, dtype=np.float64))
    value, grad = _LPIPS_FN(img, gt)
    return float(value), np.asarray(grad, dtype=np.float64)


#################
## COMBINATION ##
#################

def total_loss(parts, cfg):
    '''
    Weighted sum of the unweighted loss parts.

    Args:
        parts (dict): term name -> value; missing terms count as zero.
        cfg (LossConfig)

    Returns:
        (total, weights) where weights maps every term to the factor its
        gradient must be scaled by.
    '''
    weights = {term: cfg.weight(term) for term in LOSS_TERMS}
    v = {term: float(parts.get(term, 0.0)) for term in LOSS_TERMS}
    rec = (weights['l1']*v['l1'] + weights['ssim']*v['ssim'] +
           weights['lpips']*v['lpips'])
    total = (rec + weights['cloth_lbs']*v['cloth_lbs'] +
             weights['sim']*v['sim'] + weights['arap']*v['arap'] +
             weights['mask']*v['mask'])
    return total, weights
