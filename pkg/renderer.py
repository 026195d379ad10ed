#!/usr/bin/env python

'''
renderer.py - EWA projection of 3D Gaussians, depth-sorted alpha compositing
with an analytic backward pass, and the depth-aware body/cloth/scene passes.

Conventions: OpenCV cameras (x right, y down, z forward); pixel (row i,
column j) has its center at image coordinates (x=j, y=i). Splats are sorted
once per image by camera depth, ties kept in input order.

Rasterization runs per TILE_SIZE x TILE_SIZE tile. A splat is binned into a
tile when its opacity-aware footprint box overlaps the tile; outside that box
its alpha is provably below the skip threshold, so the tiled and naive paths
produce identical images.

====================
cameras:
    Camera
    camera_center
    look_at_camera
    write_cameras_json
    read_cameras_json

world-space Gaussians:
    WorldGaussians
    world_from_layer
    concat_world

projection and color:
    project_many
    project_backward
    project
    splat_colors
    splat_colors_backward

rasterization:
    SplatSet
    RenderOutput
    rasterize
    rasterize_backward

render passes:
    RenderSettings
    render_gaussians
    render_gaussians_backward
    render_base
    render_cloth
    render_matte
    render_scene_only
    composite_final
    composite_final_backward
====================
'''

import os
import json
import logging
from datetime import datetime
from multiprocessing.pool import ThreadPool

import numpy as np
from scipy.spatial.transform import Rotation

import shared_variables as sv
from gaussians import quat_to_matrix, eval_sh_batch, eval_sh_backward

LOGGER = logging.getLogger(__name__)


#############
## CAMERAS ##
#############

class Camera(object):
    '''
    Pinhole camera.

    Args:
        fx, fy, cx, cy: intrinsics in pixels.
        R (3 x 3), t (3,): world-to-camera rotation and translation,
        x_cam = R x_world + t.
        width, height: image size in pixels.
        near: near clipping depth in meters.
    '''

    def __init__(self, fx, fy, cx, cy, R, t, width, height, near=0.01):
        self.fx, self.fy = float(fx), float(fy)
        self.cx, self.cy = float(cx), float(cy)
        self.R = np.asarray(R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(t, dtype=np.float64).reshape(3)
        self.width, self.height = int(width), int(height)
        self.near = float(near)

        if self.fx <= 0 or self.fy <= 0:
            raise ValueError('focal lengths must be positive')
        if self.near <= 0:
            raise ValueError('near plane must be positive')
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError('principal point (%.2f, %.2f) is outside the '
                             '%dx%d image' % (self.cx, self.cy, self.width,
                                              self.height))

    @property
    def size(self):
        return (self.height, self.width)


def camera_center(camera):
    return -camera.R.T @ camera.t


def look_at_camera(eye, target, width, height, focal, near=0.01,
                   up=(0.0, 1.0, 0.0)):
    '''
    Camera at eye looking at target with world up `up`; principal point at
    the image center.
    '''
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Camera(focal, focal, width/2.0, height/2.0, R, -R @ eye,
                  width, height, near=near)


def _camera_to_dict(camera):
    x, y, z, w = Rotation.from_matrix(camera.R).as_quat()
    return {'fx': camera.fx, 'fy': camera.fy, 'cx': camera.cx,
            'cy': camera.cy,
            'w2c_rotation_quat': [float(w), float(x), float(y), float(z)],
            'w2c_translation': camera.t.tolist(),
            'width': camera.width, 'height': camera.height,
            'near': camera.near}


def _camera_from_dict(d):
    R = quat_to_matrix(np.array(d['w2c_rotation_quat'], dtype=np.float64))
    return Camera(d['fx'], d['fy'], d['cx'], d['cy'], R,
                  d['w2c_translation'], d['width'], d['height'],
                  near=d['near'])


def write_cameras_json(path, cameras):
    '''
    Writes a JSON list of {fx, fy, cx, cy, w2c_rotation_quat,
    w2c_translation, width, height, near}.
    '''
    with open(path, 'w') as outfd:
        json.dump([_camera_to_dict(c) for c in cameras], outfd, indent=1)
    return path


def read_cameras_json(path):
    if not os.path.exists(path):
        raise ValueError('camera file does not exist: %s' % path)
    with open(path) as infd:
        payload = json.load(infd)
    if isinstance(payload, dict):
        payload = [payload]
    return [_camera_from_dict(d) for d in payload]


############################
## WORLD-SPACE GAUSSIANS  ##
############################

class WorldGaussians(object):
    '''
    Gaussians ready to render: centers mu (N x 3), linear frames R
    (N x 3 x 3, rotation times any blended skinning matrix), per-axis scales
    (N x 3), opacities in (0,1) (N,), SH coefficients (N x 16 x 3).
    '''

    def __init__(self, mu, R, scales, opacity, sh):
        self.mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        n = self.mu.shape[0]
        self.R = np.asarray(R, dtype=np.float64).reshape(n, 3, 3)
        self.scales = np.asarray(scales, dtype=np.float64).reshape(n, 3)
        self.opacity = np.asarray(opacity, dtype=np.float64).reshape(n)
        self.sh = np.asarray(sh, dtype=np.float64).reshape(n, sv.SH_NCOEFFS, 3)

    def __len__(self):
        return self.mu.shape[0]


def world_from_layer(layer):
    '''
    Direct (un-posed, un-decoded) world state of a canonical layer.
    '''
    return WorldGaussians(layer.centers, quat_to_matrix(layer.quats),
                          np.exp(layer.log_scales), layer.opacities,
                          layer.sh)


def empty_world():
    return WorldGaussians(np.zeros((0, 3)), np.zeros((0, 3, 3)),
                          np.zeros((0, 3)), np.zeros(0),
                          np.zeros((0, sv.SH_NCOEFFS, 3)))


def concat_world(parts):
    parts = [p for p in parts if p is not None]
    if not parts:
        return empty_world()
    return WorldGaussians(np.concatenate([p.mu for p in parts]),
                          np.concatenate([p.R for p in parts]),
                          np.concatenate([p.scales for p in parts]),
                          np.concatenate([p.opacity for p in parts]),
                          np.concatenate([p.sh for p in parts]))


def split_world_grads(grads, sizes):
    '''
    Splits a concatenated gradient dict back into per-part dicts.
    '''
    out = []
    start = 0
    for n in sizes:
        out.append({k: v[start:start+n] for k, v in grads.items()})
        start += n
    return out


###########################
## PROJECTION AND COLOR  ##
###########################

def project_many(mu, R, scales, camera):
    '''
    EWA projection of N Gaussians.

    Returns:
        (visible, mean2d, cov2d, depth, cache): visible is a boolean mask;
        mean2d, cov2d and depth cover the visible Gaussians only.
    '''
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    W = camera.R
    mu_c = mu @ W.T + camera.t
    visible = mu_c[:, 2] > camera.near

    pc = mu_c[visible]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    fx, fy = camera.fx, camera.fy
    mean2d = np.stack([fx*x/z + camera.cx, fy*y/z + camera.cy], axis=1)

    n = pc.shape[0]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx/z
    J[:, 0, 2] = -fx*x/(z*z)
    J[:, 1, 1] = fy/z
    J[:, 1, 2] = -fy*y/(z*z)

    Rv = R[visible]
    sc = np.asarray(scales, dtype=np.float64)[visible]
    M = Rv*sc[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)
    cov_c = W @ cov3d @ W.T
    cov2d = J @ cov_c @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += sv.COV2D_DILATION
    cov2d[:, 1, 1] += sv.COV2D_DILATION

    cache = {'visible': visible, 'mu_c': pc, 'J': J, 'cov_c': cov_c,
             'M': M, 'R': Rv, 'scales': sc, 'camera': camera,
             'n': mu.shape[0]}
    return visible, mean2d, cov2d, z.copy(), cache


def project(mu, R, scales, camera):
    '''
    One Gaussian; returns (mean2d, cov2d, depth) or None when culled.
    '''
    visible, mean2d, cov2d, depth, _ = project_many(
        np.reshape(mu, (1, 3)), np.reshape(R, (1, 3, 3)),
        np.reshape(scales, (1, 3)), camera
    )
    if not visible[0]:
        return None
    return mean2d[0], cov2d[0], depth[0]


def project_backward(cache, dmean2d, dcov2d):
    '''
    Chains image-space gradients of the visible Gaussians back to world
    centers, frames and scales. Culled Gaussians get zero gradients. Depth
    is not differentiated.

    Returns:
        (dmu (N x 3), dR (N x 3 x 3), dscales (N x 3))
    '''
    camera = cache['camera']
    W = camera.R
    fx, fy = camera.fx, camera.fy
    pc, J, cov_c, M = cache['mu_c'], cache['J'], cache['cov_c'], cache['M']
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    G = dcov2d

    Jt = np.swapaxes(J, 1, 2)
    dcov_c = Jt @ G @ J
    dJ = (G + np.swapaxes(G, 1, 2)) @ J @ cov_c

    dmu_c = np.zeros_like(pc)
    # mean2d
    dmu_c[:, 0] += dmean2d[:, 0]*fx/z
    dmu_c[:, 1] += dmean2d[:, 1]*fy/z
    dmu_c[:, 2] += -dmean2d[:, 0]*fx*x/(z*z) - dmean2d[:, 1]*fy*y/(z*z)
    # perspective Jacobian
    z2, z3 = z*z, z*z*z
    dmu_c[:, 0] += dJ[:, 0, 2]*(-fx/z2)
    dmu_c[:, 1] += dJ[:, 1, 2]*(-fy/z2)
    dmu_c[:, 2] += (dJ[:, 0, 0]*(-fx/z2) + dJ[:, 0, 2]*(2.0*fx*x/z3) +
                    dJ[:, 1, 1]*(-fy/z2) + dJ[:, 1, 2]*(2.0*fy*y/z3))

    dcov3d = W.T @ dcov_c @ W
    dM = (dcov3d + np.swapaxes(dcov3d, 1, 2)) @ M
    dRv = dM*cache['scales'][:, None, :]
    dsv = np.sum(dM*cache['R'], axis=1)

    n = cache['n']
    visible = cache['visible']
    dmu = np.zeros((n, 3))
    dR = np.zeros((n, 3, 3))
    dscales = np.zeros((n, 3))
    dmu[visible] = dmu_c @ W
    dR[visible] = dRv
    dscales[visible] = dsv
    return dmu, dR, dscales


def splat_colors(mu, sh, camera):
    '''
    SH colors seen from the camera center. Returns (rgb, cache).
    '''
    v = mu - camera_center(camera)
    norm = np.linalg.norm(v, axis=1)
    dirs = v / norm[:, None]
    rgb, raw = eval_sh_batch(sh, dirs)
    return rgb, {'dirs': dirs, 'norm': norm, 'raw': raw, 'sh': sh}


def splat_colors_backward(cache, drgb):
    '''
    Returns (dmu, dsh).
    '''
    dsh, ddirs = eval_sh_backward(cache['sh'], cache['dirs'], cache['raw'],
                                  drgb)
    d = cache['dirs']
    dmu = (ddirs - d*np.sum(d*ddirs, axis=1)[:, None]) / cache['norm'][:, None]
    return dmu, dsh


###################
## RASTERIZATION ##
###################

class SplatSet(object):
    '''
    N projected splats: mean2d (N x 2), cov2d (N x 2 x 2), depth (N,),
    color (N x C), alpha_base (N,).
    '''

    def __init__(self, mean2d, cov2d, depth, color, alpha_base):
        self.mean2d = np.asarray(mean2d, dtype=np.float64).reshape(-1, 2)
        n = self.mean2d.shape[0]
        self.cov2d = np.asarray(cov2d, dtype=np.float64).reshape(n, 2, 2)
        self.depth = np.asarray(depth, dtype=np.float64).reshape(n)
        color = np.asarray(color, dtype=np.float64)
        if color.ndim == 1:
            color = color.reshape(n, -1) if n else color.reshape(0, 1)
        self.color = color
        self.alpha_base = np.asarray(alpha_base, dtype=np.float64).reshape(n)

    def __len__(self):
        return self.mean2d.shape[0]

    @property
    def channels(self):
        return self.color.shape[1]


class RenderOutput(object):
    '''
    rgb (H x W x C), alpha (H x W), depth (H x W) and the records the
    backward pass replays.
    '''

    def __init__(self, rgb, alpha, depth, records):
        self.rgb = rgb
        self.alpha = alpha
        self.depth = depth
        self.records = records


def _footprint_radius(cov2d, opacity):
    '''
    Pixel radius beyond which o exp(-d^T cov^-1 d / 2) < ALPHA_SKIP, plus a
    one pixel margin; -1 for splats that can never reach the threshold.
    '''
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5*(a + c)
    lam_max = mid + np.sqrt(np.maximum(mid*mid - (a*c - b*b), 0.0))
    with np.errstate(divide='ignore'):
        log_ratio = np.log(opacity/sv.ALPHA_SKIP)
    radius = np.ceil(np.sqrt(lam_max*2.0*np.maximum(log_ratio, 0.0))) + 1.0
    radius[~(log_ratio >= 0.0)] = -1.0
    return radius


def _composite(px, py, S):
    '''
    Front-to-back compositing of the sorted splats S at pixels (px, py).
    Returns the per-(pixel, splat) intermediates both passes need.
    '''
    dx = px[:, None] - S['mx'][None, :]
    dy = py[:, None] - S['my'][None, :]
    power = -0.5*(S['qa'][None, :]*dx*dx + 2.0*S['qb'][None, :]*dx*dy +
                  S['qc'][None, :]*dy*dy)
    alpha_raw = S['o'][None, :]*np.exp(power)
    clamped = alpha_raw > sv.ALPHA_MAX
    alpha = np.where(clamped, sv.ALPHA_MAX, alpha_raw)
    valid = alpha >= sv.ALPHA_SKIP
    a = np.where(valid, alpha, 0.0)

    T_incl = np.cumprod(1.0 - a, axis=1)
    T_excl = np.concatenate([np.ones((px.shape[0], 1)), T_incl[:, :-1]],
                            axis=1)
    active = valid & (T_excl >= sv.TRANSMITTANCE_MIN)
    a_act = np.where(active, a, 0.0)
    T_act = np.cumprod(1.0 - a_act, axis=1)
    T_before = np.concatenate([np.ones((px.shape[0], 1)), T_act[:, :-1]],
                              axis=1)
    w = a_act*T_before
    T_final = T_act[:, -1] if T_act.shape[1] else np.ones(px.shape[0])

    return {'dx': dx, 'dy': dy, 'power': power, 'alpha_raw': alpha_raw,
            'alpha': alpha, 'clamped': clamped, 'active': active,
            'T_before': T_before, 'w': w, 'T_final': T_final}


def _tile_pixels(y0, y1, x0, x1):
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return xs.reshape(-1).astype(np.float64), ys.reshape(-1).astype(np.float64)


def _tile_forward(task, S, background):
    y0, y1, x0, x1, ids = task
    px, py = _tile_pixels(y0, y1, x0, x1)
    P = px.shape[0]
    C = background.shape[0]
    if ids.size == 0:
        rgb = np.tile(background, (P, 1))
        return rgb, np.zeros(P), np.zeros(P)

    sub = {k: v[ids] for k, v in S.items()}
    st = _composite(px, py, sub)
    w = st['w']
    # sequential accumulation keeps sums independent of how splats are binned
    rgb = np.empty((P, C))
    for ch in range(C):
        rgb[:, ch] = np.cumsum(w*sub['color'][None, :, ch], axis=1)[:, -1]
    rgb += st['T_final'][:, None]*background[None, :]
    alpha = 1.0 - st['T_final']
    depth_acc = np.cumsum(w*sub['z'][None, :], axis=1)[:, -1]
    depth = depth_acc/np.maximum(alpha, sv.DEPTH_EPS)
    return rgb, alpha, depth


def _tile_backward(task, S, background, g_rgb, g_alpha):
    y0, y1, x0, x1, ids = task
    if ids.size == 0:
        return None
    px, py = _tile_pixels(y0, y1, x0, x1)
    sub = {k: v[ids] for k, v in S.items()}
    st = _composite(px, py, sub)
    w, T_before, T_final = st['w'], st['T_before'], st['T_final']

    gc = g_rgb @ sub['color'].T                     # P x K, g . c_i
    contrib = w*gc
    after = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    tail = T_final*(g_rgb @ background - g_alpha)   # dL/dT_final * T_final

    d_alpha = T_before*gc - (after + tail[:, None])/(1.0 - st['alpha'])
    d_alpha = np.where(st['active'] & ~st['clamped'], d_alpha, 0.0)

    d_color = w.T @ g_rgb                            # K x C
    expo = np.exp(st['power'])
    d_o = np.sum(d_alpha*expo, axis=0)
    d_power = d_alpha*st['alpha_raw']

    dx, dy = st['dx'], st['dy']
    qa, qb, qc = sub['qa'][None, :], sub['qb'][None, :], sub['qc'][None, :]
    d_qa = np.sum(-0.5*dx*dx*d_power, axis=0)
    d_qb = np.sum(-dx*dy*d_power, axis=0)
    d_qc = np.sum(-0.5*dy*dy*d_power, axis=0)
    d_mx = np.sum((qa*dx + qb*dy)*d_power, axis=0)
    d_my = np.sum((qb*dx + qc*dy)*d_power, axis=0)

    return ids, d_mx, d_my, d_qa, d_qb, d_qc, d_color, d_o


def _make_tasks(S, height, width, tile_size, naive):
    '''
    Tile rectangles with the (sorted) ids of the splats binned into each.
    '''
    K = S['mx'].shape[0]
    keep = S['radius'] >= 0
    tasks = []
    if naive:
        ids = np.nonzero(keep)[0] if K else np.zeros(0, dtype=np.int64)
        # row bands bound the memory of the pixel x splat matrices
        band = max(1, 4096 // max(width, 1))
        for y0 in range(0, height, band):
            tasks.append((y0, min(y0 + band, height), 0, width, ids))
        return tasks

    r = S['radius']
    col_lo = np.ceil(S['mx'] - r)
    col_hi = np.floor(S['mx'] + r)
    row_lo = np.ceil(S['my'] - r)
    row_hi = np.floor(S['my'] + r)
    for y0 in range(0, height, tile_size):
        y1 = min(y0 + tile_size, height)
        for x0 in range(0, width, tile_size):
            x1 = min(x0 + tile_size, width)
            hit = (keep & (col_hi >= x0) & (col_lo <= x1 - 1) &
                   (row_hi >= y0) & (row_lo <= y1 - 1))
            tasks.append((y0, y1, x0, x1, np.nonzero(hit)[0]))
    return tasks


def _sorted_splats(splats):
    order = np.argsort(splats.depth, kind='stable')
    cov = splats.cov2d[order]
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a*c - b*b
    S = {'mx': splats.mean2d[order, 0], 'my': splats.mean2d[order, 1],
         'qa': c/det, 'qb': -b/det, 'qc': a/det, 'det': det,
         'o': splats.alpha_base[order], 'color': splats.color[order],
         'z': splats.depth[order]}
    S['radius'] = _footprint_radius(cov, S['o'])
    return order, S


def _run(fn, tasks, threads):
    if threads is None or threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    pool = ThreadPool(min(threads, len(tasks)))
    try:
        results = pool.map(fn, tasks)
    finally:
        pool.close()
        pool.join()
    return results


def rasterize(splats, background, size, tile_size=sv.TILE_SIZE, naive=False,
              threads=1):
    '''
    Alpha-composites splats front to back.

    Args:
        splats (SplatSet): C color channels per splat.
        background: C-vector.
        size: (height, width).
        naive (bool): skip binning and composite every splat at every pixel.
        threads (int): worker threads over tiles.

    Returns:
        RenderOutput
    '''
    height, width = int(size[0]), int(size[1])
    background = np.asarray(background, dtype=np.float64).reshape(-1)
    C = background.shape[0]
    if len(splats) and splats.channels != C:
        raise ValueError('splats carry %d channels, background %d'
                         % (splats.channels, C))

    order, S = _sorted_splats(splats)
    tasks = _make_tasks(S, height, width, tile_size, naive)
    results = _run(lambda t: _tile_forward(t, S, background), tasks, threads)

    rgb = np.empty((height, width, C))
    alpha = np.empty((height, width))
    depth = np.empty((height, width))
    for (y0, y1, x0, x1, _), (trgb, talpha, tdepth) in zip(tasks, results):
        h, w = y1 - y0, x1 - x0
        rgb[y0:y1, x0:x1] = trgb.reshape(h, w, C)
        alpha[y0:y1, x0:x1] = talpha.reshape(h, w)
        depth[y0:y1, x0:x1] = tdepth.reshape(h, w)

    records = {'order': order, 'S': S, 'tasks': tasks,
               'background': background, 'n': len(splats),
               'threads': threads}
    return RenderOutput(rgb, alpha, depth, records)


def rasterize_backward(out, d_rgb, d_alpha=None):
    '''
    Reverse of the compositing recurrence, replayed per tile.

    Returns:
        dict with dmean2d (N x 2), dcov2d (N x 2 x 2, symmetric),
        dcolor (N x C), dalpha_base (N,), in input splat order.
    '''
    rec = out.records
    S, background = rec['S'], rec['background']
    n = rec['n']
    C = background.shape[0]
    d_rgb = np.asarray(d_rgb, dtype=np.float64).reshape(out.rgb.shape)
    if d_alpha is None:
        d_alpha = np.zeros(out.alpha.shape)

    def work(task):
        y0, y1, x0, x1, _ = task
        g_rgb = d_rgb[y0:y1, x0:x1].reshape(-1, C)
        g_alpha = d_alpha[y0:y1, x0:x1].reshape(-1)
        return _tile_backward(task, S, background, g_rgb, g_alpha)

    results = _run(work, rec['tasks'], rec['threads'])

    d_mx, d_my = np.zeros(n), np.zeros(n)
    d_qa, d_qb, d_qc = np.zeros(n), np.zeros(n), np.zeros(n)
    d_color = np.zeros((n, C))
    d_o = np.zeros(n)
    # merged in ascending tile order
    for res in results:
        if res is None:
            continue
        ids, mx, my, qa, qb, qc, col, o = res
        np.add.at(d_mx, ids, mx)
        np.add.at(d_my, ids, my)
        np.add.at(d_qa, ids, qa)
        np.add.at(d_qb, ids, qb)
        np.add.at(d_qc, ids, qc)
        np.add.at(d_color, ids, col)
        np.add.at(d_o, ids, o)

    # conic Q = cov^-1, so dcov = -Q dQ Q with the off-diagonal split evenly
    Q = np.zeros((n, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = (S['qa'], S['qb'],
                                                     S['qb'], S['qc'])
    dQ = np.zeros((n, 2, 2))
    dQ[:, 0, 0], dQ[:, 1, 1] = d_qa, d_qc
    dQ[:, 0, 1] = dQ[:, 1, 0] = 0.5*d_qb
    d_cov_sorted = -Q @ dQ @ Q

    order = rec['order']
    grads = {'dmean2d': np.zeros((n, 2)), 'dcov2d': np.zeros((n, 2, 2)),
             'dcolor': np.zeros((n, C)), 'dalpha_base': np.zeros(n)}
    grads['dmean2d'][order, 0] = d_mx
    grads['dmean2d'][order, 1] = d_my
    grads['dcov2d'][order] = d_cov_sorted
    grads['dcolor'][order] = d_color
    grads['dalpha_base'][order] = d_o
    return grads


###################
## RENDER PASSES ##
###################

class RenderSettings(object):
    '''
    Tile size, worker threads and the matte body flag, from the 'render'
    config section.
    '''

    def __init__(self, tile_size=sv.TILE_SIZE, threads=1, naive=False,
                 matte_include_body=False):
        self.tile_size = int(tile_size)
        self.threads = int(threads)
        self.naive = bool(naive)
        self.matte_include_body = bool(matte_include_body)

    @classmethod
    def from_config(cls, cfg, threads=None):
        section = cfg['render']
        nthreads = threads if threads is not None else section['threads']
        if not nthreads:
            nthreads = os.cpu_count() or 1
        return cls(tile_size=section['tile_size'], threads=nthreads,
                   matte_include_body=section['matte_include_body'])


def render_gaussians(world, camera, background, settings=None,
                     color_override=None):
    '''
    Projects, colors and rasterizes world Gaussians.

    Args:
        color_override (N x C or None): fixed per-splat colors replacing the
        SH colors (used by the matte pass).

    Returns:
        (RenderOutput, cache for render_gaussians_backward)
    '''
    settings = settings or RenderSettings()
    visible, mean2d, cov2d, depth, pcache = project_many(
        world.mu, world.R, world.scales, camera
    )
    if color_override is None:
        colors, ccache = splat_colors(world.mu[visible], world.sh[visible],
                                      camera)
    else:
        colors = np.asarray(color_override, dtype=np.float64)[visible]
        ccache = None

    splats = SplatSet(mean2d, cov2d, depth, colors, world.opacity[visible])
    out = rasterize(splats, background, camera.size,
                    tile_size=settings.tile_size, naive=settings.naive,
                    threads=settings.threads)
    LOGGER.debug('%sZ: rendered %d of %d splats at %dx%d' %
                 (datetime.utcnow().isoformat(), len(splats), len(world),
                  camera.width, camera.height))
    cache = {'project': pcache, 'color': ccache, 'visible': visible,
             'n': len(world)}
    return out, cache


def render_gaussians_backward(out, cache, d_rgb, d_alpha=None):
    '''
    Returns a dict of world-space gradients: mu, R, scales, opacity, sh.
    '''
    n = cache['n']
    visible = cache['visible']
    g = rasterize_backward(out, d_rgb, d_alpha)
    dmu, dR, dscales = project_backward(cache['project'], g['dmean2d'],
                                        g['dcov2d'])
    dsh = np.zeros((n, sv.SH_NCOEFFS, 3))
    if cache['color'] is not None:
        dmu_c, dsh_v = splat_colors_backward(cache['color'], g['dcolor'])
        dmu[visible] += dmu_c
        dsh[visible] = dsh_v
    dopacity = np.zeros(n)
    dopacity[visible] = g['dalpha_base']
    return {'mu': dmu, 'R': dR, 'scales': dscales, 'opacity': dopacity,
            'sh': dsh}


def render_base(body, scene, camera, background, settings=None):
    '''
    Body and scene Gaussians in one depth-sorted pass.
    '''
    return render_gaussians(concat_world([body, scene]), camera, background,
                            settings=settings)


def render_cloth(cloth, camera, background=(0.0, 0.0, 0.0), settings=None):
    return render_gaussians(cloth, camera, background, settings=settings)


def render_scene_only(scene, camera, background, settings=None):
    return render_gaussians(scene, camera, background, settings=settings)


def render_matte(cloth, scene, camera, settings=None, body=None):
    '''
    Cloth splats colored 1 and scene splats colored 0, composited in one
    depth-sorted pass over a zero background. Body splats (colored 0) join
    only when body is given.

    Returns:
        (matte H x W, RenderOutput, cache)
    '''
    parts = [cloth, scene] + ([body] if body is not None else [])
    world = concat_world(parts)
    override = np.zeros((len(world), 1))
    override[:len(cloth)] = 1.0
    out, cache = render_gaussians(world, camera, np.zeros(1),
                                  settings=settings, color_override=override)
    return out.rgb[:, :, 0], out, cache


def composite_final(I_cloth, I_base, V):
    '''
    I_cloth V + I_base (1 - V), per pixel.
    '''
    I_cloth = np.asarray(I_cloth, dtype=np.float64)
    I_base = np.asarray(I_base, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if I_cloth.shape != I_base.shape or V.shape != I_cloth.shape[:2]:
        raise ValueError('composite inputs disagree: cloth %s, base %s, '
                         'matte %s' % (I_cloth.shape, I_base.shape, V.shape))
    Vc = V[:, :, None]
    return I_cloth*Vc + I_base*(1.0 - Vc)


def composite_final_backward(I_cloth, I_base, V, g):
    '''
    Returns (dI_cloth, dI_base, dV).
    '''
    Vc = np.asarray(V, dtype=np.float64)[:, :, None]
    return g*Vc, g*(1.0 - Vc), np.sum(g*(I_cloth - I_base), axis=2)
