#!/usr/bin/env python

'''
gradcheck.py - analytic gradients against central finite differences.

Every check draws seeded random instances, evaluates a scalar objective and
its analytic gradient, and probes a handful of coordinates per instance
with central differences. A probe whose left and right one-sided slopes
disagree is sitting on a kink (an L1 sign change, a clamp, a ReLU, a
nearest-neighbor switch, an alpha threshold) and is skipped.

The relative error of a probe is |analytic - numeric| / max(|analytic|,
|numeric|, floor); a check passes when every probe stays under its
tolerance.

====================
    CHECKS
    GradCheckResult
    probe_coordinates
    run_check
    run_suite
====================
'''

import logging
from collections import OrderedDict
from datetime import datetime

import numpy as np
import pandas as pd

import shared_variables as sv
from gaussians import quat_to_matrix, eval_sh_batch, eval_sh_backward
from skeleton import (humanoid_skeleton, walk_pose, forward_kinematics,
                      transfer_skin_weights, lbs_apply, lbs_apply_backward)
from triplane import init_field, sample_batch, sample_backward_batch
from decoders import (init_mlp, mlp_forward, mlp_backward, softmax,
                      softmax_backward, rot6d_to_matrix_batch,
                      rot6d_to_matrix_backward)
import losses
import renderer as rd
import avatar as av
import synthscene as ss

LOGGER = logging.getLogger(__name__)

DEFAULT_STEP = 1e-6
DEFAULT_TOL = 1e-4
PIPELINE_TOL = 1e-3
KINK_TOL = 1e-2


class GradCheckResult(object):

    def __init__(self, name, instances, probes, skipped, max_rel_err, tol):
        self.name = name
        self.instances = instances
        self.probes = probes
        self.skipped = skipped
        self.max_rel_err = max_rel_err
        self.tol = tol

    @property
    def passed(self):
        return self.max_rel_err < self.tol

    def as_dict(self):
        return OrderedDict([('check', self.name),
                            ('instances', self.instances),
                            ('probes', self.probes),
                            ('skipped', self.skipped),
                            ('max_rel_err', self.max_rel_err),
                            ('tol', self.tol),
                            ('passed', self.passed)])


def _pick(rng, grad, count):
    '''
    Flat indices to probe, preferring entries with nonzero analytic gradient.
    '''
    flat = np.abs(np.ravel(grad))
    nonzero = np.flatnonzero(flat)
    pool = nonzero if nonzero.size >= count else np.arange(flat.size)
    count = min(count, pool.size)
    return rng.choice(pool, size=count, replace=False)


def probe_coordinates(fn, x, grad, idxs, step=DEFAULT_STEP, floor=1e-8):
    '''
    Central differences of fn() in the flat coordinates idxs of the array x,
    which fn reads. x is restored afterwards.

    Returns:
        (relative errors of the accepted probes, number of kinks skipped)
    '''
    flat = x.reshape(-1)
    gflat = np.ravel(grad)
    f0 = fn()
    errs = []
    skipped = 0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + step
        hp = flat[i] - orig
        fp = fn()
        flat[i] = orig - step
        hm = orig - flat[i]
        fm = fn()
        flat[i] = orig

        right = (fp - f0)/hp
        left = (f0 - fm)/hm
        scale = max(abs(right), abs(left))
        if abs(right - left) > KINK_TOL*scale + 1e-7*(1.0 + abs(f0)):
            skipped += 1
            continue

        numeric = (fp - fm)/(hp + hm)
        analytic = gflat[i]
        denom = max(abs(analytic), abs(numeric), floor)
        errs.append(abs(analytic - numeric)/denom)
    return errs, skipped


############
## CHECKS ##
############

def _check_l1(rng):
    img = rng.uniform(0, 1, (6, 6, 3))
    gt = rng.uniform(0, 1, (6, 6, 3))
    _, g = losses.l1_loss_grad(img, gt)
    return [(lambda: losses.l1_loss(img, gt), img, g)]


def _check_ssim(rng):
    img = rng.uniform(0, 1, (12, 12, 3))
    gt = rng.uniform(0, 1, (12, 12, 3))
    cfg = losses.LossConfig(ssim_window=5)
    _, g = losses.ssim_loss_grad(img, gt, cfg)
    return [(lambda: losses.ssim_loss(img, gt, cfg), img, g)]


def _check_chamfer(rng):
    pred = rng.normal(size=(40, 3))*0.3
    gt = rng.normal(size=(30, 3))*0.3
    cfg = losses.LossConfig(gm_scale=0.1)
    _, dp, dg = losses.chamfer_sim_loss_grad(pred, gt, cfg)
    fn = lambda: losses.chamfer_sim_loss(pred, gt, cfg)
    return [(fn, pred, dp), (fn, gt, dg)]


def _check_arap(rng):
    verts = rng.normal(size=(20, 3))
    edges = np.array([(i, i + 1) for i in range(19)] +
                     [tuple(sorted(rng.choice(20, 2, replace=False)))
                      for _ in range(10)])
    _, g = losses.arap_loss_grad(verts, edges)
    return [(lambda: losses.arap_loss(verts, edges), verts, g)]


def _check_mask(rng):
    matte = rng.uniform(0, 1, (8, 8))
    gt = rng.uniform(0, 1, (8, 8)) > 0.5
    _, g = losses.mask_loss_grad(matte, gt)
    return [(lambda: losses.mask_loss(matte, gt), matte, g)]


def _check_cloth_lbs(rng):
    W = softmax(rng.normal(size=(15, 6)))
    W_gt = softmax(rng.normal(size=(15, 6)))
    _, g = losses.cloth_lbs_loss_grad(W, W_gt)
    return [(lambda: losses.cloth_lbs_loss(W, W_gt), W, g)]


def _check_triplane(rng):
    field = init_field(6, 3, -np.ones(3), np.ones(3), scale=1.0, rng=rng)
    pts = rng.uniform(-1.1, 1.1, (25, 3))
    up = rng.normal(size=(25, field.feature_dim))
    g = sample_backward_batch(field, pts, up)
    return [(lambda: np.sum(up*sample_batch(field, pts)), field.planes, g)]


def _check_mlp(rng):
    params = init_mlp(7, [9, 8], 5, rng)
    params.weights[-1] = rng.normal(size=params.weights[-1].shape)
    params.biases[-1] = rng.normal(size=5)
    x = rng.normal(size=(6, 7))
    up = rng.normal(size=(6, 5))

    def fn():
        return np.sum(up*mlp_forward(params, x)[0])

    _, cache = mlp_forward(params, x)
    grads, dx = mlp_backward(params, cache, up)
    out = [(fn, x, dx)]
    for k in range(len(params.weights)):
        out.append((fn, params.weights[k], grads['W'][k]))
        out.append((fn, params.biases[k], grads['b'][k]))
    return out


def _check_softmax(rng):
    logits = rng.normal(size=(5, 7))
    up = rng.normal(size=(5, 7))
    g = softmax_backward(softmax(logits), up)
    return [(lambda: np.sum(up*softmax(logits)), logits, g)]


def _check_rot6d(rng):
    r6 = rng.normal(size=(8, 6))
    up = rng.normal(size=(8, 3, 3))
    g = rot6d_to_matrix_backward(r6, up)
    return [(lambda: np.sum(up*rot6d_to_matrix_batch(r6)), r6, g)]


def _check_sh(rng):
    sh = rng.normal(size=(10, sv.SH_NCOEFFS, 3))*0.1
    dirs = rng.normal(size=(10, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    up = rng.normal(size=(10, 3))
    _, raw = eval_sh_batch(sh, dirs)
    dsh, ddirs = eval_sh_backward(sh, dirs, raw, up)
    fn = lambda: np.sum(up*eval_sh_batch(sh, dirs)[0])
    return [(fn, sh, dsh), (fn, dirs, ddirs)]


def _check_lbs(rng):
    skel = humanoid_skeleton(6)
    _, T = forward_kinematics(skel, walk_pose(skel, 0.9))
    pts = rng.normal(size=(12, 3))*0.3 + np.array([0.0, 1.0, 0.0])
    W = softmax(rng.normal(size=(12, 6)))
    up = rng.normal(size=(12, 3))
    dp, dw = lbs_apply_backward(pts, W, T, up)
    fn = lambda: np.sum(up*lbs_apply(pts, W, T))
    return [(fn, pts, dp), (fn, W, dw, 1e-7)]


def _tiny_camera(res=16):
    return rd.look_at_camera((0.0, 0.0, -3.0), (0.0, 0.0, 0.0), res, res,
                             1.2*res)


def _random_world(rng, n=8):
    quats = rng.normal(size=(n, 4))
    return rd.WorldGaussians(rng.uniform(-0.5, 0.5, (n, 3)),
                             quat_to_matrix(quats),
                             rng.uniform(0.1, 0.4, (n, 3)),
                             rng.uniform(0.3, 0.9, n),
                             rng.normal(size=(n, sv.SH_NCOEFFS, 3))*0.2)


def _check_projection(rng):
    world = _random_world(rng)
    cam = _tiny_camera()
    _, mean2d, cov2d, _, cache = rd.project_many(world.mu, world.R,
                                                 world.scales, cam)
    um = rng.normal(size=mean2d.shape)
    uc = rng.normal(size=cov2d.shape)
    dmu, dR, ds = rd.project_backward(cache, um, uc)

    def fn():
        _, m, c, _, _ = rd.project_many(world.mu, world.R, world.scales, cam)
        return np.sum(um*m) + np.sum(uc*c)

    return [(fn, world.mu, dmu), (fn, world.R, dR), (fn, world.scales, ds)]


def _check_rasterize(rng):
    n = 6
    mean2d = rng.uniform(2, 14, (n, 2))
    A = rng.normal(size=(n, 2, 2))
    cov2d = A @ np.swapaxes(A, 1, 2)*4.0 + np.eye(2)
    color = rng.uniform(0, 1, (n, 3))
    opacity = rng.uniform(0.2, 0.8, n)
    depth = rng.uniform(1, 5, n)
    bg = rng.uniform(0, 1, 3)
    ur = rng.normal(size=(16, 16, 3))
    ua = rng.normal(size=(16, 16))

    # the rasterizer reads the upper off-diagonal only; probing through the
    # symmetric part matches the evenly split analytic gradient
    def splats():
        sym = 0.5*(cov2d + np.swapaxes(cov2d, 1, 2))
        return rd.SplatSet(mean2d, sym, depth, color, opacity)

    out = rd.rasterize(splats(), bg, (16, 16))
    g = rd.rasterize_backward(out, ur, ua)

    def fn():
        o = rd.rasterize(splats(), bg, (16, 16))
        return np.sum(ur*o.rgb) + np.sum(ua*o.alpha)

    return [(fn, mean2d, g['dmean2d']), (fn, cov2d, g['dcov2d']),
            (fn, color, g['dcolor']), (fn, opacity, g['dalpha_base'])]


def _check_render(rng):
    world = _random_world(rng)
    cam = _tiny_camera()
    bg = rng.uniform(0, 1, 3)
    ur = rng.normal(size=(16, 16, 3))
    out, cache = rd.render_gaussians(world, cam, bg)
    g = rd.render_gaussians_backward(out, cache, ur)

    def fn():
        return np.sum(ur*rd.render_gaussians(world, cam, bg)[0].rgb)

    return [(fn, world.mu, g['mu']),
            (fn, world.R, g['R']),
            (fn, world.scales, g['scales']),
            (fn, world.opacity, g['opacity']),
            (fn, world.sh, g['sh'])]


def tiny_avatar(rng, res=16):
    '''
    A few-dozen-splat avatar with perturbed decoder heads, one posed frame
    and its ground truth, for end-to-end checks.
    '''
    skel = humanoid_skeleton(6)
    body_mesh, body_w = ss.body_mesh_on_skeleton(skel, 40, rng)
    cloth_mesh = ss.skirt_mesh(48, rng)
    cloth_w = transfer_skin_weights(cloth_mesh, body_mesh, body_w)
    scene = ss.ground_and_blobs(12, rng)
    cfg = {'triplane': {'res': 4, 'channels': 2, 'init_scale': 0.5,
                        'bbox_pad': 0.1},
           'decoders': {'hidden': [8]}}
    model = av.init_model(skel, body_mesh, cloth_mesh, body_w, cloth_w,
                          scene, cfg, rng)
    for _, head in model.decoders.heads():
        head.weights[-1] += rng.normal(size=head.weights[-1].shape)*0.02

    camera = rd.look_at_camera((0.3, 1.0, 3.0), (0.0, 0.8, 0.0), res, res,
                               1.0*res)
    pose = walk_pose(skel, 0.8)
    frame = {'pose': pose, 'camera': camera,
             'image': rng.uniform(0, 1, (res, res, 3)),
             'mask': rng.uniform(0, 1, (res, res)) > 0.5,
             'cloth_vertices': cloth_mesh.vertices +
             rng.normal(size=cloth_mesh.vertices.shape)*0.01}
    return model, frame


def _check_avatar(rng):
    model, frame = tiny_avatar(rng)
    cfg = losses.LossConfig(lambda_lpips=0.0, lambda_cloth_lbs=10.0,
                            ssim_window=5)
    bg = np.zeros(3)
    settings = rd.RenderSettings(threads=1)
    _, _, grads, _ = av.frame_loss_and_grads(model, frame, cfg, bg,
                                             settings=settings)
    params = av.model_params(model)

    def fn():
        return av.frame_loss_and_grads(model, frame, cfg, bg,
                                       settings=settings,
                                       with_grads=False)[0]

    names = list(params)
    chosen = rng.choice(len(names), size=4, replace=False)
    return [(fn, params[names[i]], grads[names[i]]) for i in chosen]


CHECKS = OrderedDict([
    ('l1', _check_l1),
    ('ssim', _check_ssim),
    ('chamfer_gm', _check_chamfer),
    ('arap', _check_arap),
    ('mask', _check_mask),
    ('cloth_lbs', _check_cloth_lbs),
    ('triplane_sampling', _check_triplane),
    ('mlp_heads', _check_mlp),
    ('softmax', _check_softmax),
    ('rot6d', _check_rot6d),
    ('sh_color', _check_sh),
    ('lbs', _check_lbs),
    ('projection', _check_projection),
    ('rasterize', _check_rasterize),
    ('splat_pipeline', _check_render),
    ('avatar_pipeline', _check_avatar),
])

# checks whose objectives chain many stages get the looser tolerance
CHECK_TOLS = {'splat_pipeline': PIPELINE_TOL, 'avatar_pipeline': PIPELINE_TOL}


def run_check(name, seed=0, instances=100, probes=3):
    '''
    Runs one named check over seeded instances.
    '''
    build = CHECKS[name]
    errs = []
    skipped = 0
    tol = CHECK_TOLS.get(name, DEFAULT_TOL)
    for inst in range(instances):
        rng = np.random.default_rng([seed, inst])
        for entry in build(rng):
            fn, x, grad = entry[:3]
            step = entry[3] if len(entry) > 3 else DEFAULT_STEP
            idxs = _pick(rng, grad, probes)
            e, s = probe_coordinates(fn, x, grad, idxs, step=step)
            errs.extend(e)
            skipped += s
    max_err = float(np.max(errs)) if errs else 0.0
    result = GradCheckResult(name, instances, len(errs), skipped, max_err,
                             tol)
    LOGGER.info('%sZ: gradcheck %s: %d probes, %d kinks skipped, max rel '
                'err %.3g (tol %g) %s' %
                (datetime.utcnow().isoformat(), name, len(errs), skipped,
                 max_err, tol, 'ok' if result.passed else 'FAILED'))
    return result


def run_suite(seed=0, instances=100, checks=None, probes=3):
    '''
    Returns (pandas DataFrame with one row per check, all passed).
    '''
    names = list(checks) if checks else list(CHECKS)
    results = [run_check(name, seed=seed, instances=instances,
                         probes=probes) for name in names]
    table = pd.DataFrame([r.as_dict() for r in results])
    return table, all(r.passed for r in results)
