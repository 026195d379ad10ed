#!/usr/bin/env python

'''
avatar.py - the layered avatar: canonical body/cloth/scene layers, their
triplane fields and shared decoders, the posing chain, the three render
passes with final compositing, and the per-frame loss with gradients for
every trainable parameter.

Posing a Body or Cloth layer runs, per primitive:

    triplane feature at the canonical center (no gradient to the center)
    -> D_A: SH and opacity-logit residuals on the canonical values
    -> D_G: dmu, dr6, dlog_scale applied to the canonical geometry
    -> D_D: skinning logits (plus the binding prior) and pose offsets
    -> pose-corrective offsets, then linear blend skinning

Parameter names are dotted: '<layer>.<field>' for splat parameters,
'triplane.<layer>' for planes and '<head>.W<k>' / '<head>.b<k>' for the
decoders.

====================
    AvatarModel
    init_model
    model_params
    set_model_params
    param_group
    pose_layer
    pose_layer_backward
    render_frame
    frame_loss_and_grads
====================
'''

import logging
from collections import OrderedDict

import numpy as np
from scipy.special import expit

from gaussians import (LayerTag, init_from_mesh, quat_to_matrix,
                       quat_to_matrix_backward)
from skeleton import (forward_kinematics, pose_feature, blend_transforms,
                      apply_pose_offsets_batch, check_weight_rows)
from triplane import (AvatarField, init_field, field_bbox_for, sample_batch,
                      sample_backward_batch)
from decoders import (init_decoders, mlp_forward, mlp_backward,
                      split_appearance, split_geometry, split_deformation,
                      softmax, softmax_backward, apply_geometry_batch,
                      apply_geometry_backward)
import losses
import renderer as rd

LOGGER = logging.getLogger(__name__)

PRIOR_EPS = 1e-6
LAYER_FIELDS = ('centers', 'quats', 'log_scales', 'opacity_logits', 'sh')
FIELD_GROUPS = {'centers': 'positions', 'quats': 'rotations',
                'log_scales': 'scales', 'opacity_logits': 'opacities',
                'sh': 'sh'}
PARAM_GROUPS = ('positions', 'rotations', 'scales', 'opacities', 'sh',
                'triplanes', 'decoders')


class AvatarModel(object):
    '''
    Args:
        skeleton (Skeleton)
        body, cloth, scene (GaussianLayer): canonical layers.
        field (AvatarField): body and cloth triplanes.
        decoders (DecoderSet)
        body_weights (N_body_rows x J): rows addressed by body.skin_binding.
        cloth_weights (N_cloth_rows x J): reference weights transferred from
        the body, addressed by cloth.skin_binding.
        cloth_edges (E x 2): rest-mesh edges between cloth primitives.
    '''

    def __init__(self, skeleton, body, cloth, scene, field, decoders,
                 body_weights, cloth_weights, cloth_edges):
        self.skeleton = skeleton
        self.body = body
        self.cloth = cloth
        self.scene = scene
        self.field = field
        self.decoders = decoders
        self.body_weights = np.asarray(body_weights, dtype=np.float64)
        self.cloth_weights = np.asarray(cloth_weights, dtype=np.float64)
        self.cloth_edges = np.asarray(cloth_edges, dtype=np.int64)

        if body.tag != LayerTag.Body or cloth.tag != LayerTag.Cloth:
            raise ValueError('body/cloth layers carry the wrong tags')
        if scene.tag != LayerTag.Scene:
            raise ValueError('scene layer must be tagged Scene')
        J = skeleton.joint_count
        if decoders.joint_count != J:
            raise ValueError('decoders built for %d joints, skeleton has %d'
                             % (decoders.joint_count, J))
        for name, W, layer in (('body', self.body_weights, body),
                               ('cloth', self.cloth_weights, cloth)):
            if W.ndim != 2 or W.shape[1] != J:
                raise ValueError('%s weights must be N x %d' % (name, J))
            check_weight_rows(W)
            layer.check_binding(W.shape[0])

    def layer(self, name):
        return getattr(self, name)

    def field_for(self, name):
        return (self.field.body_field if name == 'body'
                else self.field.cloth_field)

    def prior_logits(self, name):
        layer = self.layer(name)
        W = self.body_weights if name == 'body' else self.cloth_weights
        return np.log(W[layer.skin_binding] + PRIOR_EPS)

    def reference_weights(self, name):
        layer = self.layer(name)
        W = self.body_weights if name == 'body' else self.cloth_weights
        return W[layer.skin_binding]


def init_model(skeleton, body_mesh, cloth_mesh, body_weights, cloth_weights,
               scene_layer, cfg, rng):
    '''
    Canonical layers from the rest meshes, triplanes over their padded
    bounding boxes, and zero-output decoder heads.
    '''
    body = init_from_mesh(body_mesh, LayerTag.Body)
    cloth = init_from_mesh(cloth_mesh, LayerTag.Cloth)

    tp = cfg['triplane']
    fields = []
    for layer in (body, cloth):
        lo, hi = field_bbox_for(layer.centers, tp['bbox_pad'])
        fields.append(init_field(tp['res'], tp['channels'], lo, hi,
                                 scale=tp['init_scale'], rng=rng))
    field = AvatarField(*fields)

    decoders = init_decoders(field.body_field.feature_dim,
                             skeleton.joint_count,
                             cfg['decoders']['hidden'], rng)

    return AvatarModel(skeleton, body, cloth, scene_layer.copy(), field,
                       decoders, getattr(body_weights, 'matrix',
                                         body_weights),
                       getattr(cloth_weights, 'matrix', cloth_weights),
                       cloth_mesh.edges)


################
## PARAMETERS ##
################

def param_group(name):
    '''
    Optimizer group of a dotted parameter name.
    '''
    head, _, tail = name.partition('.')
    if head == 'triplane':
        return 'triplanes'
    if head in ('D_A', 'D_G', 'D_D'):
        return 'decoders'
    return FIELD_GROUPS[tail]


def model_params(model):
    '''
    Ordered {name: array} of every trainable parameter (the arrays are the
    model's own).
    '''
    params = OrderedDict()
    for lname in ('body', 'cloth', 'scene'):
        layer = model.layer(lname)
        for fname in LAYER_FIELDS:
            params['%s.%s' % (lname, fname)] = getattr(layer, fname)
    params['triplane.body'] = model.field.body_field.planes
    params['triplane.cloth'] = model.field.cloth_field.planes
    for hname, head in model.decoders.heads():
        for k in range(len(head.weights)):
            params['%s.W%d' % (hname, k)] = head.weights[k]
            params['%s.b%d' % (hname, k)] = head.biases[k]
    return params


def set_model_params(model, params):
    '''
    Writes arrays back into the model and re-enforces the layer invariants
    (unit quaternions, bounded scales).
    '''
    for name, value in params.items():
        head, _, tail = name.partition('.')
        value = np.asarray(value, dtype=np.float64)
        if head in ('body', 'cloth', 'scene'):
            setattr(model.layer(head), tail, value)
        elif head == 'triplane':
            model.field_for(tail).planes = value
        elif head in ('D_A', 'D_G', 'D_D'):
            mlp = getattr(model.decoders, head)
            k = int(tail[1:])
            if tail[0] == 'W':
                mlp.weights[k] = value
            else:
                mlp.biases[k] = value
        else:
            raise KeyError('unknown parameter %s' % name)
    for lname in ('body', 'cloth', 'scene'):
        model.layer(lname).enforce_invariants()
    return model


############
## POSING ##
############

def _is_identity(transforms):
    return np.array_equal(transforms,
                          np.broadcast_to(np.eye(4), transforms.shape))


def pose_layer(model, name, transforms, feature):
    '''
    Decodes and articulates one Body/Cloth layer.

    Returns:
        (WorldGaussians, skinning weights N x J, cache)
    '''
    layer = model.layer(name)
    field = model.field_for(name)
    dec = model.decoders
    J = dec.joint_count

    f = sample_batch(field, layer.centers)

    raw_A, cache_A = mlp_forward(dec.D_A, f)
    dsh, dlogit = split_appearance(raw_A)
    sh = layer.sh + dsh
    opacity = expit(layer.opacity_logits + dlogit)

    raw_G, cache_G = mlp_forward(dec.D_G, f)
    dmu, dr6, ds = split_geometry(raw_G)
    R_canon = quat_to_matrix(layer.quats)
    mu_def, R_def, s_def, R6 = apply_geometry_batch(
        layer.centers, R_canon, layer.log_scales, dmu, dr6, ds
    )

    raw_D, cache_D = mlp_forward(dec.D_D, f)
    logits, dp = split_deformation(raw_D, J)
    w = softmax(logits + model.prior_logits(name))

    mu_po = apply_pose_offsets_batch(mu_def, dp, feature)

    identity = _is_identity(transforms)
    if identity:
        M = None
        mu_w = mu_po.copy()
        R_w = R_def
    else:
        M, t = blend_transforms(w, transforms)
        mu_w = np.einsum('nab,nb->na', M, mu_po) + t
        R_w = M @ R_def

    world = rd.WorldGaussians(mu_w, R_w, s_def, opacity, sh)
    cache = {'name': name, 'f': f, 'A': cache_A, 'G': cache_G,
             'D': cache_D, 'R_canon': R_canon, 'dr6': dr6, 'R6': R6,
             'R_def': R_def, 's_def': s_def, 'opacity': opacity, 'w': w,
             'feature': feature, 'mu_po': mu_po, 'M': M,
             'transforms': transforms, 'identity': identity}
    return world, w, cache


def pose_layer_backward(model, cache, dworld, dw_extra=None):
    '''
    Chains world-space gradients (dict mu, R, scales, opacity, sh) and an
    optional direct skinning-weight gradient back to the layer's canonical
    parameters, its triplane, and the decoders.

    Returns:
        {name: gradient} using model_params names.
    '''
    name = cache['name']
    layer = model.layer(name)
    dec = model.decoders
    J = dec.joint_count
    n = len(layer)

    dmu_w, dR_w = dworld['mu'], dworld['R']
    if cache['identity']:
        dmu_po = dmu_w
        dR_def = dR_w
        dw = np.zeros((n, J))
    else:
        M = cache['M']
        transforms = cache['transforms']
        Mt = np.swapaxes(M, 1, 2)
        dmu_po = np.einsum('nab,nb->na', Mt, dmu_w)
        dR_def = Mt @ dR_w
        dM = (dmu_w[:, :, None]*cache['mu_po'][:, None, :] +
              dR_w @ np.swapaxes(cache['R_def'], 1, 2))
        dw = (np.einsum('nab,jab->nj', dM, transforms[:, :3, :3]) +
              dmu_w @ transforms[:, :3, 3].T)
    if dw_extra is not None:
        dw = dw + dw_extra

    # pose offsets mu_po = mu_def + feature . dp
    dmu_def = dmu_po
    ddp = cache['feature'][None, :, None]*dmu_po[:, None, :]
    dlogits = softmax_backward(cache['w'], dw)
    draw_D = np.concatenate([dlogits, ddp.reshape(n, -1)], axis=1)

    (d_centers, dR_canon, d_log, d_dmu, d_dr6,
     d_ds) = apply_geometry_backward(cache['R_canon'], cache['dr6'],
                                     cache['R6'], cache['s_def'], dmu_def,
                                     dR_def, dworld['scales'])
    draw_G = np.concatenate([d_dmu, d_dr6, d_ds], axis=1)

    o = cache['opacity']
    dz = dworld['opacity']*o*(1.0 - o)
    dsh = dworld['sh']
    draw_A = np.concatenate([dsh.reshape(n, -1), dz[:, None]], axis=1)

    grads = OrderedDict()
    grads['%s.centers' % name] = d_centers
    grads['%s.quats' % name] = quat_to_matrix_backward(layer.quats, dR_canon)
    grads['%s.log_scales' % name] = d_log
    grads['%s.opacity_logits' % name] = dz
    grads['%s.sh' % name] = dsh.copy()

    df = np.zeros_like(cache['f'])
    for hname, head, draw, hcache in (('D_A', dec.D_A, draw_A, cache['A']),
                                      ('D_G', dec.D_G, draw_G, cache['G']),
                                      ('D_D', dec.D_D, draw_D, cache['D'])):
        hgrads, dfh = mlp_backward(head, hcache, draw)
        df += dfh
        for k in range(len(head.weights)):
            grads['%s.W%d' % (hname, k)] = hgrads['W'][k]
            grads['%s.b%d' % (hname, k)] = hgrads['b'][k]

    grads['triplane.%s' % name] = sample_backward_batch(
        model.field_for(name), layer.centers, df
    )
    return grads


def _scene_world(layer):
    return rd.world_from_layer(layer)


def _scene_backward(layer, dworld):
    o = layer.opacities
    return OrderedDict([
        ('scene.centers', dworld['mu']),
        ('scene.quats', quat_to_matrix_backward(layer.quats, dworld['R'])),
        ('scene.log_scales', dworld['scales']*np.exp(layer.log_scales)),
        ('scene.opacity_logits', dworld['opacity']*o*(1.0 - o)),
        ('scene.sh', dworld['sh']),
    ])


###############
## RENDERING ##
###############

class FrameRender(object):
    '''
    Everything one frame's forward pass produced: posed layers, the three
    render passes, the matte, the final image, and their caches.
    '''

    def __init__(self, **kwargs):
        self.__dict__.update(kwargs)


def render_frame(model, pose, camera, background, settings=None):
    '''
    Poses body and cloth, renders base (body + scene), cloth (black
    background) and matte passes, and composites
    I_final = I_cloth V + I_base (1 - V).
    '''
    settings = settings or rd.RenderSettings()
    _, transforms = forward_kinematics(model.skeleton, pose)
    feature = pose_feature(pose)

    body_w, body_sw, body_cache = pose_layer(model, 'body', transforms,
                                             feature)
    cloth_w, cloth_sw, cloth_cache = pose_layer(model, 'cloth', transforms,
                                                feature)
    scene_w = _scene_world(model.scene)

    base_out, base_cache = rd.render_base(body_w, scene_w, camera,
                                          background, settings=settings)
    cloth_out, cloth_cache_r = rd.render_cloth(cloth_w, camera,
                                               np.zeros(3),
                                               settings=settings)
    V, matte_out, matte_cache = rd.render_matte(
        cloth_w, scene_w, camera, settings=settings,
        body=body_w if settings.matte_include_body else None
    )
    final = rd.composite_final(cloth_out.rgb, base_out.rgb, V)

    return FrameRender(body=body_w, cloth=cloth_w, scene=scene_w,
                       body_weights=body_sw, cloth_weights=cloth_sw,
                       body_cache=body_cache, cloth_cache=cloth_cache,
                       base=base_out, base_cache=base_cache,
                       cloth_pass=cloth_out, cloth_pass_cache=cloth_cache_r,
                       matte=V, matte_out=matte_out, matte_cache=matte_cache,
                       final=final, settings=settings)


def _add(grads, more):
    for k, v in more.items():
        if k in grads:
            grads[k] = grads[k] + v
        else:
            grads[k] = v


def frame_loss_and_grads(model, frame, loss_cfg, background, settings=None,
                         with_grads=True):
    '''
    The full objective on one frame.

    Args:
        frame (dict): pose, camera, image (H x W x 3), mask (H x W),
        cloth_vertices (pseudo ground-truth cloth mesh vertices).
        loss_cfg (LossConfig)

    Returns:
        (total, parts, grads, render): parts maps every loss term to its
        unweighted value (0 for terms whose weight is 0); grads maps
        model_params names to gradients of total.
    '''
    r = render_frame(model, frame['pose'], frame['camera'], background,
                     settings=settings)
    gt = frame['image']
    lam = {t: loss_cfg.weight(t) for t in losses.LOSS_TERMS}

    parts = OrderedDict((t, 0.0) for t in losses.LOSS_TERMS)
    d_final = np.zeros_like(r.final)
    d_V = np.zeros_like(r.matte)
    d_cloth_mu = np.zeros_like(r.cloth.mu)
    d_cloth_w = None

    if lam['l1']:
        parts['l1'], g = losses.l1_loss_grad(r.final, gt)
        d_final += lam['l1']*g
    if lam['ssim']:
        parts['ssim'], g = losses.ssim_loss_grad(r.final, gt, loss_cfg)
        d_final += lam['ssim']*g
    if lam['lpips']:
        parts['lpips'], g = losses.lpips_loss_grad(r.final, gt)
        d_final += lam['lpips']*g
    if lam['cloth_lbs']:
        parts['cloth_lbs'], g = losses.cloth_lbs_loss_grad(
            r.cloth_weights, model.reference_weights('cloth')
        )
        d_cloth_w = lam['cloth_lbs']*g
    if lam['sim']:
        parts['sim'], g, _ = losses.chamfer_sim_loss_grad(
            r.cloth.mu, frame['cloth_vertices'], loss_cfg
        )
        d_cloth_mu += lam['sim']*g
    if lam['arap']:
        parts['arap'], g = losses.arap_loss_grad(r.cloth.mu,
                                                 model.cloth_edges)
        d_cloth_mu += lam['arap']*g
    if lam['mask']:
        parts['mask'], g = losses.mask_loss_grad(r.matte, frame['mask'])
        d_V += lam['mask']*g

    total, _ = losses.total_loss(parts, loss_cfg)
    if not with_grads:
        return total, parts, None, r

    dI_cloth, dI_base, dV_comp = rd.composite_final_backward(
        r.cloth_pass.rgb, r.base.rgb, r.matte, d_final
    )
    d_V += dV_comp

    nb, nc, ns = len(r.body), len(r.cloth), len(r.scene)

    base_g = rd.render_gaussians_backward(r.base, r.base_cache, dI_base)
    body_g, scene_g = rd.split_world_grads(base_g, [nb, ns])

    cloth_g = rd.render_gaussians_backward(r.cloth_pass, r.cloth_pass_cache,
                                           dI_cloth)

    matte_g = rd.render_gaussians_backward(r.matte_out, r.matte_cache,
                                           d_V[:, :, None])
    sizes = [nc, ns] + ([nb] if r.settings.matte_include_body else [])
    matte_parts = rd.split_world_grads(matte_g, sizes)
    for k in cloth_g:
        cloth_g[k] = cloth_g[k] + matte_parts[0][k]
        scene_g[k] = scene_g[k] + matte_parts[1][k]
        if r.settings.matte_include_body:
            body_g[k] = body_g[k] + matte_parts[2][k]
    cloth_g['mu'] = cloth_g['mu'] + d_cloth_mu

    grads = OrderedDict()
    _add(grads, pose_layer_backward(model, r.body_cache, body_g))
    _add(grads, pose_layer_backward(model, r.cloth_cache, cloth_g,
                                    dw_extra=d_cloth_w))
    _add(grads, _scene_backward(model.scene, scene_g))
    return total, parts, grads, r
