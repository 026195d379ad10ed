#!/usr/bin/env python

'''
training.py - fitting the layered avatar to a synthetic scene: learning-rate
schedules, Adam, checkpoints, the training loop and the evaluation metrics.

One iteration samples a training frame, runs the full forward pass with the
three render passes, evaluates the weighted objective, back-propagates to
every parameter and takes one Adam step. Terms whose weight is zero are not
evaluated and show up as 0 in the loss table.

Checkpoints are single npz files with a versioned header and the sections
layers, triplanes, decoders, optimizer, config and rng-state. They are
written to a temporary file and renamed into place, so an interrupted run
keeps its last complete checkpoint.

====================
schedules and optimizer:
    ScheduleSpec
    schedules_from_config
    lr_at
    OptimizerState
    adam_step

checkpoints:
    save_checkpoint
    load_checkpoint

fitting:
    init_model_for_scene
    fit

metrics:
    psnr
    ssim_metric
    crop_box
    evaluate
====================
'''

import os
import json
import logging
from collections import OrderedDict
from datetime import datetime
from zipfile import BadZipFile

import numpy as np
import pandas as pd
from scipy.special import logit

import shared_variables as sv
import paths
from configutils import apply_ablation, validate_config
from gaussians import GaussianLayer, LayerTag
from skeleton import Skeleton
from triplane import TriPlaneField, AvatarField
from decoders import MlpParams, DecoderSet
import losses
import renderer as rd
import avatar as av

LOGGER = logging.getLogger(__name__)

LOSS_COLUMNS = (['iteration', 'frame', 'total'] + list(losses.LOSS_TERMS) +
                ['lr_position'])


class NumericalFailure(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


###############
## SCHEDULES ##
###############

class ScheduleSpec(object):
    '''
    Exponential decay from lr_init to lr_final over horizon iterations;
    constant when lr_init == lr_final.
    '''

    def __init__(self, lr_init, lr_final=None, horizon=1):
        self.lr_init = float(lr_init)
        self.lr_final = float(lr_init if lr_final is None else lr_final)
        self.horizon = int(horizon)
        if not (self.lr_init >= self.lr_final > 0):
            raise ValueError('need lr_init >= lr_final > 0, got %g, %g'
                             % (self.lr_init, self.lr_final))
        if self.horizon < 1:
            raise ValueError('schedule horizon must be positive')


def lr_at(sched, t):
    if t < 0:
        raise ValueError('iteration must be nonnegative')
    if sched.lr_init == sched.lr_final or t == 0:
        return sched.lr_init
    if t >= sched.horizon:
        return sched.lr_final
    frac = t/sched.horizon
    return sched.lr_init*(sched.lr_final/sched.lr_init)**frac


def schedules_from_config(cfg):
    '''
    One ScheduleSpec per parameter group from the 'optim' section; only
    positions decay.
    '''
    op = cfg['optim']
    horizon = int(cfg['train']['horizon'])
    return OrderedDict([
        ('positions', ScheduleSpec(op['lr_position_init'],
                                   op['lr_position_final'], horizon)),
        ('rotations', ScheduleSpec(op['lr_rotation'], horizon=horizon)),
        ('scales', ScheduleSpec(op['lr_scale'], horizon=horizon)),
        ('opacities', ScheduleSpec(op['lr_opacity'], horizon=horizon)),
        ('sh', ScheduleSpec(op['lr_sh'], horizon=horizon)),
        ('triplanes', ScheduleSpec(op['lr_triplane'], horizon=horizon)),
        ('decoders', ScheduleSpec(op['lr_decoder'], horizon=horizon)),
    ])


###############
## OPTIMIZER ##
###############

class OptimizerState(object):
    '''
    Adam moments per parameter (shaped like the parameter), a shared step
    counter, and the per-group schedules.
    '''

    def __init__(self, schedules, beta1=0.9, beta2=0.999, eps=1e-15):
        self.schedules = schedules
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = OrderedDict()
        self.v = OrderedDict()

    @classmethod
    def from_config(cls, cfg):
        op = cfg['optim']
        return cls(schedules_from_config(cfg), op['beta1'], op['beta2'],
                   op['eps'])

    def lr(self, group):
        return lr_at(self.schedules[group], self.step)


def adam_step(state, params, grads, group_of=av.param_group):
    '''
    One bias-corrected Adam update. Parameters without a gradient are left
    alone.

    Returns:
        new {name: array}; state's moments and step advance in place.
    '''
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalFailure('non-finite gradient in parameter group '
                                   '%s (%s)' % (group_of(name), name))
        if g.shape != params[name].shape:
            raise ValueError('gradient for %s is %s, parameter is %s'
                             % (name, g.shape, params[name].shape))

    lrs = {group: state.lr(group) for group in state.schedules}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step

    out = OrderedDict()
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1)*g if m is None else b1*m + (1.0 - b1)*g
        v = (1.0 - b2)*g*g if v is None else b2*v + (1.0 - b2)*g*g
        state.m[name] = m
        state.v[name] = v
        update = (m/corr1)/(np.sqrt(v/corr2) + state.eps)
        out[name] = p - lrs[group_of(name)]*update
    return out


#################
## CHECKPOINTS ##
#################

def _section_key(section, name):
    return '%s:%s' % (section, name)


def save_checkpoint(path, model, state, cfg, rng):
    '''
    Writes the model, optimizer, config and rng state atomically.
    '''
    arrays = OrderedDict()
    arrays['header'] = np.array(json.dumps(
        {'version': sv.CHECKPOINT_VERSION,
         'sections': sv.CHECKPOINT_SECTIONS}
    ))

    for lname in ('body', 'cloth', 'scene'):
        layer = model.layer(lname)
        for fname in av.LAYER_FIELDS:
            arrays[_section_key('layers', '%s.%s' % (lname, fname))] = \
                getattr(layer, fname)
        if layer.skin_binding is not None:
            arrays[_section_key('layers', '%s.skin_binding' % lname)] = \
                layer.skin_binding
    sk = model.skeleton
    arrays[_section_key('layers', 'skeleton.parents')] = np.array(sk.parents)
    arrays[_section_key('layers', 'skeleton.translations')] = \
        sk.rest_local_translations
    arrays[_section_key('layers', 'skeleton.rotations')] = \
        sk.rest_local_rotations
    arrays[_section_key('layers', 'skeleton.names')] = np.array(sk.names)
    arrays[_section_key('layers', 'body_weights')] = model.body_weights
    arrays[_section_key('layers', 'cloth_weights')] = model.cloth_weights
    arrays[_section_key('layers', 'cloth_edges')] = model.cloth_edges

    for lname in ('body', 'cloth'):
        field = model.field_for(lname)
        arrays[_section_key('triplanes', lname)] = field.planes
        arrays[_section_key('triplanes', lname + '.bbox_min')] = field.bbox_min
        arrays[_section_key('triplanes', lname + '.bbox_max')] = field.bbox_max

    for name, arr in model.decoders.named().items():
        arrays[_section_key('decoders', name)] = arr
    arrays[_section_key('decoders', 'joint_count')] = \
        np.array(model.decoders.joint_count)

    arrays[_section_key('optimizer', 'step')] = np.array(state.step)
    for name, m in state.m.items():
        arrays[_section_key('optimizer', 'm.' + name)] = m
        arrays[_section_key('optimizer', 'v.' + name)] = state.v[name]

    arrays[_section_key('config', 'json')] = np.array(json.dumps(
        cfg, sort_keys=True))
    arrays[_section_key('rng-state', 'json')] = np.array(json.dumps(
        rng.bit_generator.state))

    outdir = os.path.dirname(os.path.abspath(path))
    if not os.path.exists(outdir):
        os.makedirs(outdir)
    tmppath = path + '.tmp'
    with open(tmppath, 'wb') as outfd:
        np.savez(outfd, **arrays)
    os.replace(tmppath, path)

    LOGGER.info('%sZ: wrote checkpoint %s at step %d' %
                (datetime.utcnow().isoformat(), path, state.step))
    return path


def _section(data, section):
    prefix = section + ':'
    out = OrderedDict((k[len(prefix):], data[k]) for k in data.files
                      if k.startswith(prefix))
    if not out:
        raise CheckpointError('checkpoint is missing section %s' % section)
    return out


def _need(sec, section, key):
    if key not in sec:
        raise CheckpointError('checkpoint section %s is missing %s'
                              % (section, key))
    return sec[key]


def load_checkpoint(path):
    '''
    Returns (model, optimizer state, config, rng).
    '''
    if not os.path.exists(path):
        raise CheckpointError('checkpoint does not exist: %s' % path)
    try:
        with np.load(path, allow_pickle=False) as data:
            if 'header' not in data.files:
                raise CheckpointError('checkpoint is missing section header')
            header = json.loads(str(data['header']))
            if header.get('version') != sv.CHECKPOINT_VERSION:
                raise CheckpointError('unsupported checkpoint version %r'
                                      % header.get('version'))
            secs = {name: _section(data, name)
                    for name in sv.CHECKPOINT_SECTIONS}
    except CheckpointError:
        raise
    except (BadZipFile, ValueError, OSError, EOFError) as e:
        raise CheckpointError('checkpoint %s is corrupt: %s' % (path, e))

    cfg = json.loads(str(_need(secs['config'], 'config', 'json')))

    lay = secs['layers']
    skeleton = Skeleton(
        _need(lay, 'layers', 'skeleton.parents').tolist(),
        _need(lay, 'layers', 'skeleton.translations'),
        rest_local_rotations=_need(lay, 'layers', 'skeleton.rotations'),
        names=[str(n) for n in _need(lay, 'layers', 'skeleton.names')]
    )
    layers = {}
    for lname, tag in (('body', LayerTag.Body), ('cloth', LayerTag.Cloth),
                       ('scene', LayerTag.Scene)):
        fields = [_need(lay, 'layers', '%s.%s' % (lname, f))
                  for f in av.LAYER_FIELDS]
        binding = (None if tag == LayerTag.Scene else
                   _need(lay, 'layers', '%s.skin_binding' % lname))
        layers[lname] = GaussianLayer(tag, *fields, skin_binding=binding)

    tps = secs['triplanes']
    fields = [TriPlaneField(_need(tps, 'triplanes', lname),
                            _need(tps, 'triplanes', lname + '.bbox_min'),
                            _need(tps, 'triplanes', lname + '.bbox_max'))
              for lname in ('body', 'cloth')]

    decs = secs['decoders']
    heads = []
    for hname in ('D_A', 'D_G', 'D_D'):
        nlayers = len([k for k in decs if k.startswith(hname + '.W')])
        if nlayers == 0:
            raise CheckpointError('checkpoint section decoders is missing %s'
                                  % hname)
        heads.append(MlpParams(
            [_need(decs, 'decoders', '%s.W%d' % (hname, k))
             for k in range(nlayers)],
            [_need(decs, 'decoders', '%s.b%d' % (hname, k))
             for k in range(nlayers)]
        ))
    decoders = DecoderSet(*heads, joint_count=int(
        _need(decs, 'decoders', 'joint_count')))

    model = av.AvatarModel(skeleton, layers['body'], layers['cloth'],
                           layers['scene'], AvatarField(*fields), decoders,
                           _need(lay, 'layers', 'body_weights'),
                           _need(lay, 'layers', 'cloth_weights'),
                           _need(lay, 'layers', 'cloth_edges'))

    opt = secs['optimizer']
    state = OptimizerState.from_config(cfg)
    state.step = int(_need(opt, 'optimizer', 'step'))
    for key, arr in opt.items():
        if key.startswith('m.'):
            name = key[2:]
            state.m[name] = arr
            state.v[name] = _need(opt, 'optimizer', 'v.' + name)

    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(
        str(_need(secs['rng-state'], 'rng-state', 'json'))
    )
    return model, state, cfg, rng


#############
## FITTING ##
#############

def init_model_for_scene(scene, cfg, rng):
    '''
    Body and cloth layers from the rest meshes, the scene layer from the
    ground-truth scene geometry with gray color and initial opacity.
    '''
    gt = scene.scene_layer
    sh = np.zeros_like(gt.sh)
    sh[:, 0, :] = (np.array(sv.INIT_GRAY) - sv.SH_DC_OFFSET)/sv.SH_C0
    scene_layer = GaussianLayer(LayerTag.Scene, gt.centers.copy(),
                                gt.quats.copy(), gt.log_scales.copy(),
                                np.full(len(gt), float(logit(sv.INIT_OPACITY))),
                                sh)
    return av.init_model(scene.skeleton, scene.body_mesh, scene.cloth_mesh,
                         scene.body_weights, scene.cloth_weights,
                         scene_layer, cfg, rng)


def _write_losses(rows, outdir):
    table = pd.DataFrame(rows, columns=LOSS_COLUMNS)
    if outdir:
        table.to_csv(paths.loss_csv_path(outdir), index=False,
                     float_format='%.17g')
    return table


def fit(scene, cfg, outdir=None, settings=None, model=None, state=None,
        rng=None):
    '''
    Trains for cfg['train']['iterations'] steps on the scene's training
    frames.

    Returns:
        (model, optimizer state, loss DataFrame). With an outdir, the loss
        CSV and checkpoints (every train.checkpoint_every steps and a final
        one) are written under it.
    '''
    cfg = apply_ablation(validate_config(cfg))
    tr = cfg['train']
    if rng is None:
        rng = np.random.default_rng(int(tr['seed']))
    if model is None:
        model = init_model_for_scene(scene, cfg, rng)
    if state is None:
        state = OptimizerState.from_config(cfg)
    settings = settings or rd.RenderSettings.from_config(cfg)
    loss_cfg = losses.LossConfig.from_config(cfg)
    background = np.asarray(cfg['render']['background'], dtype=np.float64)

    train_frames = scene.split('train')
    if not train_frames:
        raise ValueError('scene has no training frames')

    iterations = int(tr['iterations'])
    log_every = max(1, int(tr['log_every']))
    ckpt_every = int(tr['checkpoint_every'])
    ckptdir = paths.checkpoint_dir(outdir) if outdir else None
    if outdir and not os.path.exists(outdir):
        os.makedirs(outdir)

    LOGGER.info('%sZ: fitting %d iterations on %d training frames '
                '(ablation %s)' %
                (datetime.utcnow().isoformat(), iterations,
                 len(train_frames), tr['ablation']))

    rows = []
    for it in range(iterations):
        k = train_frames[int(rng.integers(len(train_frames)))]
        total, parts, grads, _ = av.frame_loss_and_grads(
            model, scene.frame(k), loss_cfg, background, settings=settings
        )
        if not np.isfinite(total):
            _write_losses(rows, outdir)
            raise NumericalFailure('non-finite loss at iteration %d '
                                   '(frame %d)' % (it, k))

        lr_pos = state.lr('positions')
        rows.append([it, k, total] + [parts[t] for t in losses.LOSS_TERMS] +
                    [lr_pos])

        params = av.model_params(model)
        av.set_model_params(model, adam_step(state, params, grads))

        if it % log_every == 0:
            LOGGER.info('%sZ: iter %d frame %d loss %.6f lr_pos %.3g' %
                        (datetime.utcnow().isoformat(), it, k, total,
                         lr_pos))
        if ckptdir and ckpt_every > 0 and (it + 1) % ckpt_every == 0:
            save_checkpoint(os.path.join(ckptdir, 'ckpt_%06d.npz' % (it + 1)),
                            model, state, cfg, rng)
            _write_losses(rows, outdir)

    table = _write_losses(rows, outdir)
    if outdir:
        save_checkpoint(paths.final_checkpoint_path(outdir), model, state,
                        cfg, rng)
    return model, state, table


#############
## METRICS ##
#############

def psnr(img, gt):
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if img.shape != gt.shape:
        raise losses.ShapeMismatch('PSNR inputs differ: %s vs %s'
                                   % (img.shape, gt.shape))
    mse = float(np.mean((img - gt)**2))
    if mse < sv.PSNR_MSE_FLOOR:
        return sv.PSNR_CAP_DB
    return min(sv.PSNR_CAP_DB, 10.0*np.log10(1.0/mse))


def ssim_metric(img, gt, window=11):
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if img.shape != gt.shape:
        raise losses.ShapeMismatch('SSIM inputs differ: %s vs %s'
                                   % (img.shape, gt.shape))
    return float(np.mean(losses.ssim_map(img, gt, window=window)))


def crop_box(img, box):
    r0, r1, c0, c1 = [int(x) for x in box]
    return img[r0:r1, c0:c1]


def evaluate(model, scene, cfg, split='test', settings=None):
    '''
    Renders every frame of a split and scores it.

    Returns:
        pandas DataFrame with one row per frame (frame, psnr, ssim,
        psnr_human, ssim_human, mask_mse) and a final 'mean' row.
    '''
    settings = settings or rd.RenderSettings.from_config(cfg)
    background = np.asarray(cfg['render']['background'], dtype=np.float64)
    window = int(cfg['losses']['ssim_window'])
    rows = []
    for k in scene.split(split):
        frame = scene.frame(k)
        r = av.render_frame(model, frame['pose'], frame['camera'],
                            background, settings=settings)
        gt = frame['image']
        row = {'frame': k, 'psnr': psnr(r.final, gt),
               'ssim': ssim_metric(r.final, gt, window=window),
               'mask_mse': float(np.mean((r.matte - frame['mask'])**2))}
        if cfg['eval']['human_crop']:
            pc = crop_box(r.final, frame['human_box'])
            gc = crop_box(gt, frame['human_box'])
            row['psnr_human'] = psnr(pc, gc)
            row['ssim_human'] = ssim_metric(pc, gc, window=window)
        rows.append(row)
        LOGGER.debug('%sZ: %s frame %d psnr %.3f' %
                     (datetime.utcnow().isoformat(), split, k, row['psnr']))

    table = pd.DataFrame(rows)
    if len(table):
        means = table.mean(numeric_only=True).to_dict()
        means['frame'] = 'mean'
        table = pd.concat([table, pd.DataFrame([means])], ignore_index=True)
    return table
