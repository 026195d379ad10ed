#!/usr/bin/env python

'''
configutils.py - configuration handling for the layered splatting engine.

A configuration is a nested dict with the same sections and keys as
shared_variables.DEFAULT_CONFIG. JSON files and dotted command-line overrides
can only change existing keys; anything else is rejected.

====================
    load_config
    apply_overrides
    validate_config
    write_config
    apply_ablation
    full_scale
====================
'''

import os
import copy
import json
import logging
from datetime import datetime

import shared_variables as sv

LOGGER = logging.getLogger(__name__)


class InvalidConfig(ValueError):
    pass


def default_config():
    return copy.deepcopy(sv.DEFAULT_CONFIG)


def _merge_into(base, update, prefix=''):
    for key, val in update.items():
        dotted = prefix + key
        if key not in base:
            raise InvalidConfig('unknown config key: %s' % dotted)
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise InvalidConfig('config section %s must be an object'
                                    % dotted)
            _merge_into(base[key], val, prefix=dotted+'.')
        else:
            base[key] = val


def load_config(path=None):
    '''
    Returns the default config, deep-merged with the JSON file at path (if
    given). Unknown keys raise InvalidConfig.
    '''
    cfg = default_config()
    if path is None:
        return cfg

    if not os.path.exists(path):
        raise InvalidConfig('config file does not exist: %s' % path)

    with open(path) as infd:
        try:
            update = json.load(infd)
        except json.JSONDecodeError as e:
            raise InvalidConfig('config file %s is not valid JSON: %s'
                                % (path, e))

    _merge_into(cfg, update)
    LOGGER.debug('%sZ: loaded config from %s' %
                 (datetime.utcnow().isoformat(), path))
    return cfg


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, overrides):
    '''
    Applies overrides of the form "section.key=value". Values are parsed as
    JSON where possible (so 2.0, true, [1,2] work), else kept as strings.
    '''
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if '=' not in item:
            raise InvalidConfig('override must look like key=value: %s'
                                % item)
        dotted, text = item.split('=', 1)
        keys = dotted.strip().split('.')
        node = cfg
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise InvalidConfig('unknown config key: %s' % dotted)
            node = node[key]
        if keys[-1] not in node or isinstance(node[keys[-1]], dict):
            raise InvalidConfig('unknown config key: %s' % dotted)
        node[keys[-1]] = _parse_value(text.strip())
    return cfg


def validate_config(cfg):
    '''
    Checks the documented ranges. Raises InvalidConfig on the first problem.
    '''
    sc = cfg['scene']
    if not (6 <= int(sc['joints']) <= 24):
        raise InvalidConfig('scene.joints must be in 6..24')
    if not (1 <= int(sc['frames']) <= 200):
        raise InvalidConfig('scene.frames must be in 1..200')
    if not (8 <= int(sc['resolution']) <= 512):
        raise InvalidConfig('scene.resolution must be in 8..512')
    for key in ('n_body', 'n_cloth', 'n_scene'):
        if int(sc[key]) < 1:
            raise InvalidConfig('scene.%s must be positive' % key)

    tp = cfg['triplane']
    if int(tp['res']) < 2 or int(tp['channels']) < 1:
        raise InvalidConfig('triplane.res must be >= 2, channels >= 1')

    lo = cfg['losses']
    for key in ('lambda_l1', 'lambda_ssim', 'lambda_lpips', 'lambda_sim',
                'lambda_arap', 'lambda_mask', 'lambda_cloth_lbs'):
        if float(lo[key]) < 0:
            raise InvalidConfig('losses.%s must be nonnegative' % key)
    if float(lo['gm_scale']) <= 0:
        raise InvalidConfig('losses.gm_scale must be positive')
    if int(lo['ssim_window']) < 1 or int(lo['ssim_window']) % 2 == 0:
        raise InvalidConfig('losses.ssim_window must be a positive odd int')
    if float(lo['ssim_c1']) <= 0 or float(lo['ssim_c2']) <= 0:
        raise InvalidConfig('losses.ssim_c1/ssim_c2 must be positive')

    op = cfg['optim']
    if not (float(op['lr_position_init']) >= float(op['lr_position_final'])
            > 0):
        raise InvalidConfig('need lr_position_init >= lr_position_final > 0')

    tr = cfg['train']
    if int(tr['iterations']) < 0 or int(tr['horizon']) < 1:
        raise InvalidConfig('train.iterations >= 0 and train.horizon >= 1')
    if tr['ablation'] not in sv.ABLATIONS:
        raise InvalidConfig('train.ablation must be one of %s'
                            % sorted(sv.ABLATIONS))

    if len(cfg['render']['background']) != 3:
        raise InvalidConfig('render.background must be an rgb triple')

    return cfg


def write_config(cfg, path):
    with open(path, 'w') as outfd:
        json.dump(cfg, outfd, indent=2, sort_keys=True)
    return path


def apply_ablation(cfg):
    '''
    Zeroes the loss weights dropped by cfg['train']['ablation'].
    '''
    cfg = copy.deepcopy(cfg)
    dropped = sv.ABLATIONS[cfg['train']['ablation']]
    for key in dropped or ():
        cfg['losses'][key] = 0.0
    return cfg


def full_scale(cfg):
    '''
    Switches to the full-size settings: 256x256x32 triplanes, 512x512 frames,
    20k iterations over a 20k-iteration schedule.
    '''
    cfg = copy.deepcopy(cfg)
    cfg['triplane']['res'] = 256
    cfg['triplane']['channels'] = 32
    cfg['scene']['resolution'] = 512
    cfg['train']['iterations'] = 20000
    cfg['train']['horizon'] = 20000
    return cfg
