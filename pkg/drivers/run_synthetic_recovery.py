# -*- coding: utf-8 -*-
"""
$ python run_synthetic_recovery.py --help

Synthetic recovery experiment: synthesize the desk scene, fit the layered
model for the configured iterations, score the held-out frames, and compare
against the recovery targets (held-out PSNR >= 28 dB, SSIM >= 0.90, matte
MSE <= 0.01 on the test split).

contents:

main
    synth_scene / write_scene_dir
    fit
    evaluate
    check_targets

usage:

    $ cd $LGSPLATDIR/drivers
    $ python -u run_synthetic_recovery.py --outdir ../results/recovery
"""
import os
import sys
import json
import time
import logging
import argparse
from datetime import datetime

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import paths
import renderer as rd
import synthscene as ss
import training as tr
import plotutils as pu
from configutils import load_config, apply_overrides, validate_config

LOGGER = logging.getLogger(__name__)

TARGETS = {'psnr': 28.0, 'ssim': 0.90, 'mask_mse': 0.01}


def check_targets(table, targets=TARGETS):
    '''
    Compares the 'mean' row of an evaluate() table against the targets.

    Returns:
        dict of metric -> (value, target, passed).
    '''
    mean = table[table['frame'] == 'mean'].iloc[0]
    out = {}
    for key, target in targets.items():
        value = float(mean[key])
        passed = value <= target if key == 'mask_mse' else value >= target
        out[key] = (value, target, passed)
    return out


def main(outdir, configpath=paths.DEFAULT_CONFIG_PATH, overrides=None,
         threads=None):

    cfg = validate_config(apply_overrides(load_config(configpath), overrides))
    settings = rd.RenderSettings.from_config(cfg, threads=threads)

    start = time.time()
    scenedir = paths.scene_dir(outdir)
    if os.path.exists(os.path.join(scenedir, 'scene.json')):
        LOGGER.info('%sZ: found scene in %s, not resynthesizing' %
                    (datetime.utcnow().isoformat(), scenedir))
    else:
        ss.write_scene_dir(ss.synth_scene(cfg, settings=settings), scenedir)
    scene = ss.load_scene(scenedir)

    model, _, losstable = tr.fit(scene, cfg, outdir=outdir, settings=settings)
    if len(losstable):
        pu.make_loss_plot(losstable, smooth=20,
                          savefig=os.path.join(outdir, 'losses.png'))

    rows = []
    for split in cfg['eval']['splits']:
        table = tr.evaluate(model, scene, cfg, split=split, settings=settings)
        table.to_csv(os.path.join(outdir, 'recovery_%s.csv' % split),
                     index=False)
        if split == 'test':
            for key, (value, target, passed) in check_targets(table).items():
                rows.append({'metric': key, 'value': value, 'target': target,
                             'passed': passed})

    elapsed = time.time() - start
    summary = pd.DataFrame(rows)
    summary.to_csv(os.path.join(outdir, 'recovery_summary.csv'), index=False)
    with open(os.path.join(outdir, 'recovery_summary.json'), 'w') as outfd:
        json.dump({'wallclock_sec': elapsed,
                   'all_passed': bool(np.all(summary['passed']))
                   if len(summary) else False,
                   'metrics': summary.to_dict(orient='records')},
                  outfd, indent=1)

    for _, r in summary.iterrows():
        LOGGER.info('%sZ: %s = %.4f (target %.4f) %s' %
                    (datetime.utcnow().isoformat(), r['metric'], r['value'],
                     r['target'], 'ok' if r['passed'] else 'MISSED'))
    LOGGER.info('%sZ: recovery run took %.1f min' %
                (datetime.utcnow().isoformat(), elapsed/60))
    return summary


if __name__ == '__main__':

    parser = argparse.ArgumentParser(
        description=('Synthesize, fit and score the desk-scale scene.')
    )
    parser.add_argument('--outdir', type=str,
        default=os.path.join(paths.DEFAULT_OUTDIR, 'recovery'),
        help=('where the scene, checkpoints, losses and metrics go'))
    parser.add_argument('--config', type=str,
        default=paths.DEFAULT_CONFIG_PATH,
        help=('JSON config (default: data/desk_config.json)'))
    parser.add_argument('--set', type=str, action='append', default=None,
        help=('section.key=value override; repeatable'))
    parser.add_argument('--threads', type=int, default=None,
        help=('rasterizer worker threads (default: all cores)'))

    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format='%(message)s')

    main(args.outdir, configpath=args.config, overrides=args.set,
         threads=args.threads)
