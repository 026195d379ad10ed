# -*- coding: utf-8 -*-
"""
$ python run_ablations.py --help

Fits the same synthetic scene once per loss preset in
shared_variables.ABLATIONS and tabulates the held-out metrics, one row per
preset, into ablations.csv.

usage:

    $ cd $LGSPLATDIR/drivers
    $ python -u run_ablations.py --outdir ../results/ablations \
        --set train.iterations=500
"""
import os
import sys
import logging
import argparse
from datetime import datetime

import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import paths
import shared_variables as sv
import renderer as rd
import synthscene as ss
import training as tr
from configutils import load_config, apply_overrides, validate_config

LOGGER = logging.getLogger(__name__)


def run_one_ablation(scene, cfg, ablation, outdir, settings, split='test'):
    '''
    Fits with cfg['train']['ablation'] = ablation under outdir/ablation and
    returns the mean row of the held-out evaluation as a dict.
    '''
    cfg = apply_overrides(cfg, ['train.ablation="%s"' % ablation])
    runoutdir = os.path.join(outdir, ablation)
    model, _, losstable = tr.fit(scene, cfg, outdir=runoutdir,
                                 settings=settings)
    table = tr.evaluate(model, scene, cfg, split=split, settings=settings)
    table.to_csv(os.path.join(runoutdir, 'metrics_%s.csv' % split),
                 index=False)

    row = {'ablation': ablation}
    if len(table):
        mean = table[table['frame'] == 'mean'].iloc[0]
        row.update({k: float(v) for k, v in mean.items() if k != 'frame'})
    row['final_loss'] = (float(losstable['total'].iloc[-1])
                         if len(losstable) else float('nan'))
    LOGGER.info('%sZ: ablation %s done: %s' %
                (datetime.utcnow().isoformat(), ablation, row))
    return row


def main(outdir, configpath=paths.DEFAULT_CONFIG_PATH, overrides=None,
         ablations=None, threads=None):

    cfg = validate_config(apply_overrides(load_config(configpath), overrides))
    settings = rd.RenderSettings.from_config(cfg, threads=threads)

    scenedir = paths.scene_dir(outdir)
    if not os.path.exists(os.path.join(scenedir, 'scene.json')):
        ss.write_scene_dir(ss.synth_scene(cfg, settings=settings), scenedir)
    scene = ss.load_scene(scenedir)

    rows = [run_one_ablation(scene, cfg, ablation, outdir, settings)
            for ablation in (ablations or sorted(sv.ABLATIONS))]

    table = pd.DataFrame(rows)
    outpath = os.path.join(outdir, 'ablations.csv')
    table.to_csv(outpath, index=False)
    LOGGER.info('%sZ: wrote %s' % (datetime.utcnow().isoformat(), outpath))
    return table


if __name__ == '__main__':

    parser = argparse.ArgumentParser(
        description=('Fit every loss preset on one scene and tabulate '
                     'held-out metrics.')
    )
    parser.add_argument('--outdir', type=str,
        default=os.path.join(paths.DEFAULT_OUTDIR, 'ablations'),
        help=('one subdirectory per preset goes here'))
    parser.add_argument('--config', type=str,
        default=paths.DEFAULT_CONFIG_PATH,
        help=('JSON config (default: data/desk_config.json)'))
    parser.add_argument('--set', type=str, action='append', default=None,
        help=('section.key=value override; repeatable'))
    parser.add_argument('--ablations', type=str, nargs='+', default=None,
        choices=sorted(sv.ABLATIONS), help=('presets to run (default: all)'))
    parser.add_argument('--threads', type=int, default=None,
        help=('rasterizer worker threads (default: all cores)'))

    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format='%(message)s')

    main(args.outdir, configpath=args.config, overrides=args.set,
         ablations=args.ablations, threads=args.threads)
