#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
$ python lgsplat.py --help

Layered Gaussian-splatting avatars: synthesize a ground-truth scene, fit the
layered model to it, render the passes, check the gradients, and score
held-out views.

usage:

    python lgsplat.py synth --outdir results --seed 7 --frames 3
    python lgsplat.py fit --outdir results --set train.iterations=200
    python lgsplat.py render --outdir results --frame 3
    python lgsplat.py eval --outdir results
    python lgsplat.py gradcheck --instances 100

Every command reads the default config, then --config, then each
--set section.key=value in order. Outputs go under --outdir:

    scene/                      synthetic ground truth (synth, fit)
    checkpoints/ckpt_*.npz      checkpoints (fit)
    losses.csv, losses.png      loss table and curves (fit)
    render/                     pass PNGs, strip and montage (render)
    eval/metrics.json           per-view and mean metrics (eval)
    gradcheck.csv               gradient-check report (gradcheck)

exit codes: 0 success, 1 usage, 2 validation, 3 numerical failure.
"""

import os
import sys
import json
import logging
import argparse
from glob import glob
from datetime import datetime

import numpy as np

import shared_variables as sv
import paths
from configutils import (load_config, apply_overrides,
                         validate_config, write_config, full_scale)
from skeleton import read_skeleton_json
import renderer as rd
import avatar as av
import synthscene as ss
import training as tr
import gradcheck as gc
import imageutils as iu
import plotutils as pu

LOGGER = logging.getLogger(__name__)


class UsageParser(argparse.ArgumentParser):

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write('%s: error: %s\n' % (self.prog, message))
        sys.exit(sv.EXIT_USAGE)


def build_config(args):
    '''
    Defaults <- --config file <- --seed <- --set overrides, then validated.
    '''
    cfg = load_config(args.config)
    if args.full_scale:
        cfg = full_scale(cfg)
    overrides = []
    if args.seed is not None:
        overrides += ['scene.seed=%d' % args.seed, 'train.seed=%d' % args.seed]
    if getattr(args, 'frames', None) is not None:
        overrides.append('scene.frames=%d' % args.frames)
    if getattr(args, 'iterations', None) is not None:
        overrides.append('train.iterations=%d' % args.iterations)
    cfg = apply_overrides(cfg, overrides + (args.set or []))
    return validate_config(cfg)


def _settings(cfg, args):
    return rd.RenderSettings.from_config(cfg, threads=args.threads)


def _ensure_scene(cfg, args):
    '''
    The scene under outdir/scene, synthesized and written first if missing.
    '''
    scenedir = paths.scene_dir(args.outdir)
    if not os.path.exists(os.path.join(scenedir, 'scene.json')):
        scene = ss.synth_scene(cfg, settings=_settings(cfg, args))
        ss.write_scene_dir(scene, scenedir)
    return ss.load_scene(scenedir)


##############
## COMMANDS ##
##############

def cmd_synth(args, cfg):
    scene = ss.synth_scene(cfg, settings=_settings(cfg, args))
    scenedir = ss.write_scene_dir(scene, paths.scene_dir(args.outdir))
    write_config(cfg, os.path.join(scenedir, 'config.json'))
    return sv.EXIT_OK


def cmd_fit(args, cfg):
    scene = _ensure_scene(cfg, args)
    if not os.path.exists(args.outdir):
        os.makedirs(args.outdir)
    write_config(cfg, os.path.join(args.outdir, 'config.json'))

    _, _, table = tr.fit(scene, cfg, outdir=args.outdir,
                         settings=_settings(cfg, args))
    if len(table):
        pu.make_loss_plot(table, smooth=10,
                          savefig=os.path.join(args.outdir, 'losses.png'))
    LOGGER.info('%sZ: fit finished, checkpoint %s' %
                (datetime.utcnow().isoformat(),
                 paths.final_checkpoint_path(args.outdir)))
    return sv.EXIT_OK


def _render_inputs(args):
    '''
    (pose, camera): from --pose/--camera files when given, else from the
    scene frame --frame.
    '''
    pose = camera = None
    if args.pose:
        _, pose, poses = read_skeleton_json(args.pose)
        pose = pose if pose is not None else (poses[0] if poses else None)
        if pose is None:
            raise ValueError('%s holds no pose' % args.pose)
    if args.camera:
        camera = rd.read_cameras_json(args.camera)[0]
    if pose is None or camera is None:
        scene = ss.load_scene(paths.scene_dir(args.outdir))
        if not (0 <= args.frame < scene.frame_count):
            raise ValueError('frame %d is outside the %d-frame scene'
                             % (args.frame, scene.frame_count))
        frame = scene.frame(args.frame)
        pose = pose if pose is not None else frame['pose']
        camera = camera if camera is not None else frame['camera']
    return pose, camera


def cmd_render(args, cfg):
    ckpt = args.checkpoint or paths.final_checkpoint_path(args.outdir)
    model, _, ckpt_cfg, _ = tr.load_checkpoint(ckpt)
    pose, camera = _render_inputs(args)
    background = np.asarray(ckpt_cfg['render']['background'])
    settings = _settings(ckpt_cfg, args)

    r = av.render_frame(model, pose, camera, background, settings=settings)
    scene_out, _ = rd.render_scene_only(r.scene, camera, background,
                                        settings=settings)

    outdir = paths.render_dir(args.outdir)
    iu.write_rgb_png(os.path.join(outdir, 'final.png'), r.final)
    iu.write_rgb_png(os.path.join(outdir, 'base.png'), r.base.rgb)
    iu.write_rgb_png(os.path.join(outdir, 'cloth.png'), r.cloth_pass.rgb)
    iu.write_gray16_png(os.path.join(outdir, 'matte.png'), r.matte)
    iu.write_rgb_png(os.path.join(outdir, 'scene.png'), scene_out.rgb)
    iu.write_depth_png(os.path.join(outdir, 'depth.png'), r.base.depth)
    iu.passes_to_stamps(r.final, r.base.rgb, r.cloth_pass.rgb, r.matte,
                        out_fname=os.path.join(outdir, 'strip.png'))
    pu.make_pass_montage(r.final, r.base.rgb, r.cloth_pass.rgb, r.matte,
                         savefig=os.path.join(outdir, 'passes.png'))
    LOGGER.info('%sZ: wrote render passes to %s' %
                (datetime.utcnow().isoformat(), outdir))
    return sv.EXIT_OK


def _eval_image_sets(pred_dir, gt_dir, window):
    preds = sorted(glob(os.path.join(pred_dir, '*.png')))
    if not preds:
        raise ValueError('no PNG images in %s' % pred_dir)
    rows = []
    for pred in preds:
        gt = os.path.join(gt_dir, os.path.basename(pred))
        if not os.path.exists(gt):
            raise ValueError('no ground truth for %s in %s' % (pred, gt_dir))
        a, b = iu.read_rgb_png(pred), iu.read_rgb_png(gt)
        rows.append({'view': os.path.basename(pred), 'psnr': tr.psnr(a, b),
                     'ssim': tr.ssim_metric(a, b, window=window)})
    return rows


def cmd_eval(args, cfg):
    window = int(cfg['losses']['ssim_window'])
    if args.pred_dir:
        gt_dir = args.gt_dir or os.path.join(paths.scene_dir(args.outdir),
                                             'frames')
        rows = _eval_image_sets(args.pred_dir, gt_dir, window)
        metrics = {'views': rows,
                   'mean': {'psnr': float(np.mean([r['psnr'] for r in rows])),
                            'ssim': float(np.mean([r['ssim'] for r in rows]))}}
    else:
        ckpt = args.checkpoint or paths.final_checkpoint_path(args.outdir)
        model, _, ckpt_cfg, _ = tr.load_checkpoint(ckpt)
        scene = ss.load_scene(paths.scene_dir(args.outdir))
        metrics = {}
        for split in args.splits or ckpt_cfg['eval']['splits']:
            table = tr.evaluate(model, scene, ckpt_cfg, split=split,
                                settings=_settings(ckpt_cfg, args))
            if not len(table):
                continue
            views = table[table['frame'] != 'mean']
            mean = table[table['frame'] == 'mean'].iloc[0]
            metrics[split] = {
                'views': json.loads(views.to_json(orient='records')),
                'mean': {k: float(v) for k, v in mean.items()
                         if k != 'frame'}
            }
            table.to_csv(_mkdir_join(paths.eval_dir(args.outdir),
                                     'metrics_%s.csv' % split),
                         index=False)

    outpath = _mkdir_join(paths.eval_dir(args.outdir), 'metrics.json')
    with open(outpath, 'w') as outfd:
        json.dump(metrics, outfd, indent=1, sort_keys=True)
    LOGGER.info('%sZ: wrote %s' % (datetime.utcnow().isoformat(), outpath))
    return sv.EXIT_OK


def _mkdir_join(outdir, name):
    if not os.path.exists(outdir):
        os.makedirs(outdir)
    return os.path.join(outdir, name)


def cmd_gradcheck(args, cfg):
    seed = args.seed if args.seed is not None else 0
    table, passed = gc.run_suite(seed=seed, instances=args.instances,
                                 checks=args.checks)
    table.to_csv(_mkdir_join(args.outdir, 'gradcheck.csv'), index=False)
    for _, row in table.iterrows():
        print('%-18s %5d probes %4d kinks  max rel err %.3e  %s' %
              (row['check'], row['probes'], row['skipped'],
               row['max_rel_err'], 'ok' if row['passed'] else 'FAIL'))
    if not passed:
        LOGGER.error('%sZ: ERR! gradient check failed' %
                     datetime.utcnow().isoformat())
        return sv.EXIT_NUMERICAL
    return sv.EXIT_OK


COMMANDS = {'synth': cmd_synth, 'fit': cmd_fit, 'render': cmd_render,
            'eval': cmd_eval, 'gradcheck': cmd_gradcheck}


def make_parser():

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None,
        help=('JSON config file merged over the defaults '
              '(see docs/config.md)'))
    common.add_argument('--outdir', type=str, default=paths.DEFAULT_OUTDIR,
        help=('output directory shared by all commands'))
    common.add_argument('--seed', type=int, default=None,
        help=('seed for the scene and the training loop'))
    common.add_argument('--set', type=str, action='append', default=None,
        metavar='SECTION.KEY=VALUE',
        help=('config override, e.g. losses.lambda_sim=2.0; repeatable'))
    common.add_argument('--threads', type=int, default=None,
        help=('rasterizer worker threads (default: render.threads, '
              '0 = all cores)'))
    common.add_argument('--verbose', action='store_true',
        help=('debug logging'))
    common.add_argument('--full-scale', dest='full_scale', action='store_true',
        help=('256x256x32 triplanes, 512x512 frames, 20k iterations'))

    parser = UsageParser(
        description=('Fit and render layered Gaussian-splatting avatars.')
    )
    sub = parser.add_subparsers(dest='command', parser_class=UsageParser)
    sub.required = True

    p = sub.add_parser('synth', parents=[common],
                       help='write a synthetic ground-truth scene')
    p.add_argument('--frames', type=int, default=None,
        help=('number of frames (scene.frames)'))

    p = sub.add_parser('fit', parents=[common],
                       help='fit the layered model to the scene')
    p.add_argument('--iterations', type=int, default=None,
        help=('training iterations (train.iterations)'))

    p = sub.add_parser('render', parents=[common],
                       help='render final, base, cloth, matte and scene')
    p.add_argument('--checkpoint', type=str, default=None,
        help=('checkpoint (default: outdir/checkpoints/ckpt_final.npz)'))
    p.add_argument('--frame', type=int, default=0,
        help=('scene frame supplying pose and camera'))
    p.add_argument('--camera', type=str, default=None,
        help=('camera JSON overriding the frame camera'))
    p.add_argument('--pose', type=str, default=None,
        help=('skeleton JSON with a pose overriding the frame pose'))

    p = sub.add_parser('eval', parents=[common],
                       help='PSNR/SSIM on held-out views')
    p.add_argument('--checkpoint', type=str, default=None,
        help=('checkpoint (default: outdir/checkpoints/ckpt_final.npz)'))
    p.add_argument('--splits', type=str, nargs='+', default=None,
        choices=list(ss.FRAME_SPLITS), help=('frame splits to score'))
    p.add_argument('--pred-dir', dest='pred_dir', type=str, default=None,
        help=('score the PNGs here against same-named ground-truth PNGs'))
    p.add_argument('--gt-dir', dest='gt_dir', type=str, default=None,
        help=('ground-truth PNGs for --pred-dir '
              '(default: outdir/scene/frames)'))

    p = sub.add_parser('gradcheck', parents=[common],
                       help='analytic vs finite-difference gradients')
    p.add_argument('--instances', type=int, default=100,
        help=('random instances per check'))
    p.add_argument('--checks', type=str, nargs='+', default=None,
        choices=list(gc.CHECKS), help=('subset of checks to run'))

    return parser


def main(argv=None):

    parser = make_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='[%(levelname)s|%(name)s] %(message)s'
    )

    try:
        cfg = build_config(args)
        return COMMANDS[args.command](args, cfg)
    except tr.NumericalFailure as e:
        LOGGER.error('%sZ: ERR! numerical failure: %s' %
                     (datetime.utcnow().isoformat(), e))
        return sv.EXIT_NUMERICAL
    except (ValueError, OSError) as e:
        LOGGER.error('%sZ: ERR! %s' % (datetime.utcnow().isoformat(), e))
        return sv.EXIT_VALIDATION


if __name__ == '__main__':
    sys.exit(main())
