import os
import gaussians as gs

PROJECTDIR = os.path.dirname(os.path.abspath(gs.__file__))
DATADIR = os.path.join(PROJECTDIR, 'data')
DEFAULT_CONFIG_PATH = os.path.join(DATADIR, 'desk_config.json')
DEFAULT_OUTDIR = os.path.join(PROJECTDIR, 'results')


def scene_dir(outdir):
    return os.path.join(outdir, 'scene')


def checkpoint_dir(outdir):
    return os.path.join(outdir, 'checkpoints')


def final_checkpoint_path(outdir):
    return os.path.join(checkpoint_dir(outdir), 'ckpt_final.npz')


def loss_csv_path(outdir):
    return os.path.join(outdir, 'losses.csv')


def render_dir(outdir):
    return os.path.join(outdir, 'render')


def eval_dir(outdir):
    return os.path.join(outdir, 'eval')
