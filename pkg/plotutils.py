'''
plotutils.py

Diagnostic figures for fitting runs: loss curves from the loss table and a
labelled montage of the render passes.
'''

import os

import numpy as np
import pandas as pd
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

import losses


def get_plot_label(name, type='legend'):
    '''
    Human-readable label for a loss-table column.
    '''
    labels = {'total': 'total loss', 'l1': 'L1', 'ssim': '1 - SSIM',
              'lpips': 'LPIPS', 'cloth_lbs': 'cloth LBS', 'sim': 'Chamfer (GM)',
              'arap': 'ARAP', 'mask': 'mask MSE',
              'lr_position': 'position lr', 'iteration': 'iteration'}
    label = labels.get(name, name)
    if type == 'ylabel' and name != 'iteration':
        return 'loss' if name in losses.LOSS_TERMS + ('total',) else label
    return label


def read_loss_table(losscsv):
    return pd.read_csv(losscsv)


def make_loss_plot(table, ycols=None, logy=True, smooth=1, figsize=(8, 6),
                   title=None, newfig=True, savefig=False):
    '''
    Loss terms against iteration.

    Args:
        table: DataFrame (or path to the loss CSV).
        ycols (list or None): columns to draw; default total plus every term
        that is not identically zero.
        smooth (int): rolling-mean window in iterations.
        savefig: filename to save the figure to.
    '''
    if isinstance(table, str):
        table = read_loss_table(table)
    if ycols is None:
        ycols = ['total'] + [t for t in losses.LOSS_TERMS
                             if np.any(table[t] != 0)]

    if newfig:
        fig = plt.figure(figsize=figsize)
    else:
        fig = plt.gcf()
    ax = plt.gca()

    for ycol in ycols:
        ydata = table[ycol].rolling(max(1, int(smooth)), min_periods=1).mean()
        ax.plot(table['iteration'], ydata, lw=1, label=get_plot_label(ycol))

    if logy and np.all(table[ycols].values >= 0):
        ax.set_yscale('symlog', linthresh=1e-6)
    ax.set_xlabel(get_plot_label('iteration', type='xlabel'))
    ax.set_ylabel(get_plot_label(ycols[0], type='ylabel'))
    ax.legend(loc='best', fontsize='small')
    ax.grid(True, linestyle=':', which='both', axis='both')
    if title is not None:
        plt.title(title, fontsize=14)
    plt.tight_layout()

    if savefig:
        plt.savefig(savefig, dpi=120)
        plt.close(fig)
    return fig, ax


def make_pass_montage(final, base, cloth, matte, gt=None, figsize=None,
                      title=None, savefig=False):
    '''
    Final, base, cloth and matte panels (and the ground truth when given)
    side by side.
    '''
    panels = [('final', final), ('base', base), ('cloth', cloth),
              ('matte', matte)]
    if gt is not None:
        panels.append(('ground truth', gt))
    if figsize is None:
        figsize = (3*len(panels), 3.3)

    fig, axes = plt.subplots(1, len(panels), figsize=figsize)
    for ax, (name, img) in zip(axes, panels):
        img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
        if img.ndim == 2:
            ax.imshow(img, cmap='gray', vmin=0.0, vmax=1.0)
        else:
            ax.imshow(img)
        ax.set_title(name)
        ax.axis('off')
    if title is not None:
        fig.suptitle(title)
    fig.tight_layout()

    if savefig:
        outdir = os.path.dirname(os.path.abspath(savefig))
        if not os.path.exists(outdir):
            os.makedirs(outdir)
        fig.savefig(savefig, dpi=120)
        plt.close(fig)
    return fig, axes
