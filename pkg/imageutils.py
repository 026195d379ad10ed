#!/usr/bin/env python

'''
imageutils.py - utilities for writing and reading rendered images.

Float images live in [0,1]. Color images are written as 8-bit RGB PNGs
(rounded), mattes and depth maps as 16-bit grayscale PNGs.

====================
image-writing functions:
    to_uint8
    to_uint16
    write_rgb_png
    write_gray16_png
    write_depth_png
    passes_to_stamps: final | base | cloth | matte strip

image-reading functions:
    read_rgb_png
    read_gray16_png
    read_mask_png
====================
'''

import os
import logging
from datetime import datetime

import numpy as np
from PIL import Image

LOGGER = logging.getLogger(__name__)


def to_uint8(img):
    '''
    Rounds a [0,1] float image to 8-bit, clipping out-of-range values.
    '''
    img = np.asarray(img, dtype=np.float64)
    return np.round(np.clip(img, 0.0, 1.0)*255.0).astype(np.uint8)


def to_uint16(img):
    img = np.asarray(img, dtype=np.float64)
    return np.round(np.clip(img, 0.0, 1.0)*65535.0).astype(np.uint16)


def _ensure_dir(path):
    outdir = os.path.dirname(os.path.abspath(path))
    if not os.path.exists(outdir):
        os.makedirs(outdir)


def write_rgb_png(path, img):
    '''
    Writes an H x W x 3 float image as an 8-bit RGB PNG.
    '''
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError('expected an H x W x 3 image, got %s'
                         % (img.shape,))
    _ensure_dir(path)
    Image.fromarray(to_uint8(img)).save(path, format='PNG')
    LOGGER.debug('%sZ: wrote %s' % (datetime.utcnow().isoformat(), path))
    return path


def write_gray16_png(path, img):
    '''
    Writes an H x W float image in [0,1] as a 16-bit grayscale PNG.
    '''
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError('expected an H x W image, got %s' % (img.shape,))
    _ensure_dir(path)
    Image.fromarray(to_uint16(img)).save(path, format='PNG')
    LOGGER.debug('%sZ: wrote %s' % (datetime.utcnow().isoformat(), path))
    return path


def write_depth_png(path, depth, far=None):
    '''
    Depth map scaled to [0,1] by far (default: the largest finite depth).
    Pixels with no coverage (depth 0) stay 0.
    '''
    depth = np.asarray(depth, dtype=np.float64)
    if far is None:
        finite = depth[np.isfinite(depth)]
        far = finite.max() if finite.size and finite.max() > 0 else 1.0
    return write_gray16_png(path, np.nan_to_num(depth/far))


def read_rgb_png(path):
    '''
    Returns an H x W x 3 float64 image in [0,1].
    '''
    with Image.open(path) as img:
        arr = np.asarray(img.convert('RGB'), dtype=np.float64)
    return arr/255.0


def read_gray16_png(path):
    '''
    Returns an H x W float64 image in [0,1] from a 16-bit grayscale PNG.
    '''
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError('%s is not a grayscale image' % path)
    return arr/65535.0


def read_mask_png(path, threshold=0.5):
    return read_gray16_png(path) > threshold


def passes_to_stamps(final, base, cloth, matte, out_fname=None, sepwidth=1):
    '''
    Lays the render passes side by side, separated by sepwidth white
    columns, and optionally writes the strip as a PNG.
    '''
    matte = np.asarray(matte, dtype=np.float64)
    panels = [np.asarray(final, dtype=np.float64),
              np.asarray(base, dtype=np.float64),
              np.asarray(cloth, dtype=np.float64),
              np.repeat(matte[:, :, None], 3, axis=2)]
    height = panels[0].shape[0]
    sep = np.ones((height, sepwidth, 3))

    strip = [panels[0]]
    for panel in panels[1:]:
        strip.extend([sep, panel])
    strip = np.hstack(strip)

    if out_fname:
        write_rgb_png(out_fname, strip)
    return strip
