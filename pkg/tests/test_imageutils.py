import os

import numpy as np
import pandas as pd
import pytest

import imageutils as iu
import plotutils as pu


def test_uint_conversions_round_and_clip():
    img = np.array([[-0.5, 0.0, 0.5, 1.0, 2.0]])
    np.testing.assert_array_equal(iu.to_uint8(img), [[0, 0, 128, 255, 255]])
    np.testing.assert_array_equal(iu.to_uint16(img),
                                  [[0, 0, 32768, 65535, 65535]])


def test_rgb_png_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(0, 1, (5, 7, 3))
    path = iu.write_rgb_png(str(tmp_path / 'sub' / 'img.png'), img)
    back = iu.read_rgb_png(path)
    assert back.shape == (5, 7, 3)
    np.testing.assert_allclose(back, img, atol=0.5/255 + 1e-12)
    with pytest.raises(ValueError):
        iu.write_rgb_png(str(tmp_path / 'bad.png'), np.zeros((5, 7)))


def test_gray16_and_mask_round_trip(tmp_path):
    matte = np.linspace(0, 1, 12).reshape(3, 4)
    path = iu.write_gray16_png(str(tmp_path / 'matte.png'), matte)
    np.testing.assert_allclose(iu.read_gray16_png(path), matte,
                               atol=0.5/65535 + 1e-12)
    np.testing.assert_array_equal(iu.read_mask_png(path), matte > 0.5)
    with pytest.raises(ValueError):
        iu.write_gray16_png(str(tmp_path / 'bad.png'), np.zeros((3, 4, 3)))


def test_depth_png_scales_by_the_far_plane(tmp_path):
    depth = np.array([[0.0, 1.0], [2.0, 4.0]])
    path = iu.write_depth_png(str(tmp_path / 'depth.png'), depth)
    np.testing.assert_allclose(iu.read_gray16_png(path),
                               [[0.0, 0.25], [0.5, 1.0]], atol=1e-4)


def test_pass_strip(tmp_path):
    h, w = 4, 5
    final = np.zeros((h, w, 3))
    matte = np.ones((h, w))
    out = str(tmp_path / 'strip.png')
    strip = iu.passes_to_stamps(final, final, final, matte, out_fname=out)
    assert strip.shape == (h, 4*w + 3, 3)
    assert np.all(strip[:, w] == 1.0)
    assert np.all(strip[:, -w:] == 1.0)
    assert os.path.exists(out)


def test_loss_plot_and_montage(tmp_path):
    table = pd.DataFrame({'iteration': [0, 1, 2], 'frame': [0, 1, 2],
                          'total': [1.0, 0.5, 0.25], 'l1': [0.5, 0.3, 0.1],
                          'ssim': [0.2, 0.1, 0.05], 'lpips': [0.0]*3,
                          'cloth_lbs': [0.0]*3, 'sim': [0.1, 0.1, 0.1],
                          'arap': [0.0]*3, 'mask': [0.0]*3,
                          'lr_position': [1.6e-4]*3})
    png = str(tmp_path / 'losses.png')
    pu.make_loss_plot(table, smooth=2, savefig=png)
    assert os.path.exists(png)
    assert pu.get_plot_label('sim') == 'Chamfer (GM)'

    img = np.zeros((4, 4, 3))
    montage = str(tmp_path / 'plots' / 'montage.png')
    pu.make_pass_montage(img, img, img, np.zeros((4, 4)), gt=img,
                         savefig=montage)
    assert os.path.exists(montage)
