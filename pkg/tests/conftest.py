'''
Shared fixtures: a seeded generator, a desk-sized config shrunk far enough
for fitting to run in seconds, and one synthetic scene built from it.
'''

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from configutils import default_config, validate_config
import renderer as rd
import synthscene as ss


def tiny_config():
    cfg = default_config()
    cfg['scene'].update({'joints': 6, 'frames': 8, 'resolution': 16,
                         'n_body': 60, 'n_cloth': 48, 'n_scene': 20})
    cfg['triplane'].update({'res': 4, 'channels': 2})
    cfg['decoders']['hidden'] = [8]
    cfg['losses']['ssim_window'] = 5
    cfg['losses']['lambda_lpips'] = 0.0
    cfg['train'].update({'iterations': 3, 'horizon': 10,
                         'checkpoint_every': 2, 'log_every': 1})
    cfg['render']['threads'] = 1
    return validate_config(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope='session')
def tiny_scene():
    cfg = tiny_config()
    return ss.synth_scene(cfg, settings=rd.RenderSettings(threads=1))
