import os
import copy
from collections import OrderedDict

import numpy as np
import pandas as pd
import pytest

import avatar as av
import losses
import renderer as rd
import training as tr
from configutils import default_config


SETTINGS = rd.RenderSettings(threads=1)


def test_schedule_endpoints_and_midpoint():
    sched = tr.ScheduleSpec(1.6e-4, 1.6e-6, 2000)
    assert tr.lr_at(sched, 0) == 1.6e-4
    assert tr.lr_at(sched, 2000) == 1.6e-6
    assert tr.lr_at(sched, 5000) == 1.6e-6
    assert tr.lr_at(sched, 1000) == pytest.approx(1.6e-5, rel=1e-12)
    assert tr.lr_at(tr.ScheduleSpec(1e-3, horizon=10), 7) == 1e-3
    with pytest.raises(ValueError):
        tr.lr_at(sched, -1)
    with pytest.raises(ValueError):
        tr.ScheduleSpec(1e-6, 1e-4, 10)


def test_only_positions_decay():
    state = tr.OptimizerState.from_config(default_config())
    state.step = 1000
    assert state.lr('positions') == pytest.approx(1.6e-5)
    assert state.lr('sh') == 2.5e-3
    assert state.lr('decoders') == 1e-3


def _toy():
    params = OrderedDict([('body.centers', np.array([[1.0, -2.0, 0.5]])),
                          ('D_A.W0', np.ones((2, 2)))])
    return params, tr.OptimizerState.from_config(default_config())


def test_adam_zero_gradient_is_a_no_op():
    params, state = _toy()
    out = tr.adam_step(state, params,
                       {k: np.zeros_like(v) for k, v in params.items()})
    for k in params:
        np.testing.assert_array_equal(out[k], params[k])
    assert state.step == 1


def test_adam_first_step_moves_by_the_learning_rate():
    params, state = _toy()
    g = {'body.centers': np.array([[3.0, -0.01, 0.0]])}
    out = tr.adam_step(state, params, g)
    np.testing.assert_allclose(out['body.centers'],
                               [[1.0 - 1.6e-4, -2.0 + 1.6e-4, 0.5]],
                               rtol=0, atol=1e-12)
    assert out['D_A.W0'] is params['D_A.W0']
    assert 'D_A.W0' not in state.m


def test_adam_rejects_bad_gradients():
    params, state = _toy()
    with pytest.raises(tr.NumericalFailure):
        tr.adam_step(state, params, {'body.centers': np.array([[np.nan, 0,
                                                                 0]])})
    with pytest.raises(ValueError):
        tr.adam_step(state, params, {'body.centers': np.zeros(3)})
    assert state.step == 0


@pytest.fixture
def stepped(tiny_scene, tiny_cfg):
    rng = np.random.default_rng(5)
    model = tr.init_model_for_scene(tiny_scene, tiny_cfg, rng)
    state = tr.OptimizerState.from_config(tiny_cfg)
    cfg = losses.LossConfig.from_config(tiny_cfg)
    _, _, grads, _ = av.frame_loss_and_grads(model, tiny_scene.frame(0), cfg,
                                             np.zeros(3), settings=SETTINGS)
    av.set_model_params(model, tr.adam_step(state, av.model_params(model),
                                            grads))
    return model, state, tiny_cfg, rng


def test_checkpoint_round_trip(stepped, tmp_path):
    model, state, cfg, rng = stepped
    path = str(tmp_path / 'ckpt' / 'a.npz')
    tr.save_checkpoint(path, model, state, cfg, rng)
    assert not os.path.exists(path + '.tmp')

    model2, state2, cfg2, rng2 = tr.load_checkpoint(path)
    p1, p2 = av.model_params(model), av.model_params(model2)
    assert list(p1) == list(p2)
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])
    assert state2.step == state.step == 1
    for k in state.m:
        np.testing.assert_array_equal(state2.m[k], state.m[k])
        np.testing.assert_array_equal(state2.v[k], state.v[k])
    assert cfg2 == cfg
    assert rng2.integers(1 << 30) == rng.integers(1 << 30)
    assert model2.skeleton.names == model.skeleton.names


def test_checkpoint_errors(stepped, tmp_path):
    model, state, cfg, rng = stepped
    with pytest.raises(tr.CheckpointError):
        tr.load_checkpoint(str(tmp_path / 'missing.npz'))

    path = tr.save_checkpoint(str(tmp_path / 'full.npz'), model, state, cfg,
                              rng)
    with np.load(path, allow_pickle=False) as data:
        kept = {k: data[k] for k in data.files
                if not k.startswith('optimizer:')}
    broken = str(tmp_path / 'broken.npz')
    np.savez(broken, **kept)
    with pytest.raises(tr.CheckpointError):
        tr.load_checkpoint(broken)

    garbage = tmp_path / 'garbage.npz'
    garbage.write_bytes(b'not a zip file')
    with pytest.raises(tr.CheckpointError):
        tr.load_checkpoint(str(garbage))


def test_fit_without_iterations_returns_the_initial_model(tiny_scene,
                                                          tiny_cfg, tmp_path):
    cfg = copy.deepcopy(tiny_cfg)
    cfg['train']['iterations'] = 0
    model, state, table = tr.fit(tiny_scene, cfg, outdir=str(tmp_path),
                                 settings=SETTINGS)
    assert len(table) == 0 and state.step == 0
    init = tr.init_model_for_scene(
        tiny_scene, cfg, np.random.default_rng(cfg['train']['seed'])
    )
    p1, p2 = av.model_params(model), av.model_params(init)
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])
    assert os.path.exists(os.path.join(str(tmp_path), 'checkpoints',
                                       'ckpt_final.npz'))


def test_fit_with_only_l1(tiny_scene, tiny_cfg, tmp_path):
    cfg = copy.deepcopy(tiny_cfg)
    for key in ('lambda_ssim', 'lambda_lpips', 'lambda_sim', 'lambda_arap',
                'lambda_mask', 'lambda_cloth_lbs'):
        cfg['losses'][key] = 0.0
    outdir = str(tmp_path)
    _, state, table = tr.fit(tiny_scene, cfg, outdir=outdir,
                             settings=SETTINGS)
    assert state.step == 3
    csv = pd.read_csv(os.path.join(outdir, 'losses.csv'))
    assert list(csv.columns) == tr.LOSS_COLUMNS
    assert len(csv) == 3
    assert np.all(csv['l1'] > 0)
    for term in losses.LOSS_TERMS:
        if term != 'l1':
            assert np.all(csv[term] == 0)
    np.testing.assert_allclose(csv['total'], 0.8*csv['l1'])
    assert set(csv['frame']) <= set(tiny_scene.split('train'))
    assert os.path.exists(os.path.join(outdir, 'checkpoints',
                                       'ckpt_000002.npz'))


def test_fit_is_deterministic(tiny_scene, tiny_cfg):
    cfg = copy.deepcopy(tiny_cfg)
    cfg['train']['iterations'] = 2
    _, _, a = tr.fit(tiny_scene, cfg, settings=SETTINGS)
    _, _, b = tr.fit(tiny_scene, cfg, settings=SETTINGS)
    pd.testing.assert_frame_equal(a, b)


def test_psnr_examples():
    img = np.full((4, 4, 3), 0.5)
    assert tr.psnr(img, img) == 99.0
    assert tr.psnr(img + 0.1, img) == pytest.approx(20.0)
    assert tr.psnr(np.ones((4, 4, 3)), np.zeros((4, 4, 3))) == 0.0
    with pytest.raises(losses.ShapeMismatch):
        tr.psnr(img, img[:2])
    assert tr.ssim_metric(img, img, window=3) == pytest.approx(1.0)


def test_crop_box():
    img = np.arange(36).reshape(6, 6)
    np.testing.assert_array_equal(tr.crop_box(img, (1, 3, 2, 5)),
                                  img[1:3, 2:5])


def test_evaluate_reports_a_mean_row(tiny_scene, tiny_cfg):
    model = tr.init_model_for_scene(tiny_scene, tiny_cfg,
                                    np.random.default_rng(0))
    table = tr.evaluate(model, tiny_scene, tiny_cfg, split='test',
                        settings=SETTINGS)
    assert list(table['frame']) == [7, 'mean']
    for col in ('psnr', 'ssim', 'psnr_human', 'ssim_human', 'mask_mse'):
        assert col in table.columns
    assert table['psnr'].iloc[-1] == pytest.approx(table['psnr'].iloc[0])
