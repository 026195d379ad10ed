import json

import pytest

import shared_variables as sv
from configutils import (InvalidConfig, default_config, load_config,
                         apply_overrides, validate_config, write_config,
                         apply_ablation, full_scale)


def test_defaults_are_valid_and_fresh():
    cfg = default_config()
    assert validate_config(cfg) is cfg
    cfg['scene']['frames'] = 3
    assert default_config()['scene']['frames'] == 40


def test_load_merges_a_partial_file(tmp_path):
    path = tmp_path / 'cfg.json'
    path.write_text(json.dumps({'losses': {'lambda_sim': 2.5},
                                'train': {'iterations': 10}}))
    cfg = load_config(str(path))
    assert cfg['losses']['lambda_sim'] == 2.5
    assert cfg['train']['iterations'] == 10
    assert cfg['losses']['lambda_arap'] == 0.5


@pytest.mark.parametrize('payload', [
    '{"losses": {"lambda_typo": 1.0}}',
    '{"losses": 3}',
    '{not json',
])
def test_load_rejects_bad_files(tmp_path, payload):
    path = tmp_path / 'cfg.json'
    path.write_text(payload)
    with pytest.raises(InvalidConfig):
        load_config(str(path))


def test_load_missing_file():
    with pytest.raises(InvalidConfig):
        load_config('/nonexistent/cfg.json')


def test_overrides_parse_json_values():
    cfg = apply_overrides(default_config(),
                          ['losses.lambda_mask=0', 'decoders.hidden=[4,4]',
                           'train.ablation=no_physics',
                           'render.matte_include_body=true'])
    assert cfg['losses']['lambda_mask'] == 0
    assert cfg['decoders']['hidden'] == [4, 4]
    assert cfg['train']['ablation'] == 'no_physics'
    assert cfg['render']['matte_include_body'] is True


@pytest.mark.parametrize('item', ['losses.nope=1', 'losses=1',
                                  'lambda_sim'])
def test_overrides_reject_unknown_keys(item):
    with pytest.raises(InvalidConfig):
        apply_overrides(default_config(), [item])


@pytest.mark.parametrize('section,key,value', [
    ('scene', 'joints', 30),
    ('scene', 'resolution', 4),
    ('losses', 'lambda_arap', -0.1),
    ('losses', 'ssim_window', 4),
    ('optim', 'lr_position_final', 1.0),
    ('train', 'ablation', 'everything'),
])
def test_validation_ranges(section, key, value):
    cfg = default_config()
    cfg[section][key] = value
    with pytest.raises(InvalidConfig):
        validate_config(cfg)


def test_write_then_load(tmp_path):
    cfg = apply_overrides(default_config(), ['scene.frames=12'])
    path = write_config(cfg, str(tmp_path / 'out.json'))
    assert load_config(path) == cfg


def test_ablation_presets():
    cfg = apply_overrides(default_config(), ['train.ablation=no_physics'])
    out = apply_ablation(cfg)
    for key in sv.ABLATIONS['no_physics']:
        assert out['losses'][key] == 0.0
    assert out['losses']['lambda_cloth_lbs'] == 1000.0
    assert cfg['losses']['lambda_sim'] == 1.0
    assert apply_ablation(default_config()) == default_config()


def test_full_scale():
    cfg = full_scale(default_config())
    assert cfg['triplane']['res'] == 256
    assert cfg['scene']['resolution'] == 512
    assert cfg['train']['iterations'] == cfg['train']['horizon'] == 20000
    validate_config(cfg)
