import numpy as np
import pytest

import avatar as av
import losses
import renderer as rd
from gaussians import quat_to_matrix
from gradcheck import tiny_avatar, probe_coordinates, PIPELINE_TOL
from skeleton import Pose, forward_kinematics, pose_feature
from training import init_model_for_scene


SETTINGS = rd.RenderSettings(threads=1)


@pytest.fixture
def model(tiny_scene, tiny_cfg, rng):
    return init_model_for_scene(tiny_scene, tiny_cfg, rng)


def test_parameter_names_and_groups(model):
    params = av.model_params(model)
    for name in ('body.centers', 'cloth.sh', 'scene.opacity_logits',
                 'triplane.body', 'triplane.cloth', 'D_A.W0', 'D_D.b1'):
        assert name in params
    assert av.param_group('cloth.quats') == 'rotations'
    assert av.param_group('scene.centers') == 'positions'
    assert av.param_group('triplane.cloth') == 'triplanes'
    assert av.param_group('D_G.W1') == 'decoders'
    assert {av.param_group(n) for n in params} == set(av.PARAM_GROUPS)


def test_set_model_params_writes_back(model):
    params = av.model_params(model)
    moved = params['body.centers'] + 0.1
    av.set_model_params(model, {'body.centers': moved,
                                'D_A.b0': np.ones_like(params['D_A.b0'])})
    np.testing.assert_array_equal(model.body.centers, moved)
    assert np.all(model.decoders.D_A.biases[0] == 1.0)
    with pytest.raises(KeyError):
        av.set_model_params(model, {'elbow.centers': moved})


def test_layer_tags_are_checked(model):
    with pytest.raises(ValueError):
        av.AvatarModel(model.skeleton, model.body, model.cloth, model.body,
                       model.field, model.decoders, model.body_weights,
                       model.cloth_weights, model.cloth_edges)


def test_rest_pose_with_fresh_decoders_is_the_canonical_layer(model):
    J = model.skeleton.joint_count
    _, transforms = forward_kinematics(model.skeleton, Pose.rest(J))
    for name in ('body', 'cloth'):
        layer = model.layer(name)
        world, w, _ = av.pose_layer(model, name, transforms,
                                    pose_feature(Pose.rest(J)))
        np.testing.assert_array_equal(world.mu, layer.centers)
        np.testing.assert_allclose(world.R, quat_to_matrix(layer.quats),
                                   atol=1e-12)
        np.testing.assert_allclose(world.scales, layer.scales)
        np.testing.assert_allclose(world.opacity, layer.opacities)
        np.testing.assert_array_equal(world.sh, layer.sh)
        np.testing.assert_allclose(w, model.reference_weights(name),
                                   atol=1e-4)


def test_rest_pose_renders_like_the_canonical_layer(model, tiny_scene):
    J = model.skeleton.joint_count
    _, transforms = forward_kinematics(model.skeleton, Pose.rest(J))
    camera = tiny_scene.frame(0)['camera']
    for name in ('body', 'cloth'):
        posed, _, _ = av.pose_layer(model, name, transforms,
                                    pose_feature(Pose.rest(J)))
        direct = rd.world_from_layer(model.layer(name))
        a, _ = rd.render_gaussians(posed, camera, np.zeros(3),
                                   settings=SETTINGS)
        b, _ = rd.render_gaussians(direct, camera, np.zeros(3),
                                   settings=SETTINGS)
        assert np.any(b.alpha > 0)
        assert np.max(np.abs(a.rgb - b.rgb)) == 0.0
        np.testing.assert_array_equal(a.alpha, b.alpha)


def test_render_frame_composites_the_passes(model, tiny_scene):
    frame = tiny_scene.frame(0)
    r = av.render_frame(model, frame['pose'], frame['camera'], np.zeros(3),
                        settings=SETTINGS)
    assert r.final.shape == (16, 16, 3)
    np.testing.assert_allclose(
        r.final, rd.composite_final(r.cloth_pass.rgb, r.base.rgb, r.matte)
    )
    assert np.all(r.matte >= 0) and np.all(r.matte <= 1)
    assert len(r.body) == len(model.body)
    assert r.cloth_weights.shape == (len(model.cloth),
                                     model.skeleton.joint_count)


def test_frame_gradients_cover_every_parameter(model, tiny_scene):
    frame = tiny_scene.frame(1)
    cfg = losses.LossConfig(lambda_lpips=0.0, ssim_window=5)
    total, parts, grads, _ = av.frame_loss_and_grads(
        model, frame, cfg, np.zeros(3), settings=SETTINGS
    )
    params = av.model_params(model)
    assert set(grads) == set(params)
    for name, g in grads.items():
        assert g.shape == params[name].shape
        assert np.all(np.isfinite(g))
    assert total == pytest.approx(losses.total_loss(parts, cfg)[0])
    assert parts['lpips'] == 0.0

    again, _, none, _ = av.frame_loss_and_grads(
        model, frame, cfg, np.zeros(3), settings=SETTINGS, with_grads=False
    )
    assert none is None
    assert again == total


def test_zero_weight_terms_report_zero(model, tiny_scene):
    cfg = losses.LossConfig(lambda_lpips=0.0, lambda_sim=0.0,
                            lambda_arap=0.0, ssim_window=5)
    _, parts, _, _ = av.frame_loss_and_grads(model, tiny_scene.frame(2), cfg,
                                             np.zeros(3), settings=SETTINGS,
                                             with_grads=False)
    assert parts['sim'] == 0.0 and parts['arap'] == 0.0
    assert parts['l1'] > 0.0


def test_pipeline_gradient_matches_central_differences(rng):
    model, frame = tiny_avatar(rng)
    cfg = losses.LossConfig(lambda_lpips=0.0, ssim_window=5)
    _, _, grads, _ = av.frame_loss_and_grads(model, frame, cfg, np.zeros(3),
                                             settings=SETTINGS)
    params = av.model_params(model)

    def f():
        return av.frame_loss_and_grads(model, frame, cfg, np.zeros(3),
                                       settings=SETTINGS,
                                       with_grads=False)[0]

    for name in ('D_A.b1', 'triplane.cloth', 'cloth.centers'):
        g = grads[name]
        idxs = np.argsort(np.abs(g).ravel())[-2:]
        errs, _ = probe_coordinates(f, params[name], g, idxs)
        assert all(e < PIPELINE_TOL for e in errs)
