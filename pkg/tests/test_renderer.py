import numpy as np
import pytest

import shared_variables as sv
from gaussians import rgb_to_sh_dc
import renderer as rd
from renderer import (Camera, SplatSet, WorldGaussians, RenderSettings,
                      rasterize, rasterize_backward, project, project_many,
                      render_base, render_cloth, render_scene_only,
                      render_matte, composite_final, composite_final_backward,
                      look_at_camera, camera_center, write_cameras_json,
                      read_cameras_json)


def _camera(res=16, f=20.0):
    return Camera(f, f, res/2.0, res/2.0, np.eye(3), np.zeros(3), res, res,
                  near=0.1)


def _world(centers, opacity, rgb, scale=0.05):
    n = len(centers)
    sh = np.zeros((n, sv.SH_NCOEFFS, 3))
    sh[:, 0, :] = rgb_to_sh_dc(np.asarray(rgb, dtype=float).reshape(n, 3))
    return WorldGaussians(centers, np.tile(np.eye(3), (n, 1, 1)),
                          np.full((n, 3), scale), opacity, sh)


def _splat(x, y, depth, color, alpha):
    return SplatSet([[x, y]], [np.eye(2)], [depth], [color], [alpha])


def _random_splats(rng, n, size):
    A = rng.normal(size=(n, 2, 2))
    return SplatSet(rng.uniform(0, size, (n, 2)),
                    A @ np.swapaxes(A, 1, 2)*6.0 + np.eye(2),
                    rng.permutation(n) + 1.0, rng.uniform(0, 1, (n, 3)),
                    rng.uniform(0.05, 0.95, n))


def test_camera_validation_and_center():
    with pytest.raises(ValueError):
        Camera(10, 10, 20.0, 4.0, np.eye(3), np.zeros(3), 16, 16)
    cam = look_at_camera((0.0, 1.0, 3.0), (0.0, 1.0, 0.0), 16, 16, 20.0)
    np.testing.assert_allclose(camera_center(cam), [0.0, 1.0, 3.0],
                               atol=1e-12)
    np.testing.assert_allclose(cam.R @ cam.R.T, np.eye(3), atol=1e-12)


def test_camera_json_round_trip(tmp_path):
    cams = [look_at_camera((1.0, 1.0, 3.0), (0, 0.9, 0), 24, 16, 30.0),
            _camera()]
    path = str(tmp_path / 'cameras.json')
    write_cameras_json(path, cams)
    back = read_cameras_json(path)
    assert len(back) == 2
    np.testing.assert_allclose(back[0].R, cams[0].R, atol=1e-12)
    np.testing.assert_allclose(back[0].t, cams[0].t)
    assert back[0].size == (16, 24)


def test_projection_on_the_axis():
    cam = _camera()
    mean2d, cov2d, depth = project([0.0, 0.0, 2.0], np.eye(3),
                                   [0.1, 0.1, 0.1], cam)
    np.testing.assert_allclose(mean2d, [8.0, 8.0])
    expected = (20.0*0.1/2.0)**2 + sv.COV2D_DILATION
    np.testing.assert_allclose(cov2d, np.diag([expected, expected]),
                               atol=1e-12)
    assert depth == 2.0


def test_projection_culls_behind_the_near_plane():
    cam = _camera()
    assert project([0.0, 0.0, cam.near/2.0], np.eye(3), [0.1]*3, cam) is None
    visible, mean2d, _, _, _ = project_many(
        [[0, 0, 2.0], [0, 0, -1.0]], np.tile(np.eye(3), (2, 1, 1)),
        np.full((2, 3), 0.1), cam
    )
    np.testing.assert_array_equal(visible, [True, False])
    assert mean2d.shape == (1, 2)


def test_no_splats_shows_background():
    empty = SplatSet(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0),
                     np.zeros((0, 3)), np.zeros(0))
    out = rasterize(empty, [0.1, 0.2, 0.3], (8, 8))
    np.testing.assert_array_equal(out.rgb, np.broadcast_to([0.1, 0.2, 0.3],
                                                           (8, 8, 3)))
    assert not np.any(out.alpha)


def test_single_splat_blends_with_background():
    out = rasterize(_splat(5, 5, 1.0, [0.2, 0.4, 0.6], 0.5),
                    [1.0, 0.0, 0.0], (10, 10))
    np.testing.assert_allclose(out.rgb[5, 5], [0.6, 0.2, 0.3])
    assert out.alpha[5, 5] == pytest.approx(0.5)


def test_two_coincident_splats_front_to_back():
    splats = SplatSet([[4, 4], [4, 4]], [np.eye(2), np.eye(2)],
                      [2.0, 1.0], [[0, 0, 1.0], [1.0, 0, 0]], [0.5, 0.5])
    out = rasterize(splats, np.zeros(3), (8, 8))
    np.testing.assert_allclose(out.rgb[4, 4], [0.5, 0.0, 0.25])
    assert out.alpha[4, 4] == pytest.approx(0.75)


def test_tiled_matches_naive_and_threads():
    rng = np.random.default_rng(0)
    splats = _random_splats(rng, 25, 40)
    bg = [0.1, 0.3, 0.2]
    tiled = rasterize(splats, bg, (40, 40), tile_size=16)
    naive = rasterize(splats, bg, (40, 40), naive=True)
    threaded = rasterize(splats, bg, (40, 40), tile_size=16, threads=4)
    np.testing.assert_allclose(tiled.rgb, naive.rgb, rtol=0, atol=1e-12)
    np.testing.assert_allclose(tiled.alpha, naive.alpha, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(threaded.rgb, tiled.rgb)


def test_rendering_ignores_input_order():
    rng = np.random.default_rng(1)
    splats = _random_splats(rng, 12, 20)
    perm = rng.permutation(12)
    shuffled = SplatSet(splats.mean2d[perm], splats.cov2d[perm],
                        splats.depth[perm], splats.color[perm],
                        splats.alpha_base[perm])
    a = rasterize(splats, np.zeros(3), (20, 20))
    b = rasterize(shuffled, np.zeros(3), (20, 20))
    np.testing.assert_array_equal(a.rgb, b.rgb)


def test_alpha_stays_in_unit_interval():
    rng = np.random.default_rng(2)
    splats = _random_splats(rng, 30, 16)
    splats.alpha_base[:] = 0.999
    out = rasterize(splats, np.zeros(3), (16, 16))
    assert np.all(out.alpha >= 0) and np.all(out.alpha <= 1)


def test_backward_basic_cases():
    out = rasterize(_splat(5, 5, 1.0, [0.2, 0.4, 0.6], 0.5), np.zeros(3),
                    (10, 10))
    g = rasterize_backward(out, np.zeros((10, 10, 3)))
    for v in g.values():
        assert not np.any(v)

    d = np.zeros((10, 10, 3))
    d[5, 5, 0] = 1.0
    g = rasterize_backward(out, d)
    assert g['dcolor'][0, 0] == pytest.approx(0.5)
    assert g['dcolor'][0, 1] == 0.0


def test_backward_matches_central_differences():
    rng = np.random.default_rng(3)
    mean2d = rng.uniform(3, 9, (5, 2))
    color = rng.uniform(0, 1, (5, 3))
    alpha = rng.uniform(0.2, 0.7, 5)
    cov = np.tile(np.eye(2)*4.0, (5, 1, 1))
    depth = np.arange(5) + 1.0
    up = rng.normal(size=(12, 12, 3))

    def f():
        o = rasterize(SplatSet(mean2d, cov, depth, color, alpha),
                      np.zeros(3), (12, 12))
        return np.sum(up*o.rgb)

    out = rasterize(SplatSet(mean2d, cov, depth, color, alpha), np.zeros(3),
                    (12, 12))
    g = rasterize_backward(out, up)
    h = 1e-6
    for arr, grad in ((mean2d, g['dmean2d']), (color, g['dcolor']),
                      (alpha, g['dalpha_base'])):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num = (fp - fm)/(2*h)
            assert abs(num - grad.reshape(-1)[i]) <= 1e-6 + 1e-4*abs(num)


def test_base_pass_with_empty_body_is_scene_only():
    cam = _camera()
    scene = _world([[0.0, 0.0, 3.0], [0.1, 0.0, 4.0]], [0.8, 0.6],
                   [[0.2, 0.7, 0.1], [0.9, 0.1, 0.5]], scale=0.2)
    base, _ = render_base(rd.empty_world(), scene, cam, np.zeros(3))
    only, _ = render_scene_only(scene, cam, np.zeros(3))
    np.testing.assert_array_equal(base.rgb, only.rgb)


def test_opaque_scene_in_front_hides_the_body():
    cam = _camera()
    body = _world([[0.0, 0.0, 4.0]], [0.99], [[1.0, 0.0, 0.0]], scale=0.2)
    scene = _world([[0.0, 0.0, 2.0]], [0.999], [[0.0, 0.0, 1.0]], scale=0.2)
    base, _ = render_base(body, scene, cam, np.zeros(3))
    assert base.rgb[8, 8, 2] > 0.98
    assert base.rgb[8, 8, 0] < 0.02


def test_cloth_pass_uses_black_background():
    cam = _camera()
    cloth = _world([[5.0, 5.0, 2.0]], [0.5], [[1.0, 1.0, 1.0]])
    out, _ = render_cloth(cloth, cam)
    assert not np.any(out.rgb)


def test_matte_examples():
    cam = _camera()
    cloth = _world([[0.0, 0.0, 3.0]], [0.9], [[0.5, 0.5, 0.5]])
    V, _, _ = render_matte(cloth, rd.empty_world(), cam)
    assert V[8, 8] == pytest.approx(0.9)

    scene_front = _world([[0.0, 0.0, 2.0]], [0.999], [[0.5, 0.5, 0.5]],
                         scale=0.2)
    V, _, _ = render_matte(cloth, scene_front, cam)
    assert V[8, 8] < 0.01

    half = _world([[0.0, 0.0, 2.0]], [0.5], [[0.5, 0.5, 0.5]])
    scene_back = _world([[0.0, 0.0, 4.0]], [0.999], [[0.5, 0.5, 0.5]],
                        scale=0.2)
    V, _, _ = render_matte(half, scene_back, cam)
    assert V[8, 8] == pytest.approx(0.5)


def test_matte_can_include_the_body():
    cam = _camera()
    cloth = _world([[0.0, 0.0, 3.0]], [0.9], [[0.5, 0.5, 0.5]])
    body = _world([[0.0, 0.0, 2.0]], [0.999], [[0.5, 0.5, 0.5]], scale=0.2)
    V, _, _ = render_matte(cloth, rd.empty_world(), cam)
    V_body, _, _ = render_matte(cloth, rd.empty_world(), cam, body=body)
    assert V[8, 8] == pytest.approx(0.9)
    assert V_body[8, 8] < 0.01


def test_composite_final():
    red = np.zeros((4, 4, 3))
    red[..., 0] = 1.0
    blue = np.zeros((4, 4, 3))
    blue[..., 2] = 1.0
    np.testing.assert_array_equal(composite_final(red, blue, np.ones((4, 4))),
                                  red)
    np.testing.assert_array_equal(composite_final(red, blue,
                                                  np.zeros((4, 4))), blue)
    np.testing.assert_allclose(composite_final(red, blue,
                                               np.full((4, 4), 0.5)),
                               np.broadcast_to([0.5, 0, 0.5], (4, 4, 3)))
    with pytest.raises(ValueError):
        composite_final(red, blue, np.ones((3, 4)))


def test_composite_stays_between_its_inputs():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(6, 6, 3)), rng.uniform(size=(6, 6, 3))
    V = rng.uniform(size=(6, 6))
    out = composite_final(a, b, V)
    assert np.all(out >= np.minimum(a, b) - 1e-15)
    assert np.all(out <= np.maximum(a, b) + 1e-15)

    g = rng.normal(size=(6, 6, 3))
    dc, db, dV = composite_final_backward(a, b, V, g)
    np.testing.assert_allclose(dc + db, g)
    np.testing.assert_allclose(dV, np.sum(g*(a - b), axis=2))


def test_render_settings_from_config():
    cfg = {'render': {'tile_size': 8, 'threads': 3,
                      'matte_include_body': True}}
    s = RenderSettings.from_config(cfg)
    assert (s.tile_size, s.threads, s.matte_include_body) == (8, 3, True)
    assert RenderSettings.from_config(cfg, threads=1).threads == 1
