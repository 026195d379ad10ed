import numpy as np
import pytest
from scipy.special import expit

import shared_variables as sv
from meshutils import TriMesh, InvalidMesh
from gaussians import (LayerTag, GaussianLayer, LayerFormatError,
                       quat_to_matrix, shortest_arc_quat, sh_basis,
                       eval_sh, eval_sh_batch, rgb_to_sh_dc, init_from_mesh,
                       write_layer, read_layer, normalize_quats)


def _unit_square_mesh():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    return TriMesh(verts, [[0, 1, 2], [0, 2, 3]],
                   normals=np.tile([0.0, 0.0, 1.0], (4, 1)),
                   edges=[[0, 1], [1, 2], [2, 3], [3, 0]])


def test_init_from_unit_square():
    layer = init_from_mesh(_unit_square_mesh(), LayerTag.Cloth)
    assert len(layer) == 4
    np.testing.assert_array_equal(layer.centers,
                                  _unit_square_mesh().vertices)
    np.testing.assert_allclose(layer.scales[:, :2], 0.5)
    np.testing.assert_allclose(layer.scales[:, 2], 0.5*sv.NORMAL_SCALE_RATIO)
    np.testing.assert_allclose(layer.quats, np.tile([1.0, 0, 0, 0], (4, 1)))
    np.testing.assert_allclose(layer.opacities, 0.1)
    np.testing.assert_array_equal(layer.skin_binding, np.arange(4))


def test_init_gray_sh_evaluates_to_gray():
    layer = init_from_mesh(_unit_square_mesh(), LayerTag.Body)
    rgb = eval_sh(layer.sh[0], [0.0, 0.6, 0.8])
    np.testing.assert_allclose(rgb, sv.INIT_GRAY)
    assert np.all(layer.sh[:, 1:, :] == 0)


def test_init_is_deterministic():
    a = init_from_mesh(_unit_square_mesh(), LayerTag.Body)
    b = init_from_mesh(_unit_square_mesh(), LayerTag.Body)
    for name in ('centers', 'quats', 'log_scales', 'opacity_logits', 'sh'):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_init_rejects_empty_mesh_and_zero_normals():
    with pytest.raises(InvalidMesh):
        init_from_mesh(TriMesh(np.zeros((0, 3)), np.zeros((0, 3))),
                       LayerTag.Body)
    lonely = TriMesh([[0, 0, 0], [1, 0, 0], [5, 5, 5]], [[0, 1, 0]])
    with pytest.raises(InvalidMesh):
        init_from_mesh(lonely, LayerTag.Body)


def test_shortest_arc_maps_z_onto_normal():
    normals = np.array([[0, 0, 1.0], [1.0, 0, 0], [0, 0.6, 0.8],
                        [0, 0, -1.0]])
    R = quat_to_matrix(shortest_arc_quat(normals))
    np.testing.assert_allclose(R[:, :, 2], normals, atol=1e-12)


def test_scene_layer_rejects_binding_and_body_needs_one():
    args = (np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)),
            np.zeros((2, 3)), np.zeros(2), np.zeros((2, 16, 3)))
    with pytest.raises(ValueError):
        GaussianLayer(LayerTag.Scene, *args, skin_binding=[0, 1])
    with pytest.raises(ValueError):
        GaussianLayer(LayerTag.Body, *args)


def test_enforce_invariants_renormalizes_and_caps():
    layer = init_from_mesh(_unit_square_mesh(), LayerTag.Body)
    layer.quats = layer.quats*3.0
    layer.log_scales[0, 0] = 50.0
    layer.enforce_invariants()
    np.testing.assert_allclose(np.linalg.norm(layer.quats, axis=1), 1.0,
                               rtol=0, atol=sv.QUAT_NORM_TOL)
    assert layer.scales[0, 0] < sv.MAX_SCALE_METERS


def test_zero_quaternion_is_rejected():
    with pytest.raises(ValueError):
        normalize_quats(np.array([[1.0, 0, 0, 0], [0.0, 0, 0, 0]]))
    layer = init_from_mesh(_unit_square_mesh(), LayerTag.Cloth)
    layer.quats[2] = 0.0
    with pytest.raises(ValueError):
        layer.enforce_invariants()


def test_layer_from_primitives_matches_the_arrays():
    layer = init_from_mesh(_unit_square_mesh(), LayerTag.Body)
    layer.sh[:, 3, 1] = np.arange(4)*0.1
    rebuilt = GaussianLayer.from_primitives(
        LayerTag.Body, [layer.primitive(i) for i in range(len(layer))],
        skin_binding=layer.skin_binding)
    assert rebuilt.tag == LayerTag.Body and len(rebuilt) == 4
    np.testing.assert_allclose(rebuilt.quats, layer.quats, rtol=0, atol=1e-15)
    for field in ('centers', 'log_scales', 'opacity_logits', 'sh',
                  'skin_binding'):
        np.testing.assert_array_equal(getattr(rebuilt, field),
                                      getattr(layer, field))
    assert layer.primitive(0).sh_coeffs.shape == (sv.SH_NCOEFFS, 3)
    assert sv.SH_NCOEFFS == (sv.SH_DEGREE + 1)**2 == 16


def test_zero_sh_is_half_gray():
    rgb = eval_sh(np.zeros((16, 3)), [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(rgb, [0.5, 0.5, 0.5])


def test_dc_only_is_view_independent():
    sh = np.zeros((16, 3))
    sh[0] = rgb_to_sh_dc([0.2, 0.4, 0.9])
    a = eval_sh(sh, [0.0, 0.0, 1.0])
    b = eval_sh(sh, [0.6, 0.0, -0.8])
    np.testing.assert_allclose(a, b)
    np.testing.assert_allclose(a, [0.2, 0.4, 0.9])


def test_degree_one_z_channel_flips_with_view():
    sh = np.zeros((1, 16, 3))
    sh[0, 2, 0] = 0.3
    dirs = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    _, raw_up = eval_sh_batch(sh, dirs[:1])
    _, raw_down = eval_sh_batch(sh, dirs[1:])
    Y10 = sh_basis(dirs[:1])[0, 2]
    assert abs(Y10) == pytest.approx(sv.SH_C1)
    assert raw_up[0, 0] - raw_down[0, 0] == pytest.approx(2*Y10*0.3)


def test_eval_sh_rejects_non_unit_direction():
    with pytest.raises(ValueError):
        eval_sh(np.zeros((16, 3)), [0.0, 0.0, 2.0])


def test_layer_file_round_trip(tmp_path):
    layer = init_from_mesh(_unit_square_mesh(), LayerTag.Cloth)
    layer.sh[:, 3, 1] = 0.25
    path = str(tmp_path / 'cloth.lgs')
    write_layer(path, layer)
    back = read_layer(path)
    assert back.tag == LayerTag.Cloth
    np.testing.assert_allclose(back.centers, layer.centers, atol=1e-6)
    np.testing.assert_allclose(back.sh, layer.sh, atol=1e-6)
    np.testing.assert_allclose(expit(back.opacity_logits), 0.1, atol=1e-6)


def test_layer_file_truncated_and_bad_magic(tmp_path):
    layer = init_from_mesh(_unit_square_mesh(), LayerTag.Body)
    path = str(tmp_path / 'body.lgs')
    write_layer(path, layer)
    with open(path, 'rb') as infd:
        payload = infd.read()

    short = str(tmp_path / 'short.lgs')
    with open(short, 'wb') as outfd:
        outfd.write(payload[:-10])
    with pytest.raises(LayerFormatError):
        read_layer(short)

    bad = str(tmp_path / 'bad.lgs')
    with open(bad, 'wb') as outfd:
        outfd.write(b'XXXX' + payload[4:])
    with pytest.raises(LayerFormatError):
        read_layer(bad)
