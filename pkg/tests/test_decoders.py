import numpy as np
import pytest

from gaussians import GaussianPrimitive
from decoders import (MlpParams, DegenerateRotation, IDENTITY_R6,
                      APPEARANCE_DIM, GEOMETRY_DIM, GeometryCorrection,
                      deformation_dim, init_mlp, mlp_forward, mlp_backward,
                      softmax, softmax_backward, rot6d_to_matrix,
                      rot6d_to_matrix_batch, rot6d_to_matrix_backward,
                      init_decoders, decode_appearance, decode_geometry,
                      decode_deformation, split_appearance, apply_geometry)


def test_zero_weights_emit_the_bias():
    params = init_mlp(5, [7], 3, np.random.default_rng(0),
                      head_bias=[1.0, -2.0, 0.5])
    x = np.random.default_rng(1).normal(size=(4, 5))
    out, _ = mlp_forward(params, x)
    np.testing.assert_array_equal(out, np.tile([1.0, -2.0, 0.5], (4, 1)))


def test_single_layer_is_affine():
    rng = np.random.default_rng(2)
    W, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    x = rng.normal(size=4)
    out, _ = mlp_forward(MlpParams([W], [b]), x)
    np.testing.assert_allclose(out, x @ W + b)


def test_two_hidden_layers_match_reference():
    rng = np.random.default_rng(3)
    dims = [6, 5, 4, 2]
    Ws = [rng.normal(size=(dims[k], dims[k+1])) for k in range(3)]
    bs = [rng.normal(size=dims[k+1]) for k in range(3)]
    x = rng.normal(size=(3, 6))
    h = np.maximum(x @ Ws[0] + bs[0], 0)
    h = np.maximum(h @ Ws[1] + bs[1], 0)
    ref = h @ Ws[2] + bs[2]
    out, _ = mlp_forward(MlpParams(Ws, bs), x)
    np.testing.assert_allclose(out, ref)


def test_input_dimension_mismatch():
    params = init_mlp(5, [], 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        mlp_forward(params, np.zeros(4))


def test_backward_zero_upstream_and_identity_net():
    rng = np.random.default_rng(4)
    params = MlpParams([np.eye(3)], [np.zeros(3)])
    x = rng.normal(size=3)
    _, cache = mlp_forward(params, x)
    up = rng.normal(size=3)
    grads, dx = mlp_backward(params, cache, up)
    np.testing.assert_allclose(dx, up)

    grads, dx = mlp_backward(params, cache, np.zeros(3))
    assert not np.any(dx) and not np.any(grads['W'][0])


def test_backward_matches_central_differences():
    rng = np.random.default_rng(5)
    params = init_mlp(4, [6, 5], 3, rng)
    params.weights[-1] = rng.normal(size=(5, 3))
    x = rng.normal(size=(2, 4))
    up = rng.normal(size=(2, 3))
    _, cache = mlp_forward(params, x)
    grads, dx = mlp_backward(params, cache, up)

    def f():
        return np.sum(up*mlp_forward(params, x)[0])

    h = 1e-5
    for arr, g in ((params.weights[0], grads['W'][0]),
                   (params.biases[1], grads['b'][1]), (x, dx)):
        flat = arr.reshape(-1)
        for i in range(min(flat.size, 6)):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num = (fp - fm)/(2*h)
            assert abs(num - g.reshape(-1)[i]) <= 1e-6 + 1e-4*abs(num)


def test_softmax_values():
    np.testing.assert_allclose(softmax(np.zeros(24)), np.full(24, 1/24.0))
    onehot = softmax(np.r_[50.0, np.zeros(5)])
    np.testing.assert_allclose(onehot, np.r_[1.0, np.zeros(5)], atol=1e-10)

    w = softmax(np.r_[1.0, np.zeros(23)])
    assert w[0] == pytest.approx(np.e/(np.e + 23))
    assert w[0] == pytest.approx(0.10566, abs=1e-5)
    assert w[1] == pytest.approx(0.03888, abs=1e-5)


def test_softmax_ignores_a_constant_shift():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(6, 24))
    w = softmax(logits)
    for shift in (-30.0, 1.0, 700.0):
        moved = softmax(logits + shift)
        np.testing.assert_allclose(moved, w, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(np.argmax(moved, axis=1),
                                      np.argmax(w, axis=1))


def test_softmax_backward_rows_sum_to_zero():
    rng = np.random.default_rng(6)
    w = softmax(rng.normal(size=(4, 5)))
    g = softmax_backward(w, rng.normal(size=(4, 5)))
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)


def test_rot6d_examples():
    np.testing.assert_array_equal(rot6d_to_matrix(IDENTITY_R6), np.eye(3))
    np.testing.assert_allclose(rot6d_to_matrix([2, 0, 0, 0, 3, 0]),
                               np.eye(3))
    R = rot6d_to_matrix([1, 1, 0, 0, 1, 0])
    s = 1/np.sqrt(2)
    np.testing.assert_allclose(R[:, 0], [s, s, 0])
    np.testing.assert_allclose(R[:, 1], [-s, s, 0])
    np.testing.assert_allclose(R[:, 2], [0, 0, 1])


def test_rot6d_outputs_are_rotations():
    R = rot6d_to_matrix_batch(np.random.default_rng(7).normal(size=(10, 6)))
    np.testing.assert_allclose(R @ np.swapaxes(R, 1, 2),
                               np.tile(np.eye(3), (10, 1, 1)), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0)


def test_rot6d_degenerate_inputs():
    with pytest.raises(DegenerateRotation):
        rot6d_to_matrix([0, 0, 0, 0, 1, 0])
    with pytest.raises(DegenerateRotation):
        rot6d_to_matrix([1, 0, 0, 2, 0, 0])


def test_rot6d_backward_matches_central_differences():
    rng = np.random.default_rng(8)
    r6 = rng.normal(size=(3, 6))
    up = rng.normal(size=(3, 3, 3))
    g = rot6d_to_matrix_backward(r6, up)
    h = 1e-6
    flat = r6.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = np.sum(up*rot6d_to_matrix_batch(r6))
        flat[i] = orig - h
        fm = np.sum(up*rot6d_to_matrix_batch(r6))
        flat[i] = orig
        num = (fp - fm)/(2*h)
        assert abs(num - g.reshape(-1)[i]) <= 1e-6 + 1e-4*abs(num)


def test_fresh_decoders_are_no_ops():
    rng = np.random.default_rng(9)
    dec = init_decoders(6, 24, [8], rng)
    assert dec.D_A.out_dim == APPEARANCE_DIM == 49
    assert dec.D_G.out_dim == GEOMETRY_DIM
    assert dec.D_D.out_dim == deformation_dim(24) == 24 + 621
    f = rng.normal(size=6)

    sh, opacity = decode_appearance(dec.D_A, f)
    assert not np.any(sh) and opacity == 0.5

    corr = decode_geometry(dec.D_G, f)
    np.testing.assert_array_equal(corr.dr6, IDENTITY_R6)
    assert not np.any(corr.dmu) and not np.any(corr.ds)

    prior = np.zeros(24)
    prior[3] = 1.0
    out = decode_deformation(dec.D_D, f, 24, prior_logits=prior)
    assert out.dp.shape == (207, 3)
    np.testing.assert_allclose(out.w, softmax(prior))


def test_saturated_opacity_and_appearance_layout():
    params = init_mlp(3, [], APPEARANCE_DIM, np.random.default_rng(0))
    params.biases[0][48] = 20.0
    _, opacity = decode_appearance(params, np.zeros(3))
    assert abs(opacity - 1.0) < 1e-8

    raw = np.arange(APPEARANCE_DIM, dtype=float)
    sh, logit = split_appearance(raw)
    assert sh[0, 0] == 0 and sh[0, 2] == 2 and sh[1, 0] == 3
    assert sh[15, 2] == 47 and logit == 48


def test_apply_geometry():
    prim = GaussianPrimitive([1.0, 2.0, 3.0], [1.0, 0, 0, 0],
                             np.log([0.1, 0.2, 0.3]), 0.0, np.zeros((16, 3)))
    mu, R, s = apply_geometry(prim, GeometryCorrection(np.zeros(3),
                                                       IDENTITY_R6,
                                                       np.zeros(3)))
    np.testing.assert_array_equal(mu, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(R, np.eye(3))
    np.testing.assert_allclose(s, [0.1, 0.2, 0.3])

    mu, _, s = apply_geometry(prim, GeometryCorrection(
        [0.1, 0, 0], IDENTITY_R6, [np.log(2.0), 0, 0]))
    np.testing.assert_allclose(mu, [1.1, 2.0, 3.0])
    np.testing.assert_allclose(s, [0.2, 0.2, 0.3])
