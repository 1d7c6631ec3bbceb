"""Unit tests for the CNN engine: architecture, gradients, dropout, I/O."""

import numpy as np
import pytest

from fltrace import nnengine as nn
from fltrace import whitebox
from fltrace.nnengine import (DivergenceError, ModelParams, ShapeMismatchError,
                              TrainStepSpec, WmTerm, build_model)


def tiny_model(seed=0, dtype=np.float64):
    """10x10 input, convs (2,3,4): small enough for full finite differences."""
    return build_model(seed, conv_channels=(2, 3, 4), input_hw=10, dtype=dtype)


def tiny_batch(rng, n=4):
    return (rng.random((n, 10, 10, 1)).astype(np.float64),
            rng.integers(0, 10, size=n))


def flat_params(model):
    return np.concatenate([t.reshape(-1)
                           for l in model.layers for t in (l.w, l.b)])


def flat_grads(grads):
    return np.concatenate([t.reshape(-1) for g in grads for t in g])


def set_flat(model, vec):
    pos = 0
    for layer in model.layers:
        for t in (layer.w, layer.b):
            t[...] = vec[pos:pos + t.size].reshape(t.shape)
            pos += t.size


# ------------------------------------------------------------- architecture

def test_default_architecture_counts():
    model = build_model(seed=0)
    assert model.param_count() == 702826
    assert model.carrier_weights().shape == (73728,)
    kinds = [l.kind for l in model.layers]
    assert kinds == ["conv", "conv", "conv", "dense"]
    shapes = [l.w.shape for l in model.layers]
    assert shapes == [(1, 3, 3, 16), (16, 3, 3, 64), (64, 3, 3, 128),
                      (61952, 10)]
    assert model.dtype == np.float32
    assert model.n_classes == 10


def test_build_model_deterministic():
    a, b = build_model(seed=3), build_model(seed=3)
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_array_equal(la.w, lb.w)
    c = build_model(seed=4)
    assert not np.array_equal(a.layers[0].w, c.layers[0].w)


def test_build_model_rejects_too_small_input():
    with pytest.raises(ShapeMismatchError):
        build_model(seed=0, conv_channels=(4, 4, 4), input_hw=6)


def test_copy_is_independent():
    model = tiny_model()
    clone = model.copy()
    clone.layers[0].w += 1.0
    assert not np.array_equal(clone.layers[0].w, model.layers[0].w)


def test_carrier_weights_round_trip(rng):
    model = tiny_model()
    flat = rng.standard_normal(model.carrier_weights().size)
    model.set_carrier_weights(flat)
    np.testing.assert_allclose(model.carrier_weights(), flat)


# ------------------------------------------------------------------ forward

def test_softmax_rows_sum_to_one(rng):
    model = build_model(seed=1)
    x = rng.random((8, 28, 28, 1)).astype(np.float32)
    probs, preds = nn.forward_predict(model, x)
    assert probs.shape == (8, 10)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(preds, probs.argmax(axis=1))


def test_forward_accepts_channelless_images(rng):
    model = tiny_model()
    x = rng.random((3, 10, 10))
    probs, _ = nn.forward_predict(model, x)
    probs2, _ = nn.forward_predict(model, x[..., None])
    np.testing.assert_array_equal(probs, probs2)


def test_forward_rejects_wrong_shape(rng):
    model = tiny_model()
    with pytest.raises(ShapeMismatchError):
        nn.forward_predict(model, rng.random((2, 12, 12, 1)))


def test_predict_classes_matches_forward_across_batches(rng):
    model = tiny_model()
    x = rng.random((13, 10, 10, 1))
    _, direct = nn.forward_predict(model, x)
    np.testing.assert_array_equal(nn.predict_classes(model, x, batch=5), direct)


def test_forward_features_shapes(rng):
    model = build_model(seed=2)
    x = rng.random((2, 28, 28, 1)).astype(np.float32)
    assert nn.forward_features(model, x, 0).shape == (2, 26, 26, 16)
    assert nn.forward_features(model, x, 2).shape == (2, 22, 22, 128)
    assert (nn.forward_features(model, x, 1) >= 0).all()
    with pytest.raises(ShapeMismatchError):
        nn.forward_features(model, x, 3)


# ---------------------------------------------------------------- gradients

def fd_check(model, x, y, wm_term=None, dropout=0.0, rng_seed=None, h=1e-6,
             rtol=1e-4):
    def loss_at(vec):
        set_flat(model, vec)
        r = np.random.default_rng(rng_seed) if rng_seed is not None else None
        loss, _ = nn.loss_and_grads(model, x, y, dropout, r, wm_term)
        return loss

    theta = flat_params(model)
    r = np.random.default_rng(rng_seed) if rng_seed is not None else None
    _, grads = nn.loss_and_grads(model, x, y, dropout, r, wm_term)
    analytic = flat_grads(grads)
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        numeric[i] = (loss_at(up) - loss_at(dn)) / (2 * h)
    set_flat(model, theta)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=1e-7)


def test_gradients_match_finite_differences(rng):
    model = tiny_model(seed=1)
    x, y = tiny_batch(rng)
    fd_check(model, x, y)


def test_gradients_with_regularizer_match_finite_differences(rng):
    model = tiny_model(seed=2)
    x, y = tiny_batch(rng)
    l = model.carrier_weights().size
    proj = whitebox.generate_projection(l, 16, seed=7)
    basis = whitebox.generate_basis(16, 4, seed=8)
    fd_check(model, x, y, wm_term=WmTerm(2.5, proj, basis.column(1)))


def test_gradients_with_dropout_match_finite_differences(rng):
    # identical rng seeding per evaluation freezes the masks, making the
    # dropped-out loss a deterministic function we can difference
    model = tiny_model(seed=3)
    x, y = tiny_batch(rng)
    fd_check(model, x, y, dropout=0.3, rng_seed=11, rtol=1e-3)


def test_zero_lambda_regularizer_is_identity(rng):
    model = tiny_model(seed=4)
    x, y = tiny_batch(rng)
    l = model.carrier_weights().size
    proj = whitebox.generate_projection(l, 8, seed=1)
    basis = whitebox.generate_basis(8, 2, seed=2)
    loss0, grads0 = nn.loss_and_grads(model, x, y)
    loss1, grads1 = nn.loss_and_grads(model, x, y,
                                      wm_term=WmTerm(0.0, proj, basis.column(0)))
    assert loss0 == loss1
    for (dw0, db0), (dw1, db1) in zip(grads0, grads1):
        np.testing.assert_array_equal(dw0, dw1)
        np.testing.assert_array_equal(db0, db1)


def test_average_grads_is_elementwise_mean(rng):
    model = tiny_model(seed=5)
    x1, y1 = tiny_batch(rng)
    x2, y2 = tiny_batch(rng)
    _, g1 = nn.loss_and_grads(model, x1, y1)
    _, g2 = nn.loss_and_grads(model, x2, y2)
    avg = nn.average_grads([g1, g2])
    for (dw, db), (dw1, _), (dw2, _) in zip(avg, g1, g2):
        np.testing.assert_allclose(dw, (dw1 + dw2) / 2, rtol=1e-12)
    same = nn.average_grads([g1, g1])
    for (dw, db), (dw1, db1) in zip(same, g1):
        np.testing.assert_allclose(dw, dw1, rtol=1e-15)
        np.testing.assert_allclose(db, db1, rtol=1e-15)


def test_apply_grads_is_sgd_step():
    model = tiny_model(seed=6)
    before = flat_params(model)
    grads = [(np.ones_like(l.w), np.ones_like(l.b)) for l in model.layers]
    nn.apply_grads(model, grads, learning_rate=0.1)
    np.testing.assert_allclose(flat_params(model), before - 0.1, rtol=1e-12)


# ----------------------------------------------------------------- training

def test_train_step_overfits_fixed_batch(rng):
    model = tiny_model(seed=7)
    x, y = tiny_batch(rng, n=8)
    first, _ = nn.loss_and_grads(model, x, y)
    loss = first
    for _ in range(60):
        _, loss = nn.train_step(model, TrainStepSpec(x, y, learning_rate=0.1))
    assert loss < first * 0.5
    assert nn.evaluate_accuracy(model, x, y) == 1.0


def test_train_step_validation(rng):
    model = tiny_model()
    x, y = tiny_batch(rng)
    with pytest.raises(ShapeMismatchError):
        nn.train_step(model, TrainStepSpec(x[:0], y[:0]))
    with pytest.raises(ShapeMismatchError):
        nn.train_step(model, TrainStepSpec(x, y, learning_rate=0.0))


def test_nonfinite_loss_raises_divergence(rng):
    model = tiny_model(seed=8)
    model.layers[-1].w[:, :] = np.nan  # past the last ReLU, so it reaches loss
    x, y = tiny_batch(rng)
    assert not model.all_finite()
    with pytest.raises(DivergenceError):
        nn.loss_and_grads(model, x, y)


# ------------------------------------------------------------------ dropout

def test_dropout_needs_rng_to_engage(rng):
    model = tiny_model(seed=9)
    x, _ = tiny_batch(rng)
    ref, _ = nn.forward_predict(model, x)
    no_rng, _ = nn.forward_predict(model, x, dropout_prob=0.5, rng=None)
    np.testing.assert_array_equal(ref, no_rng)
    dropped, _ = nn.forward_predict(model, x, dropout_prob=0.5,
                                    rng=np.random.default_rng(0))
    assert not np.array_equal(ref, dropped)


def test_dropout_deterministic_under_seeded_rng(rng):
    model = tiny_model(seed=9)
    x, y = tiny_batch(rng)
    la, ga = nn.loss_and_grads(model, x, y, 0.4, np.random.default_rng(3))
    lb, gb = nn.loss_and_grads(model, x, y, 0.4, np.random.default_rng(3))
    assert la == lb
    for (dwa, _), (dwb, _) in zip(ga, gb):
        np.testing.assert_array_equal(dwa, dwb)


def test_dropout_mask_values_are_inverted_scale():
    mask = nn._dropout_mask((1000,), 0.2, np.random.default_rng(0), np.float64)
    values = np.unique(mask)
    np.testing.assert_allclose(values, [0.0, 1.25])
    assert 0.7 < (mask > 0).mean() < 0.9


# ---------------------------------------------------------------------- I/O

def test_save_load_round_trip(tmp_path, rng):
    model = build_model(seed=10)
    for layer in model.layers:  # nonzero biases to make the check real
        layer.b[...] = rng.standard_normal(layer.b.shape).astype(layer.b.dtype)
    path = tmp_path / "model.tfnn"
    nn.save_model(model, path)
    loaded = nn.load_model(path)
    assert [l.kind for l in loaded.layers] == [l.kind for l in model.layers]
    for la, lb in zip(model.layers, loaded.layers):
        np.testing.assert_array_equal(la.w, lb.w)
        np.testing.assert_array_equal(la.b, lb.b)
    x = rng.random((3, 28, 28, 1)).astype(np.float32)
    np.testing.assert_array_equal(nn.forward_predict(model, x)[0],
                                  nn.forward_predict(loaded, x)[0])
