import math

import numpy as np
import pytest

from stackguide.error import NonFiniteWeights, ShapeMismatch, TargetOutOfGrid, UnreadableWeights
from stackguide.evaluate import inference_times
from stackguide.net import (
    NetConfig, Prediction, backward, features, forward, init_weights, load_weights, localize, loss_and_grads,
    loss_regression, loss_regression_grad, loss_selection, loss_selection_grad, param_shapes, predict_target,
    save_weights, softmax_heatmap, target_cell, zero_weights
)

SMALL = NetConfig(input_size=32, stage_widths=(4, 8), blocks_per_stage=(1, 1), head='both')


def test_zero_network():
    w = zero_weights(NetConfig(input_size=64, stage_widths=(4, 8), blocks_per_stage=(1, 1), head='both'))
    pred = forward(w, np.random.default_rng(0).random((64, 64)))
    assert np.all(pred.heatmap == 0)
    assert pred.coords.tolist() == [0.0, 0.0]


def test_default_grid():
    w = init_weights(NetConfig())
    pred = forward(w, np.zeros((256, 256)))
    assert pred.heatmap.shape == (32, 32)
    assert pred.coords is None


def test_input_shape_mismatch():
    w = init_weights(SMALL)
    with pytest.raises(ShapeMismatch):
        forward(w, np.zeros((31, 32)))


def test_config_invalid():
    with pytest.raises(ValueError):
        NetConfig(input_size=100)
    with pytest.raises(ValueError):
        NetConfig(stage_widths=(8,), blocks_per_stage=(1,))
    with pytest.raises(ValueError):
        NetConfig(head='both-ways')


def test_init_deterministic():
    a, b = init_weights(SMALL, seed=4), init_weights(SMALL, seed=4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert list(a.params) == list(param_shapes(SMALL))
    assert not np.array_equal(a.params['stem.w'], init_weights(SMALL, seed=5).params['stem.w'])


def test_translation_equivariance():
    cfg = NetConfig(input_size=64, stage_widths=(4, 8), blocks_per_stage=(1, 1), padding='circular')
    w = init_weights(cfg, seed=1, dtype=np.float64)
    image = np.random.default_rng(1).random((64, 64))
    f = features(w, image)
    shifted = features(w, np.roll(image, 8, axis=1))
    assert f.shape == (8, 8, 8)
    assert np.allclose(np.roll(f, 1, axis=1), shifted, atol=1e-10)
    shifted = features(w, np.roll(image, 8, axis=0))
    assert np.allclose(np.roll(f, 1, axis=0), shifted, atol=1e-10)


@pytest.mark.parametrize('loss_kind', ['selection', 'regression'])
def test_gradients_match_finite_differences(loss_kind):
    w = init_weights(SMALL, seed=2, dtype=np.float64)
    rng = np.random.default_rng(2)
    images = rng.random((2, 32, 32))
    targets = np.array([[5.5, 20.0], [27.0, 3.25]])
    _, grads = loss_and_grads(w, images, targets, loss_kind)
    h = 1e-5
    for name, tensor in w.params.items():
        flat = tensor.reshape(-1)
        picks = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        analytic, numeric = [], []
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            up = loss_and_grads(w, images, targets, loss_kind)[0]
            flat[i] = old - h
            down = loss_and_grads(w, images, targets, loss_kind)[0]
            flat[i] = old
            analytic.append(grads[name].reshape(-1)[i])
            numeric.append((up - down) / (2 * h))
        analytic, numeric = np.array(analytic), np.array(numeric)
        scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        # tensors the loss is invariant to only carry rounding noise
        assert np.linalg.norm(analytic - numeric) <= 1e-4 * scale + 1e-8, name


def test_loss_selection_uniform():
    pred = Prediction(heatmap=np.zeros((32, 32)))
    assert loss_selection(pred, (100.0, 50.0)) == pytest.approx(math.log(1024))
    grad = loss_selection_grad(pred, (100.0, 50.0))
    assert grad[50 // 8, 100 // 8] == pytest.approx(1 / 1024 - 1)
    assert grad.sum() == pytest.approx(0.0, abs=1e-12)


def test_loss_regression():
    pred = Prediction(coords=np.array([128.0, 128.0]))
    assert loss_regression(pred, (128.0 + 25.6, 128.0)) == pytest.approx(0.01)
    assert loss_regression_grad(pred, (128.0, 128.0)).tolist() == [0.0, 0.0]


def test_target_out_of_grid():
    with pytest.raises(TargetOutOfGrid):
        target_cell((256.0, 10.0), NetConfig())
    assert target_cell((255.9, 0.0), NetConfig()) == (0, 31)
    with pytest.raises(TargetOutOfGrid):
        loss_selection(Prediction(heatmap=np.zeros((32, 32))), (-1.0, 3.0))


def test_missing_head():
    with pytest.raises(ShapeMismatch):
        loss_regression(Prediction(heatmap=np.zeros((4, 4))), (1.0, 1.0))
    with pytest.raises(ShapeMismatch):
        localize(Prediction())


def test_localize_first_maximum():
    heatmap = np.zeros((4, 4))
    heatmap[2, 1] = heatmap[3, 0] = 5.0
    loc = localize(Prediction(heatmap=heatmap, input_size=32))
    assert (loc.u, loc.v) == (12.0, 20.0)
    assert loc.cell == (2, 1)
    assert loc.confidence == pytest.approx(softmax_heatmap(heatmap)[2, 1])


def test_localize_regression():
    loc = localize(Prediction(coords=np.array([12.5, 200.25])))
    assert (loc.u, loc.v) == (12.5, 200.25)
    assert loc.confidence is None


def test_weights_roundtrip(tmp_path):
    w = init_weights(SMALL, seed=3)
    w.training_stage = 'adaptive'
    save_weights(w, tmp_path / 'w.bin')
    loaded = load_weights(tmp_path / 'w.bin')
    assert loaded.config == SMALL
    assert loaded.training_stage == 'adaptive'
    assert all(np.array_equal(w.params[k], loaded.params[k]) for k in w.params)
    image = np.random.default_rng(3).random((32, 32))
    assert predict_target(w, image) == predict_target(loaded, image)


def test_weights_not_a_weights_file(tmp_path):
    (tmp_path / 'w.bin').write_bytes(b'P5\n2 2\n255\n0000')
    with pytest.raises(UnreadableWeights):
        load_weights(tmp_path / 'w.bin')


def test_weights_truncated(tmp_path):
    save_weights(init_weights(SMALL), tmp_path / 'w.bin')
    data = (tmp_path / 'w.bin').read_bytes()
    (tmp_path / 'w.bin').write_bytes(data[:-4])
    with pytest.raises(ShapeMismatch):
        load_weights(tmp_path / 'w.bin')


def test_weights_missing_or_corrupt_header(tmp_path):
    with pytest.raises(UnreadableWeights):
        load_weights(tmp_path / 'missing.bin')
    save_weights(init_weights(SMALL), tmp_path / 'w.bin')
    data = (tmp_path / 'w.bin').read_bytes()
    magic_end = data.index(b'{')
    (tmp_path / 'w.bin').write_bytes(data[:magic_end] + b'{"version": \n' + data[data.index(b'\n', magic_end) + 1:])
    with pytest.raises(UnreadableWeights):
        load_weights(tmp_path / 'w.bin')


def test_weights_not_finite(tmp_path):
    w = init_weights(SMALL, seed=1)
    name = next(iter(w.params))
    w.params[name].reshape(-1)[3] = np.nan
    save_weights(w, tmp_path / 'w.bin')
    with pytest.raises(NonFiniteWeights, match=name):
        load_weights(tmp_path / 'w.bin')


def test_loss_selection_saturated():
    heatmap = np.zeros((32, 32))
    heatmap[50 // 8, 100 // 8] = 100.0
    assert loss_selection(Prediction(heatmap=heatmap), (100.0, 50.0)) < 1e-30


def test_backward_bitwise_repeatable():
    w = init_weights(SMALL, seed=4)
    image = np.random.default_rng(4).random((32, 32)).astype(np.float32)
    a = backward(w, image, (12.0, 20.0), 'both')
    b = backward(w, image, (12.0, 20.0), 'both')
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_inference_within_budget():
    w = init_weights(NetConfig(), seed=0)
    rng = np.random.default_rng(5)
    images = [rng.random((256, 256)).astype(np.float32) for _ in range(5)]
    inference_times(w, images[:1])
    times = inference_times(w, [images[i % 5] for i in range(25)])
    assert np.median(times) <= 0.05
