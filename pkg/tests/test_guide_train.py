from collections import OrderedDict

import numpy as np
import pytest

from stackguide.error import DivergedLoss, ShapeMismatch
from stackguide.net import NetConfig, init_weights, predict_target
from stackguide.synth import Sample, ViewTransform
from stackguide.train import (
    SGD, Adam, TrainConfig, TrainingSet, batch_loss_and_grads, draw_batch, read_loss_curve, train
)
import importlib

# stackguide/__init__ re-exports the train() function, shadowing the submodule attribute
train_module = importlib.import_module('stackguide.train')

NET = NetConfig(input_size=32, stage_widths=(8, 16), blocks_per_stage=(1, 1))
NO_STEPS = dict(head_only_steps=0, sgd_warm_steps=0, adaptive_steps=0)


def _squares(n=8, size=32):
    """bright 4x4 squares, one per image, each in its own output cell"""
    images, samples = [], []
    rng = np.random.default_rng(0)
    cells = rng.choice(16, size=n, replace=False)
    for i, cell in enumerate(cells):
        row, col = divmod(int(cell), 4)
        image = 0.1 * rng.random((size, size))
        image[row * 8 + 2:row * 8 + 6, col * 8 + 2:col * 8 + 6] = 1.0
        images.append(image)
        t = ViewTransform(H=np.eye(3), source_image_id='a', view_size=size)
        samples.append(Sample(target_px=(col * 8 + 4.0, row * 8 + 4.0), source_image_id='a', transform=t,
                              split='train', index=i))
    return TrainingSet(samples, np.stack(images).astype(np.float32))


def test_config_invalid():
    with pytest.raises(ValueError):
        TrainConfig(head_only_steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(adaptive_lr=0)
    with pytest.raises(ValueError):
        TrainConfig(loss='hinge')


def test_draw_batch():
    cfg = TrainConfig(batch_size=4, seed=3)
    a = draw_batch(cfg, 'adaptive', 7, 10)
    assert np.array_equal(a, draw_batch(cfg, 'adaptive', 7, 10))
    assert len(set(a.tolist())) == 4
    assert np.all(np.diff(a) > 0)
    assert len(draw_batch(cfg, 'adaptive', 0, 2)) == 2


def test_sgd_momentum():
    params = OrderedDict(a=np.array([1.0]))
    sgd = SGD(0.1, momentum=0.5)
    sgd.update(params, {'a': np.array([1.0])}, ['a'])
    sgd.update(params, {'a': np.array([1.0])}, ['a'])
    assert params['a'][0] == pytest.approx(1.0 - 0.1 - 0.1 * 1.5)


def test_adam_first_step():
    params = OrderedDict(a=np.array([1.0, 1.0]))
    Adam(0.01).update(params, {'a': np.array([2.0, -0.5])}, ['a'])
    assert params['a'] == pytest.approx([0.99, 1.01], abs=1e-6)


def test_zero_steps_returns_initial_weights():
    data = _squares()
    w = train(data, NET, TrainConfig(seed=5, **NO_STEPS))
    init = init_weights(NET, seed=5)
    assert all(np.array_equal(w.params[k], init.params[k]) for k in init.params)
    assert w.training_stage == 'init'


def test_head_only_keeps_backbone():
    data = _squares()
    init = init_weights(NET, seed=1)
    w = train(data, NET, TrainConfig(seed=1, batch_size=4, head_only_steps=3, sgd_warm_steps=0, adaptive_steps=0),
              weights=init)
    assert w.training_stage == 'head_only'
    for k in init.params:
        if k in init.head_names:
            continue
        assert np.array_equal(w.params[k], init.params[k]), k
    assert not np.array_equal(w.params['head.select.w'], init.params['head.select.w'])


def test_train_deterministic(tmp_path):
    data = _squares()
    cfg = TrainConfig(seed=2, batch_size=4, head_only_steps=2, sgd_warm_steps=2, adaptive_steps=2)
    a = train(data, NET, cfg, loss_curve=tmp_path / 'a.tsv')
    b = train(data, NET, cfg, loss_curve=tmp_path / 'b.tsv')
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert (tmp_path / 'a.tsv').read_bytes() == (tmp_path / 'b.tsv').read_bytes()
    curve = read_loss_curve(tmp_path / 'a.tsv')
    assert [r['stage'] for r in curve] == ['head_only'] * 2 + ['sgd_warm'] * 2 + ['adaptive'] * 2
    assert [r['step'] for r in curve] == list(range(6))
    assert (tmp_path / 'a.tsv').read_text().startswith('step\tstage\tloss\n')


def test_chunked_gradients_match():
    data = _squares()
    w = init_weights(NET, seed=0, dtype=np.float64)
    images = data.images.astype(np.float64)
    loss1, g1 = batch_loss_and_grads(w, images, data.targets, 'selection', threads=1)
    loss3, g3 = batch_loss_and_grads(w, images, data.targets, 'selection', threads=3)
    assert loss3 == pytest.approx(loss1, rel=1e-12)
    for k in g1:
        assert np.allclose(g1[k], g3[k], rtol=1e-10, atol=1e-14), k


def test_diverged_loss(monkeypatch):
    data = _squares()

    def _nan(w, images, targets, loss_kind, threads=1):
        return float('nan'), OrderedDict((k, np.zeros_like(v)) for k, v in w.params.items())

    monkeypatch.setattr(train_module, 'batch_loss_and_grads', _nan)
    with pytest.raises(DivergedLoss) as e:
        train(data, NET, TrainConfig(head_only_steps=0, sgd_warm_steps=3, adaptive_steps=0))
    assert e.value.stage == 'sgd_warm'
    assert e.value.step == 0


def test_weights_overflow_is_divergence(monkeypatch):
    data = _squares()

    def _inf(w, images, targets, loss_kind, threads=1):
        return 1.0, OrderedDict((k, np.full_like(v, np.inf)) for k, v in w.params.items())

    monkeypatch.setattr(train_module, 'batch_loss_and_grads', _inf)
    with pytest.raises(DivergedLoss, match='not finite') as e:
        train(data, NET, TrainConfig(head_only_steps=2, sgd_warm_steps=0, adaptive_steps=0))
    assert e.value.stage == 'head_only'
    assert e.value.step == 0


def test_input_size_mismatch():
    data = _squares()
    with pytest.raises(ShapeMismatch):
        train(data, NetConfig(input_size=64, stage_widths=(8, 16), blocks_per_stage=(1, 1)), TrainConfig(**NO_STEPS))


def test_overfits_small_set(tmp_path):
    data = _squares()
    cfg = TrainConfig(head_only_steps=0, sgd_warm_steps=0, adaptive_steps=500, adaptive_lr=0.01, batch_size=8)
    w = train(data, NET, cfg, loss_curve=tmp_path / 'loss.tsv', quiet=True)
    curve = read_loss_curve(tmp_path / 'loss.tsv')
    assert curve[-1]['loss'] < 0.01 * curve[0]['loss']
    for image, sample in zip(data.images, data.samples):
        loc = predict_target(w, image)
        assert (loc.u, loc.v) == sample.target_px
