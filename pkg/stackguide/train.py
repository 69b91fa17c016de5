"""
Staged training of the guidance network.

The schedule runs three stages in order, each with a constant learning rate:

- ``head_only``: plain SGD on the head parameters, backbone frozen
- ``sgd_warm``: SGD with momentum on all parameters, small learning rate
- ``adaptive``: Adam on all parameters

Batch ``step`` of ``stage`` is drawn from ``stream(seed, 'batch', stage, step)``,
so a run only depends on its seed and the training split.
"""
from collections import OrderedDict
from dataclasses import dataclass
import math
from pathlib import Path
import time
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from stackguide.error import DivergedLoss, InvalidCount, NonFiniteWeights, ShapeMismatch
from stackguide.logger import logger
from stackguide.net import LOSSES, ModelWeights, NetConfig, Params, check_finite, init_weights, loss_and_grads
from stackguide.rng import stream
from stackguide.synth import DatasetManifest, Sample, load_sample_image
from stackguide.utils import humantime, pool_map, readlines, wrap_tqdm, writelines


@dataclass(frozen=True)
class TrainConfig:
    head_only_steps: int = 200
    head_only_lr: float = 0.05
    sgd_warm_steps: int = 200
    sgd_warm_lr: float = 1e-3
    momentum: float = 0.9
    adaptive_steps: int = 2000
    adaptive_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    seed: int = 0
    loss: str = 'selection'
    threads: int = 1

    def __post_init__(self):
        for stage in ('head_only', 'sgd_warm', 'adaptive'):
            if getattr(self, f'{stage}_steps') < 0:
                raise ValueError(f'{stage}_steps must not be negative')
            if not getattr(self, f'{stage}_lr') > 0:
                raise ValueError(f'{stage}_lr must be positive')
        if not 0 <= self.momentum < 1:
            raise ValueError(f'momentum must be in [0, 1) and not {self.momentum}')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError('expect 0 <= beta1, beta2 < 1 and eps > 0')
        if self.batch_size <= 0:
            raise ValueError(f'batch_size must be positive and not {self.batch_size}')
        if self.loss not in LOSSES:
            raise ValueError(f'loss must be one of {LOSSES} and not {self.loss}')

    def stages(self) -> List[Tuple[str, int]]:
        return [(s, getattr(self, f'{s}_steps')) for s in ('head_only', 'sgd_warm', 'adaptive')]


class SGD:

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: Params = OrderedDict()

    def update(self, params: Params, grads: Params, names: Iterable[str]):
        for k in names:
            g = grads[k]
            if self.momentum:
                v = self.velocity.get(k)
                v = g if v is None else self.momentum * v + g
                self.velocity[k] = v
                g = v
            params[k] -= (self.lr * g).astype(params[k].dtype)


class Adam:

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Params = OrderedDict()
        self.v: Params = OrderedDict()
        self.t = 0

    def update(self, params: Params, grads: Params, names: Iterable[str]):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k in names:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * (g * g)
            step = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] -= step.astype(params[k].dtype)


def _optimizer(stage: str, cfg: TrainConfig):
    if stage == 'head_only':
        return SGD(cfg.head_only_lr)
    if stage == 'sgd_warm':
        return SGD(cfg.sgd_warm_lr, cfg.momentum)
    return Adam(cfg.adaptive_lr, cfg.beta1, cfg.beta2, cfg.eps)


def draw_batch(cfg: TrainConfig, stage: str, step: int, n: int) -> np.ndarray:
    """indices of the batch used at ``step`` of ``stage``"""
    rng = stream(cfg.seed, 'batch', stage, step)
    size = min(cfg.batch_size, n)
    return np.sort(rng.choice(n, size=size, replace=False))


def batch_loss_and_grads(w: ModelWeights, images: np.ndarray, targets: np.ndarray,
                         loss_kind: str, threads: int = 1) -> Tuple[float, Params]:
    """mean loss and gradients, summed over fixed contiguous chunks in order"""
    n = len(images)
    chunks = [c for c in np.array_split(np.arange(n), min(max(1, threads), n)) if len(c)]
    if len(chunks) == 1:
        return loss_and_grads(w, images, targets, loss_kind)

    def _chunk(idx: np.ndarray):
        return len(idx), loss_and_grads(w, images[idx], targets[idx], loss_kind)

    loss, grads = 0.0, None
    for size, (value, g) in pool_map(_chunk, chunks, threads):
        scale = size / n
        loss += scale * value
        if grads is None:
            grads = OrderedDict((k, scale * v) for k, v in g.items())
        else:
            for k, v in g.items():
                grads[k] += scale * v
    assert grads is not None
    return loss, grads


class TrainingSet:
    """train split images and targets, read once"""

    def __init__(self, samples: List[Sample], images: np.ndarray):
        self.samples = samples
        self.images = images
        self.targets = np.array([s.target_px for s in samples], dtype=np.float64)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, dtype=np.float32) -> 'TrainingSet':
        samples = manifest.split('train')
        if not samples:
            raise InvalidCount('manifest has no training samples')
        images = np.stack([load_sample_image(manifest, s).astype(dtype) for s in samples])
        return cls(samples, images)

    def __len__(self):
        return len(self.samples)


def train(manifest: Union[DatasetManifest, TrainingSet], net_cfg: NetConfig, cfg: TrainConfig,
          weights: Optional[ModelWeights] = None, loss_curve: Optional[Union[Path, str]] = None,
          quiet: bool = False) -> ModelWeights:
    """
    Run the three-stage schedule.

    Parameters
    ----------
    manifest : DatasetManifest or TrainingSet
        the training split is used
    net_cfg : NetConfig
        architecture, ignored when ``weights`` are given
    cfg : TrainConfig
        schedule, batch size and seed
    weights : ModelWeights, optional
        start weights, otherwise ``init_weights(net_cfg, cfg.seed)``
    loss_curve : Path, optional
        tab separated ``step stage loss`` records

    Returns
    -------
    ModelWeights
        the trained weights (a copy; the start weights are left untouched)
    """
    data = manifest if isinstance(manifest, TrainingSet) else TrainingSet.from_manifest(manifest)
    w = (weights or init_weights(net_cfg, cfg.seed)).copy()
    if data.images.shape[1:] != (w.config.input_size, w.config.input_size):
        raise ShapeMismatch(f'views are {data.images.shape[1:]} but the net expects {w.config.input_size}')

    records: List[Tuple[int, str, float]] = []
    step_count = 0
    for stage, steps in cfg.stages():
        if steps == 0:
            continue
        names = w.head_names if stage == 'head_only' else list(w.params)
        optimizer = _optimizer(stage, cfg)
        logger.opt(colors=True).info(f'train <c>{stage}</c>: {steps} steps on {len(names)} tensors')
        start = time.time()
        for step in wrap_tqdm(stage, range(steps), total=steps, quiet=quiet):
            idx = draw_batch(cfg, stage, step, len(data))
            loss, grads = batch_loss_and_grads(w, data.images[idx], data.targets[idx], cfg.loss, cfg.threads)
            if not math.isfinite(loss):
                raise DivergedLoss(f'loss is {loss}', stage=stage, step=step)
            optimizer.update(w.params, grads, names)
            try:
                check_finite(w, names)
            except NonFiniteWeights as e:
                raise DivergedLoss(str(e), stage=stage, step=step) from e
            records.append((step_count, stage, loss))
            step_count += 1
        duration = time.time() - start
        logger.info(f'train {stage} took {humantime(duration)}, last loss {records[-1][2]:.6g}', duration=duration)
        w.training_stage = stage

    if loss_curve is not None:
        writelines(['step\tstage\tloss'] + [f'{i}\t{s}\t{v!r}' for i, s, v in records], loss_curve)
    return w


def read_loss_curve(path: Union[Path, str]) -> List[Dict]:
    return [dict(step=int(i), stage=s, loss=float(v))
            for i, s, v in (line.split('\t') for line in readlines(path, skip_rows=1))]
