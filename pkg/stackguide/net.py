"""
A small ConvNeXt-style network with explicit forward and reverse-mode passes.

Tensors are channels-last, ``(batch, rows, cols, channels)``. The network is::

    stem (patch conv, stride 4) -> norm
    stage 1 blocks
    norm -> patch conv (stride 2)          # output stride 8
    stage 2 blocks
    head norm -> selection head (1x1 conv, one logit per cell)
              -> regression head (global average pool, affine, 2 coords)

A block is ``x + pw2(gelu(pw1(norm(dwconv7x7(x)))))``. Norms are layer norms
over channels. Regression outputs are coordinates normalised by the input
size; ``Prediction.coords`` holds them in pixels.
"""
from collections import OrderedDict
from dataclasses import asdict, dataclass
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
from scipy import special

from stackguide.conf import from_dict
from stackguide.error import (
    NonFiniteActivation, NonFiniteGradient, NonFiniteWeights, ShapeMismatch, TargetOutOfGrid, UnreadableWeights
)
from stackguide.rng import stream
from stackguide.utils import write_bytes

HEADS = ('regression', 'selection', 'both')
LOSSES = ('regression', 'selection', 'both')
STAGES = ('init', 'head_only', 'sgd_warm', 'adaptive')
WEIGHTS_MAGIC = b'STACKGUIDE-WEIGHTS\n'
WEIGHTS_VERSION = 1

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 256
    stem_stride: int = 4
    stage_widths: Tuple[int, ...] = (24, 48)
    blocks_per_stage: Tuple[int, ...] = (2, 2)
    output_stride: int = 8
    head: str = 'selection'
    kernel_size: int = 7
    expansion_ratio: int = 4
    padding: str = 'zeros'
    norm_eps: float = 1e-6

    def __post_init__(self):
        if len(self.stage_widths) != len(self.blocks_per_stage) or not self.stage_widths:
            raise ValueError('stage_widths and blocks_per_stage must have the same non-zero length')
        if self.stem_stride * 2 ** (len(self.stage_widths) - 1) != self.output_stride:
            raise ValueError(f'stem_stride {self.stem_stride} with {len(self.stage_widths)} stages '
                             f'does not give output_stride {self.output_stride}')
        if self.input_size % self.output_stride:
            raise ValueError(f'input_size {self.input_size} must be divisible by {self.output_stride}')
        if self.kernel_size % 2 != 1:
            raise ValueError(f'kernel_size must be odd and not {self.kernel_size}')
        if self.kernel_size // 2 > self.input_size // self.output_stride:
            raise ValueError('kernel_size too large for the feature maps')
        if self.head not in HEADS:
            raise ValueError(f'head must be one of {HEADS} and not {self.head}')
        if self.padding not in ('zeros', 'circular'):
            raise ValueError(f'padding must be zeros or circular and not {self.padding}')

    @property
    def grid(self) -> int:
        return self.input_size // self.output_stride

    @property
    def selection(self) -> bool:
        return self.head in ('selection', 'both')

    @property
    def regression(self) -> bool:
        return self.head in ('regression', 'both')


@dataclass
class ModelWeights:
    params: Params
    config: NetConfig
    training_stage: str = 'init'

    def copy(self) -> 'ModelWeights':
        return ModelWeights(OrderedDict((k, v.copy()) for k, v in self.params.items()),
                            self.config, self.training_stage)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def head_names(self) -> List[str]:
        return [k for k in self.params if k.startswith('head')]

    def __repr__(self):
        count = sum(v.size for v in self.params.values())
        return f'ModelWeights({count} params, stage={self.training_stage})'


@dataclass
class Prediction:
    heatmap: Optional[np.ndarray] = None
    coords: Optional[np.ndarray] = None
    input_size: int = 256
    output_stride: int = 8


@dataclass(frozen=True)
class Localization:
    u: float
    v: float
    confidence: Optional[float] = None
    cell: Optional[Tuple[int, int]] = None


def param_shapes(cfg: NetConfig) -> 'OrderedDict[str, Tuple[int, ...]]':
    """all parameter tensors in declared order"""
    shapes: 'OrderedDict[str, Tuple[int, ...]]' = OrderedDict()
    k = cfg.kernel_size
    c0 = cfg.stage_widths[0]
    shapes['stem.w'] = (cfg.stem_stride * cfg.stem_stride, c0)
    shapes['stem.b'] = (c0,)
    shapes['stem.norm.g'] = (c0,)
    shapes['stem.norm.b'] = (c0,)
    for s, (width, blocks) in enumerate(zip(cfg.stage_widths, cfg.blocks_per_stage)):
        if s > 0:
            prev = cfg.stage_widths[s - 1]
            shapes[f'down{s}.norm.g'] = (prev,)
            shapes[f'down{s}.norm.b'] = (prev,)
            shapes[f'down{s}.w'] = (4 * prev, width)
            shapes[f'down{s}.b'] = (width,)
        hidden = cfg.expansion_ratio * width
        for b in range(blocks):
            prefix = f'stage{s}.block{b}.'
            shapes[prefix + 'dw.w'] = (k, k, width)
            shapes[prefix + 'dw.b'] = (width,)
            shapes[prefix + 'norm.g'] = (width,)
            shapes[prefix + 'norm.b'] = (width,)
            shapes[prefix + 'pw1.w'] = (width, hidden)
            shapes[prefix + 'pw1.b'] = (hidden,)
            shapes[prefix + 'pw2.w'] = (hidden, width)
            shapes[prefix + 'pw2.b'] = (width,)
    width = cfg.stage_widths[-1]
    shapes['head.norm.g'] = (width,)
    shapes['head.norm.b'] = (width,)
    if cfg.selection:
        shapes['head.select.w'] = (width,)
        shapes['head.select.b'] = (1,)
    if cfg.regression:
        shapes['head.regress.w'] = (width, 2)
        shapes['head.regress.b'] = (2,)
    return shapes


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if name.endswith('dw.w'):
        return shape[0] * shape[1]
    return shape[0]


def init_weights(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> ModelWeights:
    """fan-in scaled uniform weights, unit norm scales, zero biases"""
    rng = stream(seed, 'init')
    params: Params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name.endswith('norm.g'):
            value = np.ones(shape)
        elif name.endswith('.b'):
            value = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = value.astype(dtype)
    # regression starts at the view centre
    if 'head.regress.b' in params:
        params['head.regress.b'][:] = 0.5
    return ModelWeights(params, cfg, 'init')


def zero_weights(cfg: NetConfig, dtype=np.float64) -> ModelWeights:
    params = OrderedDict((k, np.zeros(s, dtype=dtype)) for k, s in param_shapes(cfg).items())
    return ModelWeights(params, cfg, 'init')


# ---------------------------------------------------------------------------
# layers: each forward returns (output, cache), each backward (d_input, grads)

def _patchify(x: np.ndarray, s: int) -> np.ndarray:
    n, h, w, c = x.shape
    return x.reshape(n, h // s, s, w // s, s, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // s, w // s, s * s * c)


def _unpatchify(xp: np.ndarray, s: int, c: int) -> np.ndarray:
    n, hs, ws, _ = xp.shape
    return xp.reshape(n, hs, ws, s, s, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, hs * s, ws * s, c)


def _patch_conv(x, w, b, s):
    xp = _patchify(x, s)
    return xp @ w + b, (xp, s, x.shape[-1])


def _patch_conv_back(dy, cache, w):
    xp, s, c = cache
    dw = xp.reshape(-1, xp.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.sum(axis=(0, 1, 2))
    return _unpatchify(dy @ w.T, s, c), dw, db


def _norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _norm_back(dy, cache, g):
    xhat, rstd = cache
    dg = (dy * xhat).sum(axis=(0, 1, 2))
    db = dy.sum(axis=(0, 1, 2))
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _pad(x, p, mode):
    if mode == 'circular':
        return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode='wrap')
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _unpad(dxp, p, mode):
    if p == 0:
        return dxp
    if mode != 'circular':
        return dxp[:, p:-p, p:-p, :]
    # fold the wrapped borders back onto the opposite edges
    h = dxp.shape[1] - 2 * p
    rows = dxp[:, p:p + h].copy()
    rows[:, h - p:] += dxp[:, :p]
    rows[:, :p] += dxp[:, h + p:]
    w = dxp.shape[2] - 2 * p
    dx = rows[:, :, p:p + w].copy()
    dx[:, :, w - p:] += rows[:, :, :p]
    dx[:, :, :p] += rows[:, :, w + p:]
    return dx


def _dwconv(x, w, b, mode):
    k = w.shape[0]
    p = k // 2
    n, h, wd, c = x.shape
    xp = _pad(x, p, mode)
    y = np.broadcast_to(b, x.shape).copy()
    for dy in range(k):
        for dx in range(k):
            y += xp[:, dy:dy + h, dx:dx + wd, :] * w[dy, dx]
    return y, (xp, mode)


def _dwconv_back(dout, cache, w):
    xp, mode = cache
    k = w.shape[0]
    p = k // 2
    n, h, wd, c = dout.shape
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for dy in range(k):
        for dx in range(k):
            dw[dy, dx] = (xp[:, dy:dy + h, dx:dx + wd, :] * dout).sum(axis=(0, 1, 2))
            dxp[:, dy:dy + h, dx:dx + wd, :] += dout * w[dy, dx]
    return _unpad(dxp, p, mode), dw, dout.sum(axis=(0, 1, 2))


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + special.erf(x * _SQRT1_2))


def _gelu_grad(x):
    cdf = 0.5 * (1.0 + special.erf(x * _SQRT1_2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


# ---------------------------------------------------------------------------
# network

class Tape:
    """caches recorded by a forward pass, consumed by ``_backward``"""

    def __init__(self):
        self.entries: List[Tuple[str, object]] = []
        self.features: Optional[np.ndarray] = None
        self.z: Optional[np.ndarray] = None

    def push(self, name: str, cache):
        self.entries.append((name, cache))


def _check_input(cfg: NetConfig, images: np.ndarray) -> np.ndarray:
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3 or images.shape[1:] != (cfg.input_size, cfg.input_size):
        raise ShapeMismatch(f'expect images of {cfg.input_size}x{cfg.input_size} and not {images.shape}')
    return images


def _features(params: Params, cfg: NetConfig, x: np.ndarray, tape: Optional[Tape]) -> np.ndarray:
    eps = cfg.norm_eps
    x, c = _patch_conv(x, params['stem.w'], params['stem.b'], cfg.stem_stride)
    tape and tape.push('stem', c)
    x, c = _norm(x, params['stem.norm.g'], params['stem.norm.b'], eps)
    tape and tape.push('stem.norm', c)

    for s, blocks in enumerate(cfg.blocks_per_stage):
        if s > 0:
            x, c = _norm(x, params[f'down{s}.norm.g'], params[f'down{s}.norm.b'], eps)
            tape and tape.push(f'down{s}.norm', c)
            x, c = _patch_conv(x, params[f'down{s}.w'], params[f'down{s}.b'], 2)
            tape and tape.push(f'down{s}', c)
        for b in range(blocks):
            prefix = f'stage{s}.block{b}.'
            d, c_dw = _dwconv(x, params[prefix + 'dw.w'], params[prefix + 'dw.b'], cfg.padding)
            n, c_n = _norm(d, params[prefix + 'norm.g'], params[prefix + 'norm.b'], eps)
            h = n @ params[prefix + 'pw1.w'] + params[prefix + 'pw1.b']
            a = _gelu(h)
            x = x + (a @ params[prefix + 'pw2.w'] + params[prefix + 'pw2.b'])
            tape and tape.push(prefix, (c_dw, c_n, n, h, a))
    return x


def _heads(params: Params, cfg: NetConfig, f: np.ndarray, tape: Optional[Tape]):
    fn, c = _norm(f, params['head.norm.g'], params['head.norm.b'], cfg.norm_eps)
    if tape is not None:
        tape.push('head.norm', c)
        tape.features = fn
    logits = z = None
    if cfg.selection:
        logits = fn @ params['head.select.w'] + params['head.select.b'][0]
    if cfg.regression:
        z = fn.mean(axis=(1, 2)) @ params['head.regress.w'] + params['head.regress.b']
        if tape is not None:
            tape.z = z
    return logits, z


def forward_batch(w: ModelWeights, images: np.ndarray, keep: bool = False):
    """returns (logits (n, g, g) or None, normalised coords (n, 2) or None, tape or None)"""
    cfg = w.config
    images = _check_input(cfg, np.asarray(images))
    tape = Tape() if keep else None
    x = images.astype(w.dtype, copy=False)[..., None]
    f = _features(w.params, cfg, x, tape)
    logits, z = _heads(w.params, cfg, f, tape)
    for name, out in (('heatmap', logits), ('coords', z)):
        if out is not None and not np.all(np.isfinite(out)):
            raise NonFiniteActivation(f'{name} is not finite')
    return logits, z, tape


def features(w: ModelWeights, image: np.ndarray) -> np.ndarray:
    """stem and stage features before the heads, (g, g, channels)"""
    x = _check_input(w.config, np.asarray(image)).astype(w.dtype, copy=False)[..., None]
    return _features(w.params, w.config, x, None)[0]


def forward(w: ModelWeights, image: np.ndarray) -> Prediction:
    logits, z, _ = forward_batch(w, image)
    cfg = w.config
    return Prediction(heatmap=None if logits is None else logits[0],
                      coords=None if z is None else z[0] * cfg.input_size,
                      input_size=cfg.input_size, output_stride=cfg.output_stride)


def _backward(params: Params, cfg: NetConfig, tape: Tape,
              d_logits: Optional[np.ndarray], d_z: Optional[np.ndarray]) -> Params:
    grads: Params = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
    fn = tape.features
    assert fn is not None
    dfn = np.zeros_like(fn)
    if d_logits is not None and cfg.selection:
        grads['head.select.w'] = np.einsum('nijc,nij->c', fn, d_logits)
        grads['head.select.b'] = np.array([d_logits.sum()], dtype=fn.dtype)
        dfn += d_logits[..., None] * params['head.select.w']
    if d_z is not None and cfg.regression:
        pooled = fn.mean(axis=(1, 2))
        grads['head.regress.w'] = pooled.T @ d_z
        grads['head.regress.b'] = d_z.sum(axis=0)
        g = fn.shape[1] * fn.shape[2]
        dfn += (d_z @ params['head.regress.w'].T)[:, None, None, :] / g

    entries = list(tape.entries)
    name, cache = entries.pop()
    assert name == 'head.norm'
    dx, grads['head.norm.g'], grads['head.norm.b'] = _norm_back(dfn, cache, params['head.norm.g'])

    while entries:
        name, cache = entries.pop()
        if name.startswith('stage'):
            c_dw, c_n, n, h, a = cache
            dy = dx
            grads[name + 'pw2.w'] = a.reshape(-1, a.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
            grads[name + 'pw2.b'] = dy.sum(axis=(0, 1, 2))
            dh = (dy @ params[name + 'pw2.w'].T) * _gelu_grad(h)
            grads[name + 'pw1.w'] = n.reshape(-1, n.shape[-1]).T @ dh.reshape(-1, dh.shape[-1])
            grads[name + 'pw1.b'] = dh.sum(axis=(0, 1, 2))
            dn = dh @ params[name + 'pw1.w'].T
            dd, grads[name + 'norm.g'], grads[name + 'norm.b'] = _norm_back(dn, c_n, params[name + 'norm.g'])
            dres, grads[name + 'dw.w'], grads[name + 'dw.b'] = _dwconv_back(dd, c_dw, params[name + 'dw.w'])
            dx = dx + dres
        elif name.endswith('.norm'):
            dx, grads[name + '.g'], grads[name + '.b'] = _norm_back(dx, cache, params[name + '.g'])
        else:
            dx, grads[name + '.w'], grads[name + '.b'] = _patch_conv_back(dx, cache, params[name + '.w'])
    return grads


# ---------------------------------------------------------------------------
# losses

def target_cell(target_px: Sequence[float], cfg: NetConfig) -> Tuple[int, int]:
    """(row, col) of the output cell containing the target"""
    col = math.floor(target_px[0] / cfg.output_stride)
    row = math.floor(target_px[1] / cfg.output_stride)
    if not (0 <= row < cfg.grid and 0 <= col < cfg.grid):
        raise TargetOutOfGrid(f'target {tuple(target_px)} outside the {cfg.grid}x{cfg.grid} grid')
    return row, col


def _selection_loss(logits: np.ndarray, cells: np.ndarray) -> Tuple[float, np.ndarray]:
    n, g, _ = logits.shape
    flat = logits.reshape(n, g * g)
    logp = special.log_softmax(flat, axis=1)
    idx = cells[:, 0] * g + cells[:, 1]
    loss = -logp[np.arange(n), idx].mean()
    d = np.exp(logp)
    d[np.arange(n), idx] -= 1.0
    return float(loss), (d / n).reshape(n, g, g)


def _regression_loss(z: np.ndarray, t: np.ndarray) -> Tuple[float, np.ndarray]:
    n = z.shape[0]
    diff = z - t
    return float((diff * diff).sum() / n), 2.0 * diff / n


def softmax_heatmap(heatmap: np.ndarray) -> np.ndarray:
    flat = np.asarray(heatmap, dtype=np.float64).reshape(-1)
    return special.softmax(flat).reshape(np.shape(heatmap))


def loss_regression(pred: Prediction, target_px: Sequence[float]) -> float:
    """squared distance in coordinates normalised by the input size"""
    if pred.coords is None:
        raise ShapeMismatch('prediction has no regression head')
    z = np.asarray(pred.coords, dtype=np.float64) / pred.input_size
    t = np.asarray(target_px, dtype=np.float64) / pred.input_size
    return _regression_loss(z[None], t[None])[0]


def loss_regression_grad(pred: Prediction, target_px: Sequence[float]) -> np.ndarray:
    """gradient of ``loss_regression`` with respect to ``pred.coords`` (pixels)"""
    if pred.coords is None:
        raise ShapeMismatch('prediction has no regression head')
    s = pred.input_size
    return 2.0 * (np.asarray(pred.coords, dtype=np.float64) / s - np.asarray(target_px, dtype=np.float64) / s) / s


def loss_selection(pred: Prediction, target_px: Sequence[float]) -> float:
    """cross-entropy of the cell softmax against the cell containing the target"""
    return _selection(pred, target_px)[0]


def loss_selection_grad(pred: Prediction, target_px: Sequence[float]) -> np.ndarray:
    """gradient of ``loss_selection`` with respect to ``pred.heatmap``"""
    return _selection(pred, target_px)[1]


def _selection(pred: Prediction, target_px: Sequence[float]):
    if pred.heatmap is None:
        raise ShapeMismatch('prediction has no selection head')
    g = pred.heatmap.shape[0]
    col = math.floor(target_px[0] / pred.output_stride)
    row = math.floor(target_px[1] / pred.output_stride)
    if not (0 <= row < g and 0 <= col < pred.heatmap.shape[1]):
        raise TargetOutOfGrid(f'target {tuple(target_px)} outside the {g}x{g} grid')
    loss, d = _selection_loss(np.asarray(pred.heatmap, dtype=np.float64)[None], np.array([[row, col]]))
    return loss, d[0]


def loss_and_grads(w: ModelWeights, images: np.ndarray, targets: np.ndarray,
                   loss_kind: str = 'selection') -> Tuple[float, Params]:
    """mean loss over the batch and exact gradients of every parameter tensor"""
    if loss_kind not in LOSSES:
        raise ValueError(f'loss must be one of {LOSSES} and not {loss_kind}')
    cfg = w.config
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    logits, z, tape = forward_batch(w, images, keep=True)
    assert tape is not None

    loss, d_logits, d_z = 0.0, None, None
    if loss_kind in ('selection', 'both'):
        if logits is None:
            raise ShapeMismatch('selection loss needs the selection head')
        cells = np.array([target_cell(t, cfg) for t in targets])
        value, d_logits = _selection_loss(logits, cells)
        d_logits = d_logits.astype(w.dtype)
        loss += value
    if loss_kind in ('regression', 'both'):
        if z is None:
            raise ShapeMismatch('regression loss needs the regression head')
        value, d_z = _regression_loss(z, (targets / cfg.input_size).astype(w.dtype))
        loss += value

    grads = _backward(w.params, cfg, tape, d_logits, d_z)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f'gradient of {k} is not finite')
    return loss, grads


def backward(w: ModelWeights, image: np.ndarray, target: Sequence[float], loss_kind: str = 'selection') -> Params:
    return loss_and_grads(w, image, np.asarray(target)[None], loss_kind)[1]


# ---------------------------------------------------------------------------
# inference

def predict_target(w: ModelWeights, image: np.ndarray) -> Localization:
    """selection head: centre of the arg-max cell, regression head otherwise"""
    return localize(forward(w, image))


def localize(pred: Prediction) -> Localization:
    if pred.heatmap is not None:
        # first maximum in row-major order, i.e. lowest (row, col)
        row, col = np.unravel_index(int(np.argmax(pred.heatmap)), pred.heatmap.shape)
        s = pred.output_stride
        probs = softmax_heatmap(pred.heatmap)
        return Localization(u=col * s + s / 2, v=row * s + s / 2,
                            confidence=float(probs[row, col]), cell=(int(row), int(col)))
    if pred.coords is not None:
        return Localization(u=float(pred.coords[0]), v=float(pred.coords[1]))
    raise ShapeMismatch('prediction has no head')


# ---------------------------------------------------------------------------
# weights file: magic line, JSON header line, little-endian float32 tensors

def save_weights(w: ModelWeights, path: Union[Path, str]):
    header = {
        'version': WEIGHTS_VERSION,
        'config': asdict(w.config),
        'training_stage': w.training_stage,
        'tensors': [[k, list(v.shape)] for k, v in w.params.items()],
    }
    body = b''.join(np.ascontiguousarray(v, dtype='<f4').tobytes() for v in w.params.values())
    write_bytes(WEIGHTS_MAGIC + orjson.dumps(header, option=orjson.OPT_SORT_KEYS) + b'\n' + body, path)


def load_weights(path: Union[Path, str]) -> ModelWeights:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise UnreadableWeights(f'{path}: {e}') from e
    if not data.startswith(WEIGHTS_MAGIC) or b'\n' not in data[len(WEIGHTS_MAGIC):]:
        raise UnreadableWeights(f'{path}: not a weights file')
    end = data.index(b'\n', len(WEIGHTS_MAGIC))
    try:
        header = orjson.loads(data[len(WEIGHTS_MAGIC):end])
        version, config, tensors = header['version'], header['config'], header['tensors']
    except (orjson.JSONDecodeError, KeyError, TypeError) as e:
        raise UnreadableWeights(f'{path}: malformed header') from e
    if version != WEIGHTS_VERSION:
        raise UnreadableWeights(f'{path}: unsupported weights version {version}')
    cfg = from_dict(NetConfig, config, 'net')

    params: Params = OrderedDict()
    pos = end + 1
    expected = param_shapes(cfg)
    for name, shape in tensors:
        shape = tuple(shape)
        if expected.get(name) != shape:
            raise ShapeMismatch(f'{path}: tensor {name} {shape} does not match config')
        size = int(np.prod(shape)) * 4
        if pos + size > len(data):
            raise ShapeMismatch(f'{path}: tensor {name} is truncated')
        params[name] = np.frombuffer(data[pos:pos + size], dtype='<f4').reshape(shape).astype(np.float32)
        pos += size
    if pos != len(data) or list(params) != list(expected):
        raise ShapeMismatch(f'{path}: tensors do not match config')
    w = ModelWeights(params, cfg, header.get('training_stage', 'init'))
    check_finite(w)
    return w


def check_finite(w: ModelWeights, names: Optional[Sequence[str]] = None):
    """every tensor (or the named ones) must be finite"""
    for k in names if names is not None else w.params:
        if not np.all(np.isfinite(w.params[k])):
            raise NonFiniteWeights(f'parameter {k} is not finite')


__all__ = [
    'NetConfig', 'ModelWeights', 'Prediction', 'Localization', 'init_weights', 'zero_weights',
    'forward', 'forward_batch', 'features', 'backward', 'loss_and_grads', 'loss_regression',
    'loss_selection', 'predict_target', 'localize', 'save_weights', 'load_weights', 'softmax_heatmap',
    'target_cell', 'check_finite',
]
