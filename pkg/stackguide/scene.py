"""
Procedural reference stacks.

A scene is textured terrain made of band-limited noise, field patches and
linear features such as roads or rivers. Every acquisition of the scene is the
same terrain with its own appearance: ``base`` perturbs gain, offset and noise
slightly, ``snow`` lifts brightness, compresses the dynamic range and inverts
the contrast of dark structure.
"""
from dataclasses import dataclass
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from stackguide.logger import logger
from stackguide.raster import GeoTransform, Point, pixel_to_world, write_pgm, write_world_file
from stackguide.rng import stream
from stackguide.utils import dump_json

MODES = ('base', 'snow')


@dataclass(frozen=True)
class SceneConfig:
    size: int = 1024
    seed: int = 0
    octaves: int = 5
    roads: int = 6
    fields: int = 40
    target: Optional[Tuple[float, float]] = None
    pixel_size: float = 10.0
    origin: Tuple[float, float] = (500000.0, 5000000.0)
    noise: float = 0.02
    snow_lift: float = 0.45

    def __post_init__(self):
        if self.size < 64:
            raise ValueError(f'size must be at least 64 and not {self.size}')
        if self.octaves < 1 or self.roads < 0 or self.fields < 0:
            raise ValueError('expect at least one octave and non-negative feature counts')
        if self.pixel_size <= 0:
            raise ValueError(f'pixel_size must be positive and not {self.pixel_size}')
        if self.target is not None and not all(0 <= c <= self.size - 1 for c in self.target):
            raise ValueError(f'target {self.target} lies outside a {self.size}px scene')

    @property
    def target_px(self) -> Point:
        if self.target is None:
            return ((self.size - 1) / 2, (self.size - 1) / 2)
        return (float(self.target[0]), float(self.target[1]))

    @property
    def geo(self) -> GeoTransform:
        return GeoTransform(origin_easting=self.origin[0], origin_northing=self.origin[1],
                            pixel_width=self.pixel_size, pixel_height=-self.pixel_size)


def _normalize(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def _noise(rng: np.random.Generator, size: int, octaves: int) -> np.ndarray:
    """sum of blurred white noise, coarse octaves weighted most"""
    out = np.zeros((size, size))
    for o in range(octaves):
        sigma = size / 16 / 2 ** o
        out += 0.6 ** o * ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode='wrap')
    return _normalize(out)


def _fields(rng: np.random.Generator, size: int, count: int) -> np.ndarray:
    out = np.zeros((size, size))
    v, u = np.mgrid[0:size, 0:size]
    for _ in range(count):
        cu, cv = rng.uniform(0, size, 2)
        hw, hh = rng.uniform(size / 64, size / 12, 2)
        angle = rng.uniform(0, math.pi)
        du, dv = u - cu, v - cv
        a = du * math.cos(angle) + dv * math.sin(angle)
        b = -du * math.sin(angle) + dv * math.cos(angle)
        inside = (np.abs(a) <= hw) & (np.abs(b) <= hh)
        out[inside] = rng.uniform(-0.3, 0.3)
    return out


def _roads(rng: np.random.Generator, size: int, count: int) -> np.ndarray:
    out = np.zeros((size, size))
    v, u = np.mgrid[0:size, 0:size]
    for _ in range(count):
        cu, cv = rng.uniform(0, size, 2)
        angle = rng.uniform(0, math.pi)
        width = rng.uniform(1.5, 4.0)
        bend = rng.uniform(-1, 1) / size
        # signed distance to a gently bending line through (cu, cv)
        along = (u - cu) * math.cos(angle) + (v - cv) * math.sin(angle)
        across = -(u - cu) * math.sin(angle) + (v - cv) * math.cos(angle) - bend * along ** 2
        line = np.exp(-0.5 * (across / width) ** 2) * rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 0.5)
        out = np.where(np.abs(line) > np.abs(out), line, out)
    return out


def render_scene(cfg: SceneConfig) -> np.ndarray:
    """deterministic terrain in [0,1], a pure function of ``cfg``"""
    rng = stream(cfg.seed, 'scene')
    terrain = _noise(rng, cfg.size, cfg.octaves)
    terrain = terrain + _fields(rng, cfg.size, cfg.fields) + _roads(rng, cfg.size, cfg.roads)
    # fine grain keeps keypoints alive at high zoom
    terrain += 0.05 * ndimage.gaussian_filter(rng.standard_normal((cfg.size, cfg.size)), 0.7)
    return _normalize(terrain)


def apply_appearance(base: np.ndarray, mode: str, rng: np.random.Generator,
                     cfg: Optional[SceneConfig] = None) -> np.ndarray:
    """one acquisition of the scene in the given appearance mode"""
    cfg = cfg or SceneConfig(size=base.shape[0])
    if mode not in MODES:
        raise ValueError(f'mode must be one of {MODES} and not {mode}')
    gain = 1.0 + rng.uniform(-0.1, 0.1)
    offset = rng.uniform(-0.05, 0.05)
    noise = cfg.noise * rng.standard_normal(base.shape)
    if mode == 'base':
        return np.clip(gain * base + offset + noise, 0.0, 1.0)

    # snow covers dark structure: dark areas turn bright, bright ones stay bright
    smooth = ndimage.gaussian_filter(base, 2.0)
    covered = np.clip((0.6 - smooth) / 0.6, 0.0, 1.0)
    inverted = covered * (1.0 - base) + (1.0 - covered) * base
    snow = cfg.snow_lift + (1.0 - cfg.snow_lift) * (0.5 * inverted + 0.25)
    return np.clip(gain * snow + offset + noise, 0.0, 1.0)


def write_stack(cfg: SceneConfig, images: Sequence[Tuple[str, str]],
                out_dir: Union[Path, str], base: Optional[np.ndarray] = None) -> Path:
    """
    Write every ``(image_id, mode)`` acquisition as 16-bit PGM plus world file
    and a stack manifest whose target is the scene target.

    Returns
    -------
    Path
        the stack manifest ``stack.json``
    """
    out_dir = Path(out_dir)
    ids = [i for i, _ in images]
    if not ids or len(set(ids)) != len(ids):
        raise ValueError(f'expect distinct image ids and not {ids}')
    if base is None:
        base = render_scene(cfg)

    entries: List[Dict] = []
    for image_id, mode in images:
        pixels = apply_appearance(base, mode, stream(cfg.seed, 'appearance', image_id), cfg)
        write_pgm(pixels, out_dir / f'{image_id}.pgm', bits=16)
        write_world_file(cfg.geo, out_dir / f'{image_id}.wld')
        entries.append({'id': image_id, 'raster': f'{image_id}.pgm', 'world_file': f'{image_id}.wld', 'mode': mode})
        logger.debug(f'scene image {image_id} ({mode}) written')

    world = pixel_to_world(cfg.geo, cfg.target_px)
    manifest = out_dir / 'stack.json'
    dump_json({'images': entries, 'target': {'world_position': list(world)}}, manifest)
    logger.opt(colors=True).info(f'stack of <c>{len(entries)}</c> images written to {manifest}')
    return manifest
