"""
Scale-invariant keypoints and gradient-histogram descriptors.

Images are 2-D float arrays in [0, 1], indexed ``[row, col]``; keypoint
positions are ``(u, v) = (column, row)`` in input pixels and orientations are
gradient directions ``atan2(dv, du)`` in ``[0, 2*pi)``.
"""
from dataclasses import dataclass, field
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from stackguide.error import EmptyInput, ImageTooSmall, SupportOutOfBounds
from stackguide.raster import Point
from stackguide.utils import writelines

MIN_SIDE = 32
MIN_OCTAVE_SIDE = 16
ORIENTATION_BINS = 36
DESCRIPTOR_WIDTH = 4
DESCRIPTOR_BINS = 8
TWO_PI = 2 * math.pi


@dataclass(frozen=True)
class Keypoint:
    position: Point
    scale: float
    orientation: float
    response: float
    octave: int = 0
    layer: float = 1.0


@dataclass
class MatchSet:
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)
    detected_query: int = 0
    detected_ref: int = 0

    @property
    def matched(self) -> int:
        return len(self.pairs)

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=int)

    @property
    def ref_indices(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=int)


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ImageTooSmall(f'expect a 2-D image and not {img.shape}')
    if min(img.shape) < MIN_SIDE:
        raise ImageTooSmall(f'{img.shape[1]}x{img.shape[0]} image, min side is {MIN_SIDE}px')
    return img


class ScaleSpace:
    """Gaussian and difference-of-Gaussian pyramids of one image"""

    def __init__(self, img: np.ndarray, sigma: float = 1.6, scales: int = 3, input_blur: float = 0.5):
        img = check_image(img)
        self.sigma = sigma
        self.scales = scales
        self.shape = img.shape

        sigmas = [sigma * 2 ** (s / scales) for s in range(scales + 3)]
        steps = [math.sqrt(b * b - a * a) for a, b in zip(sigmas, sigmas[1:])]
        base = ndimage.gaussian_filter(img, math.sqrt(max(sigma ** 2 - input_blur ** 2, 0.01)))

        self.gaussians: List[np.ndarray] = []
        self.dogs: List[np.ndarray] = []
        while min(base.shape) >= MIN_OCTAVE_SIDE:
            layers = [base]
            for s in steps:
                layers.append(ndimage.gaussian_filter(layers[-1], s))
            g = np.stack(layers)
            self.gaussians.append(g)
            self.dogs.append(g[1:] - g[:-1])
            # the layer at twice the base blur seeds the next octave
            base = g[scales][::2, ::2]
        self._gradients: Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]] = {}

    @property
    def octaves(self) -> int:
        return len(self.gaussians)

    def layer_sigma(self, layer: float) -> float:
        """blur of a layer in octave pixels"""
        return self.sigma * 2 ** (layer / self.scales)

    def gradients(self, octave: int, layer: int) -> Tuple[np.ndarray, np.ndarray]:
        """(magnitude, orientation) of central differences, zero on the border"""
        key = (octave, layer)
        if key not in self._gradients:
            g = self.gaussians[octave][layer]
            du = np.zeros_like(g)
            dv = np.zeros_like(g)
            du[:, 1:-1] = g[:, 2:] - g[:, :-2]
            dv[1:-1] = g[2:] - g[:-2]
            self._gradients[key] = (np.hypot(du, dv), np.arctan2(dv, du))
        return self._gradients[key]


def _space(img: Union[np.ndarray, ScaleSpace]) -> ScaleSpace:
    return img if isinstance(img, ScaleSpace) else ScaleSpace(img)


def _derivatives(cube: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # cube axes: layer, row, col
    c = cube[1, 1, 1]
    du = 0.5 * (cube[1, 1, 2] - cube[1, 1, 0])
    dv = 0.5 * (cube[1, 2, 1] - cube[1, 0, 1])
    ds = 0.5 * (cube[2, 1, 1] - cube[0, 1, 1])
    duu = cube[1, 1, 2] + cube[1, 1, 0] - 2 * c
    dvv = cube[1, 2, 1] + cube[1, 0, 1] - 2 * c
    dss = cube[2, 1, 1] + cube[0, 1, 1] - 2 * c
    duv = 0.25 * (cube[1, 2, 2] - cube[1, 2, 0] - cube[1, 0, 2] + cube[1, 0, 0])
    dus = 0.25 * (cube[2, 1, 2] - cube[2, 1, 0] - cube[0, 1, 2] + cube[0, 1, 0])
    dvs = 0.25 * (cube[2, 2, 1] - cube[2, 0, 1] - cube[0, 2, 1] + cube[0, 0, 1])
    grad = np.array([du, dv, ds])
    hess = np.array([[duu, duv, dus], [duv, dvv, dvs], [dus, dvs, dss]])
    return grad, hess


def _refine(space: ScaleSpace, octave: int, layer: int, row: int, col: int,
            contrast: float, edge: float, border: int, iterations: int = 5) -> Optional[Keypoint]:
    """quadratic sub-pixel fit, contrast and edge rejection"""
    dog = space.dogs[octave]
    n, h, w = dog.shape
    for _ in range(iterations):
        cube = dog[layer - 1:layer + 2, row - 1:row + 2, col - 1:col + 2]
        grad, hess = _derivatives(cube)
        try:
            offset = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) <= 0.5):
            break
        col += int(round(offset[0]))
        row += int(round(offset[1]))
        layer += int(round(offset[2]))
        if not (border <= row < h - border and border <= col < w - border and 1 <= layer <= n - 2):
            return None
    else:
        return None

    value = cube[1, 1, 1] + 0.5 * float(grad @ offset)
    if abs(value) * space.scales < contrast:
        return None
    tr = hess[0, 0] + hess[1, 1]
    det = hess[0, 0] * hess[1, 1] - hess[0, 1] ** 2
    if det <= 0 or edge * tr * tr >= (edge + 1) ** 2 * det:
        return None

    f = 2 ** octave
    s = layer + float(offset[2])
    return Keypoint(position=((col + float(offset[0])) * f, (row + float(offset[1])) * f),
                    scale=space.layer_sigma(s) * f, orientation=0.0, response=abs(float(value)),
                    octave=octave, layer=s)


def _orientations(space: ScaleSpace, kp: Keypoint, peak_ratio: float = 0.8) -> List[Keypoint]:
    octave = kp.octave
    layer = int(np.clip(round(kp.layer), 0, space.scales + 2))
    mag, ori = space.gradients(octave, layer)
    h, w = mag.shape
    f = 2 ** octave
    sigma = 1.5 * kp.scale / f
    radius = int(round(3 * sigma))
    ci, ri = int(round(kp.position[0] / f)), int(round(kp.position[1] / f))

    r0, r1 = max(ri - radius, 1), min(ri + radius, h - 2)
    c0, c1 = max(ci - radius, 1), min(ci + radius, w - 2)
    if r0 > r1 or c0 > c1:
        return []
    rows, cols = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    weight = np.exp(-((rows - ri) ** 2 + (cols - ci) ** 2) / (2 * sigma * sigma))
    bins = np.round(ori[r0:r1 + 1, c0:c1 + 1] * ORIENTATION_BINS / TWO_PI).astype(int) % ORIENTATION_BINS
    hist = np.bincount(bins.ravel(), weights=(mag[r0:r1 + 1, c0:c1 + 1] * weight).ravel(),
                       minlength=ORIENTATION_BINS)
    smooth = (6 * hist + 4 * (np.roll(hist, 1) + np.roll(hist, -1)) + np.roll(hist, 2) + np.roll(hist, -2)) / 16

    top = smooth.max()
    if not top > 0:
        return []
    left, right = np.roll(smooth, 1), np.roll(smooth, -1)
    keypoints = []
    for i in np.nonzero((smooth >= left) & (smooth >= right) & (smooth >= peak_ratio * top))[0]:
        denom = left[i] + right[i] - 2 * smooth[i]
        shift = 0.5 * (left[i] - right[i]) / denom if denom != 0 else 0.0
        theta = ((i + shift) % ORIENTATION_BINS) * TWO_PI / ORIENTATION_BINS
        if theta >= TWO_PI:
            theta = 0.0
        keypoints.append(Keypoint(kp.position, kp.scale, float(theta), kp.response, kp.octave, kp.layer))
    return keypoints


def detect_keypoints(img: Union[np.ndarray, ScaleSpace], contrast: float = 0.03, edge: float = 10.0,
                     border: int = 5) -> List[Keypoint]:
    """
    Difference-of-Gaussian extrema with sub-pixel refinement.

    Parameters
    ----------
    img : np.ndarray or ScaleSpace
        image in [0, 1], min side 32px
    contrast : float
        minimum refined response, scaled by the number of scales per octave
    edge : float
        maximum ratio of principal curvatures

    Returns
    -------
    List[Keypoint]
        one keypoint per dominant orientation
    """
    space = _space(img)
    threshold = 0.5 * contrast / space.scales
    keypoints: List[Keypoint] = []
    for octave, dog in enumerate(space.dogs):
        hi = ndimage.maximum_filter(dog, size=3, mode='nearest')
        lo = ndimage.minimum_filter(dog, size=3, mode='nearest')
        candidates = ((dog == hi) & (dog > threshold)) | ((dog == lo) & (dog < -threshold))
        candidates[0] = candidates[-1] = False
        candidates[:, :border] = candidates[:, dog.shape[1] - border:] = False
        candidates[:, :, :border] = candidates[:, :, dog.shape[2] - border:] = False
        for layer, row, col in zip(*np.nonzero(candidates)):
            kp = _refine(space, octave, int(layer), int(row), int(col), contrast, edge, border)
            if kp is not None:
                keypoints.extend(_orientations(space, kp))
    return keypoints


def clip_descriptor(hist: np.ndarray, clip: float = 0.2) -> np.ndarray:
    """unit-normalised histogram clipped at ``clip``"""
    v = np.asarray(hist, dtype=np.float64).ravel()
    norm = np.linalg.norm(v)
    if norm == 0:
        v = np.ones_like(v)
        norm = np.linalg.norm(v)
    return np.minimum(v / norm, clip)


def normalize_descriptor(hist: np.ndarray, clip: float = 0.2) -> np.ndarray:
    v = clip_descriptor(hist, clip)
    return v / np.linalg.norm(v)


def describe(img: Union[np.ndarray, ScaleSpace], kp: Keypoint) -> np.ndarray:
    """128-d descriptor: 4x4 spatial cells of 8 orientation bins, rotated to ``kp.orientation``"""
    space = _space(img)
    if kp.octave >= space.octaves:
        raise SupportOutOfBounds(f'octave {kp.octave} does not exist')
    layer = int(np.clip(round(kp.layer), 0, space.scales + 2))
    mag, ori = space.gradients(kp.octave, layer)
    h, w = mag.shape
    f = 2 ** kp.octave
    cell = 3 * kp.scale / f
    radius = int(round(cell * math.sqrt(2) * (DESCRIPTOR_WIDTH + 1) * 0.5))
    ci, ri = int(round(kp.position[0] / f)), int(round(kp.position[1] / f))
    if ci - radius < 1 or ri - radius < 1 or ci + radius > w - 2 or ri + radius > h - 2:
        raise SupportOutOfBounds(f'support of keypoint at {kp.position} leaves the image')

    dv, du = np.mgrid[-radius:radius + 1, -radius:radius + 1].astype(np.float64)
    cos, sin = math.cos(kp.orientation), math.sin(kp.orientation)
    u_rot = (du * cos + dv * sin) / cell
    v_rot = (-du * sin + dv * cos) / cell
    row_bin = v_rot + 0.5 * DESCRIPTOR_WIDTH - 0.5
    col_bin = u_rot + 0.5 * DESCRIPTOR_WIDTH - 0.5
    inside = (row_bin > -1) & (row_bin < DESCRIPTOR_WIDTH) & (col_bin > -1) & (col_bin < DESCRIPTOR_WIDTH)

    weight = np.exp(-(u_rot ** 2 + v_rot ** 2) / (2 * (0.5 * DESCRIPTOR_WIDTH) ** 2))
    m = (mag[ri - radius:ri + radius + 1, ci - radius:ci + radius + 1] * weight)[inside]
    o = ((ori[ri - radius:ri + radius + 1, ci - radius:ci + radius + 1] - kp.orientation) % TWO_PI)[inside]
    rb, cb = row_bin[inside], col_bin[inside]
    ob = o * DESCRIPTOR_BINS / TWO_PI

    r0, c0, o0 = np.floor(rb).astype(int), np.floor(cb).astype(int), np.floor(ob).astype(int)
    fr, fc, fo = rb - r0, cb - c0, ob - o0
    # trilinear split over the 8 neighbouring bins; spatial bins padded by one on each side
    hist = np.zeros((DESCRIPTOR_WIDTH + 2, DESCRIPTOR_WIDTH + 2, DESCRIPTOR_BINS))
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            for do, wo in ((0, 1 - fo), (1, fo)):
                np.add.at(hist, (r0 + 1 + dr, c0 + 1 + dc, (o0 + do) % DESCRIPTOR_BINS), m * wr * wc * wo)
    return normalize_descriptor(hist[1:-1, 1:-1])


def sift(img: Union[np.ndarray, ScaleSpace], **kwargs) -> Tuple[List[Keypoint], np.ndarray]:
    """detect and describe, skipping keypoints whose support leaves the image"""
    space = _space(img)
    keypoints, descriptors = [], []
    for kp in detect_keypoints(space, **kwargs):
        try:
            descriptors.append(describe(space, kp))
        except SupportOutOfBounds:
            continue
        keypoints.append(kp)
    return keypoints, np.array(descriptors).reshape(-1, DESCRIPTOR_WIDTH ** 2 * DESCRIPTOR_BINS)


def match_ratio(query: Union[np.ndarray, Sequence[np.ndarray]], ref: Union[np.ndarray, Sequence[np.ndarray]],
                ratio: float = 0.75, cross_check: bool = False) -> MatchSet:
    """nearest neighbour matches passing the ratio test ``d1 < ratio * d2``"""
    if not 0 < ratio <= 1:
        raise ValueError(f'ratio must be in (0, 1] and not {ratio}')
    q = np.asarray(query, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if q.size == 0 or r.size == 0:
        raise EmptyInput(f'cannot match {len(q)} against {len(r)} descriptors')
    q, r = q.reshape(len(q), -1), r.reshape(len(r), -1)

    d = cdist(q, r)
    nearest = np.argmin(d, axis=1)
    d1 = d[np.arange(len(q)), nearest]
    if len(r) > 1:
        d2 = np.partition(d, 1, axis=1)[:, 1]
    else:
        d2 = np.full(len(q), np.inf)
    back = np.argmin(d, axis=0) if cross_check else None

    pairs = []
    for i, j in enumerate(nearest):
        if not d1[i] < ratio * d2[i]:
            continue
        if back is not None and back[j] != i:
            continue
        pairs.append((i, int(j), float(d1[i] / d2[i]) if math.isfinite(d2[i]) else 0.0))
    return MatchSet(pairs=pairs, detected_query=len(q), detected_ref=len(r))


def write_keypoints(path: Union[Path, str], keypoints: Sequence[Keypoint]):
    """tab separated u, v, scale, orientation, response"""
    rows = [f'{kp.position[0]!r}\t{kp.position[1]!r}\t{kp.scale!r}\t{kp.orientation!r}\t{kp.response!r}'
            for kp in keypoints]
    writelines(['u\tv\tscale\torientation\tresponse'] + rows, path)
