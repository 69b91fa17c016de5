"""
Synthetic camera views sampled from a reference stack.

A view transform ``H`` maps homogeneous view pixels ``(i, j, 1)`` (column,
row) to reference pixels ``(u, v, w)``. Views are composed, from the view side,
as a shift putting the target at its view position, two small out-of-plane
tilts (nadir pinhole with focal length ``focal_ratio * view_size``), an
isotropic zoom, an in-plane yaw rotation and a shift onto the target's
reference pixel. A positive yaw turns the view's x axis towards the
reference's +v (row) axis.
"""
from dataclasses import asdict, dataclass, field
import math
from pathlib import Path
import time
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from stackguide.error import InvalidCount, PointAtInfinity, RejectionOverflow, SingularTransform
from stackguide.logger import logger
from stackguide.raster import GeoImage, Point, TargetAnnotation, read_raster, write_pgm
from stackguide.rng import stream, substream_seed
from stackguide.utils import dump_json, humantime, load_json, pool_map, wrap_tqdm

SPLITS = ('train', 'test')
MAX_REJECTIONS = 1000
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SamplerConfig:
    yaw_range: float = 2 * math.pi
    zoom_min: float = 0.5
    zoom_max: float = 8.0
    tilt_max: float = math.radians(10)
    jitter_translation: float = 96.0
    view_size: int = 256
    target_in_view_margin: float = 16.0
    focal_ratio: float = 1.0
    output_stride: int = 8

    def __post_init__(self):
        if not 0 < self.zoom_min <= self.zoom_max:
            raise ValueError(f'expect 0 < zoom_min <= zoom_max and not {self.zoom_min}, {self.zoom_max}')
        if not 0 <= self.tilt_max < math.pi / 4:
            raise ValueError(f'tilt_max must be in [0, pi/4) and not {self.tilt_max}')
        if self.yaw_range < 0 or self.jitter_translation < 0 or self.target_in_view_margin < 0:
            raise ValueError('yaw_range, jitter_translation and target_in_view_margin must not be negative')
        if self.view_size <= 0 or self.view_size % self.output_stride:
            raise ValueError(f'view_size {self.view_size} must be a multiple of {self.output_stride}')
        if 2 * self.target_in_view_margin >= self.view_size:
            raise ValueError(f'margin {self.target_in_view_margin} leaves no room in a {self.view_size}px view')

    @property
    def center(self) -> Point:
        return (self.view_size / 2, self.view_size / 2)


@dataclass(frozen=True, eq=False)
class ViewTransform:
    H: np.ndarray
    source_image_id: str
    seed: int = 0
    view_size: int = 256

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.H))

    def __repr__(self):
        return f'ViewTransform({self.source_image_id!r}, seed={self.seed}, H={self.H.tolist()})'


@dataclass(eq=False)
class Sample:
    target_px: Point
    source_image_id: str
    transform: ViewTransform
    split: str
    index: int
    image: Optional[np.ndarray] = None
    file: Optional[str] = None
    valid_fraction: float = 1.0


@dataclass(eq=False)
class DatasetManifest:
    samples: List[Sample]
    global_seed: int
    stack: str = ''
    view_size: int = 256
    image_dir: Optional[Path] = None
    sampler: Dict = field(default_factory=dict)

    @property
    def r_train(self) -> int:
        return sum(1 for s in self.samples if s.split == 'train')

    @property
    def r_test(self) -> int:
        return sum(1 for s in self.samples if s.split == 'test')

    def split(self, name: str) -> List[Sample]:
        return [s for s in self.samples if s.split == name]


def _translation(t: Point) -> np.ndarray:
    return np.array([[1.0, 0.0, t[0]], [0.0, 1.0, t[1]], [0.0, 0.0, 1.0]])


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _tilt(tilt_x: float, tilt_y: float, focal: float) -> np.ndarray:
    """rotation about the in-plane axes seen by a nadir pinhole, keeping the origin fixed"""
    if tilt_x == 0 and tilt_y == 0:
        return np.eye(3)
    cx, sx = math.cos(tilt_x), math.sin(tilt_x)
    cy, sy = math.cos(tilt_y), math.sin(tilt_y)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    k = np.diag([focal, focal, 1.0])
    p = k @ rx @ ry @ np.linalg.inv(k)
    q = p @ np.array([0.0, 0.0, 1.0])
    return _translation((-q[0] / q[2], -q[1] / q[2])) @ p


def normalize_homography(H: np.ndarray) -> np.ndarray:
    if abs(H[2, 2]) > 1e-12:
        return H / H[2, 2]
    return H / np.linalg.norm(H)


def compose_view(p_ref: Point, view_pos: Point, yaw: float = 0.0, zoom: float = 1.0,
                 tilt_x: float = 0.0, tilt_y: float = 0.0, view_size: int = 256,
                 focal: Optional[float] = None) -> np.ndarray:
    """view -> reference homography placing reference pixel ``p_ref`` at ``view_pos``"""
    focal = float(view_size) if focal is None else focal
    H = (_translation(p_ref)
         @ _rotation(yaw)
         @ np.diag([zoom, zoom, 1.0])
         @ _tilt(tilt_x, tilt_y, focal)
         @ _translation((-view_pos[0], -view_pos[1])))
    return normalize_homography(H)


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    q = np.c_[pts, np.ones(len(pts))] @ H.T
    return q[:, :2] / q[:, 2:3]


def project_target(t: Union[ViewTransform, np.ndarray], p_ref: Point) -> Point:
    """reference pixel -> view pixel"""
    H = t.H if isinstance(t, ViewTransform) else t
    try:
        q = np.linalg.solve(H, np.array([p_ref[0], p_ref[1], 1.0]))
    except np.linalg.LinAlgError as e:
        raise SingularTransform(f'view transform not invertible: {H.tolist()}') from e
    if abs(q[2]) < 1e-12:
        raise PointAtInfinity(f'{p_ref} projects to infinity')
    return (float(q[0] / q[2]), float(q[1] / q[2]))


def _in_margin(p: Point, view_size: int, margin: float) -> bool:
    return margin <= p[0] <= view_size - margin and margin <= p[1] <= view_size - margin


def sample_view(rng: np.random.Generator, cfg: SamplerConfig, stack: Sequence[GeoImage],
                target: TargetAnnotation, seed: int = 0) -> ViewTransform:
    """draw a random view of the target from one image of the stack"""
    if not stack:
        raise InvalidCount('stack is empty')

    log_zoom = (math.log(cfg.zoom_min), math.log(cfg.zoom_max))
    half_yaw = cfg.yaw_range / 2
    focal = cfg.focal_ratio * cfg.view_size
    center = cfg.center

    for _ in range(MAX_REJECTIONS):
        img = stack[int(rng.integers(len(stack)))]
        p_ref = target.pixel(img.image_id)
        yaw = rng.uniform(-half_yaw, half_yaw)
        zoom = math.exp(rng.uniform(*log_zoom)) if cfg.zoom_min != cfg.zoom_max else cfg.zoom_min
        tilt_x, tilt_y = rng.uniform(-cfg.tilt_max, cfg.tilt_max, size=2)
        jitter = rng.uniform(-cfg.jitter_translation, cfg.jitter_translation, size=2)
        view_pos = (center[0] + jitter[0], center[1] + jitter[1])

        H = compose_view(p_ref, view_pos, yaw, zoom, float(tilt_x), float(tilt_y), cfg.view_size, focal)
        if abs(np.linalg.det(H)) <= 1e-12:
            continue
        try:
            p_view = project_target(H, p_ref)
        except (PointAtInfinity, SingularTransform):
            continue
        if _in_margin(p_view, cfg.view_size, cfg.target_in_view_margin):
            return ViewTransform(H=H, source_image_id=img.image_id, seed=seed, view_size=cfg.view_size)

    raise RejectionOverflow(f'no admissible view after {MAX_REJECTIONS} draws, check sampler config')


def warp_with_mask(src: Union[GeoImage, np.ndarray], t: ViewTransform) -> Tuple[np.ndarray, np.ndarray]:
    """bilinear view of ``src``; samples outside the source are 0 and False in the mask"""
    pixels = src.pixels if isinstance(src, GeoImage) else src
    H = t.H
    if not abs(np.linalg.det(H)) > 1e-12:
        raise SingularTransform(f'view transform not invertible: {H.tolist()}')

    size = t.view_size
    jj, ii = np.mgrid[0:size, 0:size].astype(np.float64)
    x = H[0, 0] * ii + H[0, 1] * jj + H[0, 2]
    y = H[1, 0] * ii + H[1, 1] * jj + H[1, 2]
    w = H[2, 0] * ii + H[2, 1] * jj + H[2, 2]

    ahead = w > 1e-12
    w = np.where(ahead, w, 1.0)
    u, v = x / w, y / w
    height, width = pixels.shape
    mask = ahead & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)

    view = ndimage.map_coordinates(pixels, [np.where(mask, v, 0.0), np.where(mask, u, 0.0)],
                                   order=1, mode='nearest')
    view[~mask] = 0.0
    return view, mask


def warp(src: Union[GeoImage, np.ndarray], t: ViewTransform) -> np.ndarray:
    return warp_with_mask(src, t)[0]


def make_sample(stack: Dict[str, GeoImage], target: TargetAnnotation, t: ViewTransform,
                split: str, index: int, image_dir: Optional[Path] = None) -> Sample:
    """render the view of ``t`` and, when ``image_dir`` is given, write it as ``{split}_{index}.pgm``"""
    src = stack[t.source_image_id]
    image, mask = warp_with_mask(src, t)
    target_px = project_target(t, target.pixel(t.source_image_id))
    sample = Sample(target_px=target_px, source_image_id=t.source_image_id, transform=t, split=split,
                    index=index, image=image, valid_fraction=float(mask.mean()))
    if image_dir is not None:
        sample.file = f'{split}_{index}.pgm'
        write_pgm(image, image_dir / sample.file)
        sample.image = None
    return sample


def generate_dataset(stack: Sequence[GeoImage], target: TargetAnnotation, cfg: SamplerConfig,
                     r_train: int, r_test: int, global_seed: int,
                     out_dir: Optional[Union[Path, str]] = None,
                     split_images: Optional[Dict[str, Iterable[str]]] = None,
                     threads: int = 1, stack_ref: str = '', quiet: bool = False) -> DatasetManifest:
    """
    Sample ``r_train + r_test`` views. Sample ``index`` of ``split`` only
    depends on ``(global_seed, split, index)``; ``split_images`` optionally
    restricts the source images per split.
    """
    if r_train <= 0 or r_test <= 0:
        raise InvalidCount(f'counts must be positive and not r_train={r_train}, r_test={r_test}')

    by_id = dict((img.image_id, img) for img in stack)
    sources = dict()
    for split in SPLITS:
        ids = list((split_images or {}).get(split, None) or by_id)
        unknown = [i for i in ids if i not in by_id]
        if unknown:
            raise InvalidCount(f'{split}: unknown stack images {unknown}')
        sources[split] = [by_id[i] for i in ids]

    image_dir = Path(out_dir) if out_dir is not None else None

    def _generate(job: Tuple[str, int]) -> Sample:
        split, index = job
        seed = substream_seed(global_seed, split, index)
        t = sample_view(stream(global_seed, split, index), cfg, sources[split], target, seed=seed)
        return make_sample(by_id, target, t, split, index, image_dir)

    jobs = [('train', i) for i in range(r_train)] + [('test', i) for i in range(r_test)]
    logger.info(f'generate <c>{r_train}</c> train and <c>{r_test}</c> test views')
    start = time.time()
    samples = list(wrap_tqdm('generate', pool_map(_generate, jobs, threads), total=len(jobs), quiet=quiet))
    logger.info(f'generate took {humantime(time.time() - start)}', duration=time.time() - start)

    train_h = set(s.transform.H.tobytes() for s in samples if s.split == 'train')
    if any(s.transform.H.tobytes() in train_h for s in samples if s.split == 'test'):
        raise InvalidCount('train and test splits share a view transform')

    manifest = DatasetManifest(samples=samples, global_seed=global_seed, stack=stack_ref,
                               view_size=cfg.view_size, image_dir=image_dir, sampler=asdict(cfg))
    if image_dir is not None:
        write_manifest(manifest, image_dir / 'manifest.json')
    return manifest


def _format_h(H: np.ndarray) -> List[str]:
    return [f'{v:.17g}' for v in H.reshape(-1)]


def manifest_dict(manifest: DatasetManifest) -> Dict:
    return {
        'version': MANIFEST_VERSION,
        'global_seed': manifest.global_seed,
        'stack': manifest.stack,
        'view_size': manifest.view_size,
        'sampler': manifest.sampler,
        'r_train': manifest.r_train,
        'r_test': manifest.r_test,
        'samples': [{
            'index': s.index,
            'split': s.split,
            'source_image_id': s.source_image_id,
            'H': _format_h(s.transform.H),
            'target_px': [s.target_px[0], s.target_px[1]],
            'seed': s.transform.seed,
            'file': s.file,
            'valid_fraction': s.valid_fraction,
        } for s in manifest.samples],
    }


def write_manifest(manifest: DatasetManifest, path: Union[Path, str]):
    dump_json(manifest_dict(manifest), path)


def load_manifest(path: Union[Path, str]) -> DatasetManifest:
    path = Path(path)
    data = load_json(path)
    view_size = int(data['view_size'])
    samples = []
    for rec in data['samples']:
        H = np.array([float(v) for v in rec['H']]).reshape(3, 3)
        t = ViewTransform(H=H, source_image_id=rec['source_image_id'], seed=int(rec['seed']), view_size=view_size)
        samples.append(Sample(target_px=(float(rec['target_px'][0]), float(rec['target_px'][1])),
                              source_image_id=rec['source_image_id'], transform=t, split=rec['split'],
                              index=int(rec['index']), file=rec.get('file'),
                              valid_fraction=float(rec.get('valid_fraction', 1.0))))
    return DatasetManifest(samples=samples, global_seed=int(data['global_seed']), stack=data.get('stack', ''),
                           view_size=view_size, image_dir=path.absolute().parent, sampler=data.get('sampler', {}))


def load_sample_image(manifest: DatasetManifest, sample: Sample) -> np.ndarray:
    if sample.image is not None:
        return sample.image
    if sample.file is None or manifest.image_dir is None:
        raise InvalidCount(f'{sample.split}_{sample.index}: no image stored')
    return read_raster(manifest.image_dir / sample.file)
