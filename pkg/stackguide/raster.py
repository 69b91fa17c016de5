"""
Georeferenced single-band rasters.

Pixel coordinates are ``(u, v) = (column, row)`` with integer values at pixel
centres. World files hold the classic six affine parameters, one per line, in
the order ``pixel_width, col_rotation, row_rotation, pixel_height, origin_easting,
origin_northing``, so that::

    easting  = origin_easting  + pixel_width  * u + row_rotation * v
    northing = origin_northing + col_rotation * u + pixel_height * v
"""
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from stackguide.error import (
    AnnotationError, DegenerateRange, MalformedWorldFile, SingularGeoTransform,
    UnreadableRaster, UnsupportedBitDepth
)
from stackguide.logger import logger
from stackguide.utils import expand_path, load_json, write_bytes, writelines

MIN_STACK_SIDE = 64

Point = Tuple[float, float]


@dataclass(frozen=True)
class GeoTransform:
    origin_easting: float = 0.0
    origin_northing: float = 0.0
    pixel_width: float = 1.0
    pixel_height: float = 1.0
    row_rotation: float = 0.0
    col_rotation: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        """3x3 pixel -> world matrix"""
        return np.array([
            [self.pixel_width, self.row_rotation, self.origin_easting],
            [self.col_rotation, self.pixel_height, self.origin_northing],
            [0.0, 0.0, 1.0]])

    @property
    def determinant(self) -> float:
        return self.pixel_width * self.pixel_height - self.row_rotation * self.col_rotation

    @property
    def invertible(self) -> bool:
        scale = max(abs(self.pixel_width), abs(self.pixel_height), abs(self.row_rotation), abs(self.col_rotation))
        return scale > 0 and abs(self.determinant) > 1e-12 * scale * scale

    @classmethod
    def from_world_file(cls, values: Sequence[float]) -> 'GeoTransform':
        a, d, b, e, c, f = values
        return cls(origin_easting=c, origin_northing=f, pixel_width=a, pixel_height=e,
                   row_rotation=b, col_rotation=d)

    def world_file(self) -> List[float]:
        return [self.pixel_width, self.col_rotation, self.row_rotation, self.pixel_height,
                self.origin_easting, self.origin_northing]


@dataclass(frozen=True, eq=False)
class GeoImage:
    pixels: np.ndarray
    geo: GeoTransform
    image_id: str
    mode_tag: str = ''
    degenerate_range: bool = False

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    def __repr__(self):
        return f'GeoImage({self.image_id!r}, {self.width}x{self.height}, mode={self.mode_tag!r})'


@dataclass(frozen=True)
class TargetAnnotation:
    world_position: Point
    per_image_pixel: Dict[str, Point] = field(default_factory=dict)

    def pixel(self, image_id: str) -> Point:
        try:
            return self.per_image_pixel[image_id]
        except KeyError:
            raise AnnotationError(f'target not annotated in image "{image_id}"') from None


def pixel_to_world(geo: GeoTransform, pixel: Point) -> Point:
    u, v = pixel
    return (geo.origin_easting + geo.pixel_width * u + geo.row_rotation * v,
            geo.origin_northing + geo.col_rotation * u + geo.pixel_height * v)


def world_to_pixel(geo: GeoTransform, world: Point) -> Point:
    if not geo.invertible:
        raise SingularGeoTransform(f'geotransform not invertible: {geo}')
    de = world[0] - geo.origin_easting
    dn = world[1] - geo.origin_northing
    det = geo.determinant
    u = (geo.pixel_height * de - geo.row_rotation * dn) / det
    v = (geo.pixel_width * dn - geo.col_rotation * de) / det
    return (u, v)


def read_world_file(path: Union[Path, str]) -> GeoTransform:
    path = expand_path(path)
    try:
        with open(path, 'r', encoding='ascii') as f:
            tokens = f.read().split()
    except (OSError, UnicodeDecodeError) as e:
        raise MalformedWorldFile(f'{path}: cannot be read ({e})') from e
    if len(tokens) != 6:
        raise MalformedWorldFile(f'{path}: expect 6 values and not {len(tokens)}')
    try:
        values = [float(t) for t in tokens]
    except ValueError as e:
        raise MalformedWorldFile(f'{path}: {e}') from e
    if not all(np.isfinite(values)):
        raise MalformedWorldFile(f'{path}: values must be finite')
    geo = GeoTransform.from_world_file(values)
    if geo.pixel_width == 0 or geo.pixel_height == 0 or not geo.invertible:
        raise MalformedWorldFile(f'{path}: degenerate affine {values}')
    return geo


def write_world_file(geo: GeoTransform, path: Union[Path, str]):
    writelines((repr(float(v)) for v in geo.world_file()), path)


def _open_raster(path: Path, band: int = 0, formats: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, int]:
    # Pillow rescales PGM data with any maxval to the full 8 or 16 bit range
    try:
        with Image.open(path, formats=formats) as im:
            mode = im.mode
            arr = np.asarray(im)
    except ValueError as e:
        if 'maxval' in str(e):
            raise UnsupportedBitDepth(f'{path}: {e}') from e
        raise UnreadableRaster(f'{path}: {e}') from e
    except OSError as e:
        raise UnreadableRaster(f'{path}: {e}') from e

    if arr.ndim == 3:
        if not 0 <= band < arr.shape[2]:
            raise UnreadableRaster(f'{path}: band {band} not in {arr.shape[2]} bands')
        arr = arr[:, :, band]
    if mode in ('L', 'P', 'RGB', 'RGBA', 'LA'):
        bits = 8
    elif mode.startswith('I;16') or mode == 'I':
        bits = 16
    else:
        raise UnsupportedBitDepth(f'{path}: image mode {mode}')
    if arr.min(initial=0) < 0 or arr.max(initial=0) > (1 << bits) - 1:
        raise UnsupportedBitDepth(f'{path}: values exceed {bits} bit')
    return arr.astype(np.uint8 if bits == 8 else np.uint16), bits


def read_pgm(path: Union[Path, str]) -> Tuple[np.ndarray, int]:
    """read a PGM, returns integer pixels at full 8 or 16 bit scale and the bit depth"""
    return _open_raster(expand_path(path), formats=['PPM'])


def write_pgm(pixels: np.ndarray, path: Union[Path, str], bits: int = 16):
    """write values in [0,1] (float) or raw integers as binary PGM"""
    if bits not in (8, 16):
        raise UnsupportedBitDepth(f'{bits} bit PGM not supported')
    maxval = (1 << bits) - 1
    if np.issubdtype(pixels.dtype, np.floating):
        raw = np.round(np.clip(pixels, 0.0, 1.0) * maxval)
    else:
        raw = np.clip(pixels, 0, maxval)
    # mode I is saved as big-endian P5 with maxval 65535
    im = Image.fromarray(raw.astype(np.uint8) if bits == 8 else raw.astype(np.int32))
    buffer = io.BytesIO()
    im.save(buffer, format='PPM')
    write_bytes(buffer.getvalue(), path)


def read_raster(path: Union[Path, str], band: int = 0) -> np.ndarray:
    """read PGM or PNG, returns luminance scaled to [0,1] by bit depth"""
    raw, bits = _open_raster(expand_path(path), band=band)
    return raw.astype(np.float64) / ((1 << bits) - 1)


def load_geo_image(raster_path: Union[Path, str], world_file_path: Union[Path, str], mode_tag: str = '',
                   image_id: Optional[str] = None, band: int = 0) -> GeoImage:
    pixels = read_raster(raster_path, band=band)
    geo = read_world_file(world_file_path)
    return GeoImage(pixels=pixels, geo=geo, image_id=image_id or Path(raster_path).stem, mode_tag=mode_tag)


def preprocess_radiometry(img: GeoImage, clip_percentile: float = 0.002, gamma: float = 0.5,
                          strict: bool = False) -> GeoImage:
    """clip min-max at the given quantiles, then gamma-correct"""
    if not 0 <= clip_percentile < 0.5:
        raise ValueError(f'clip_percentile must be in [0, 0.5) and not {clip_percentile}')
    if not gamma > 0:
        raise ValueError(f'gamma must be positive and not {gamma}')

    lo, hi = np.quantile(img.pixels, [clip_percentile, 1.0 - clip_percentile], method='linear')
    if not hi > lo:
        if strict:
            raise DegenerateRange(f'{img.image_id}: quantiles are equal ({lo})')
        logger.warning(f'{img.image_id}: degenerate radiometric range ({lo}), image set to zero')
        return replace(img, pixels=np.zeros_like(img.pixels, dtype=np.float64), degenerate_range=True)

    scaled = np.clip((img.pixels - lo) / (hi - lo), 0.0, 1.0)
    return replace(img, pixels=np.power(scaled, gamma), degenerate_range=False)


def annotate(stack: Sequence[GeoImage], world_position: Point, check_bounds: bool = True) -> TargetAnnotation:
    per_image = dict()
    for img in stack:
        u, v = world_to_pixel(img.geo, world_position)
        if check_bounds and not (0 <= u <= img.width - 1 and 0 <= v <= img.height - 1):
            raise AnnotationError(f'target {world_position} lies outside image "{img.image_id}" at ({u:.1f}, {v:.1f})')
        per_image[img.image_id] = (u, v)
    return TargetAnnotation(world_position=tuple(world_position), per_image_pixel=per_image)


@dataclass(frozen=True)
class StackEntry:
    image_id: str
    raster: Path
    world_file: Path
    mode_tag: str = ''


def read_stack_manifest(path: Union[Path, str]) -> Tuple[List[StackEntry], Dict]:
    path = expand_path(path)
    try:
        manifest = load_json(path)
    except (OSError, ValueError) as e:
        raise UnreadableRaster(f'stack manifest {path}: {e}') from e
    base_dir = path.absolute().parent

    if not isinstance(manifest, dict) or 'target' not in manifest or 'images' not in manifest:
        raise AnnotationError(f'stack manifest {path}: "target" and "images" required')
    if not isinstance(manifest['images'], list) or not manifest['images']:
        raise AnnotationError(f'stack manifest {path}: "images" must be a non-empty list')

    entries = []
    for i, item in enumerate(manifest['images']):
        if not isinstance(item, dict) or not isinstance(item.get('raster'), str):
            raise AnnotationError(f'stack manifest {path}: image {i} needs a "raster" path')
        raster = expand_path(item['raster'])
        world_file = expand_path(item.get('world_file', raster.with_suffix('.wld')))
        entries.append(StackEntry(
            image_id=str(item.get('id', raster.stem)),
            raster=raster if raster.is_absolute() else base_dir / raster,
            world_file=world_file if world_file.is_absolute() else base_dir / world_file,
            mode_tag=str(item.get('mode', ''))))

    ids = [e.image_id for e in entries]
    if len(set(ids)) != len(ids):
        raise AnnotationError(f'stack manifest {path}: duplicate image ids {ids}')
    return entries, manifest


def load_stack(path: Union[Path, str], radiometry: Optional[bool] = None) -> Tuple[List[GeoImage], TargetAnnotation]:
    """load all images of a stack manifest and annotate the target in each of them"""
    entries, manifest = read_stack_manifest(path)
    world = manifest_target(manifest, path)
    try:
        band = int(manifest.get('band', 0))
        clip_percentile = float(manifest.get('clip_percentile', 0.002))
        gamma = float(manifest.get('gamma', 0.5))
    except (TypeError, ValueError) as e:
        raise AnnotationError(f'stack manifest {path}: {e}') from e
    if not 0 <= clip_percentile < 0.5 or not gamma > 0:
        raise AnnotationError(f'stack manifest {path}: clip_percentile {clip_percentile} or gamma {gamma} out of range')
    if radiometry is None:
        radiometry = bool(manifest.get('radiometry', True))

    stack = []
    for entry in entries:
        img = load_geo_image(entry.raster, entry.world_file, entry.mode_tag, image_id=entry.image_id, band=band)
        if min(img.width, img.height) < MIN_STACK_SIDE:
            raise UnreadableRaster(f'{entry.raster}: {img.width}x{img.height} is smaller than {MIN_STACK_SIDE}px')
        if radiometry:
            img = preprocess_radiometry(img, clip_percentile, gamma)
        stack.append(img)
        logger.debug(f'loaded {img!r} from {entry.raster}')

    return stack, annotate(stack, world)


def manifest_target(manifest: Dict, path: Union[Path, str] = '') -> Point:
    """target world position, given as ``{"world_position": [e, n]}`` or as ``[e, n]``"""
    target = manifest['target']
    world = target.get('world_position') if isinstance(target, dict) else target
    try:
        easting, northing = (float(c) for c in world)
    except (TypeError, ValueError) as e:
        raise AnnotationError(f'stack manifest {path}: target {target!r} is not an (easting, northing) pair') from e
    return easting, northing
