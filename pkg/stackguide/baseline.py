"""
Classical registration baseline: keypoints, ratio-test matches, RANSAC
homography and projection of the target into the current view.

Homographies estimated here map reference pixels to current-view pixels.
"""
from dataclasses import dataclass, field
import math
from typing import List, Optional, Tuple, Union

import numpy as np

from stackguide.error import (
    DegenerateConfiguration, GeometryError, NotEnoughMatches, RansacFailed, RegistrationError
)
from stackguide.logger import logger
from stackguide.raster import GeoImage, Point
from stackguide.sift import Keypoint, ScaleSpace, match_ratio, sift
from stackguide.synth import ViewTransform, apply_homography, normalize_homography, project_target, warp
from stackguide.utils import seed32

MIN_MATCHES = 4


@dataclass(frozen=True)
class BaselineConfig:
    ratio: float = 0.75
    cross_check: bool = False
    inlier_px: float = 3.0
    max_iters: int = 2000
    use_prior: bool = True
    canvas_scale: float = 1.5
    contrast: float = 0.03
    edge: float = 10.0
    prior_translation: float = 8.0
    prior_rotation: float = math.radians(5)
    prior_log_scale: float = 0.1
    seed: int = 0
    reference: str = ''

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ValueError(f'ratio must be in (0, 1] and not {self.ratio}')
        if self.inlier_px <= 0 or self.max_iters <= 0:
            raise ValueError('inlier_px and max_iters must be positive')
        if self.canvas_scale < 1:
            raise ValueError(f'canvas_scale must be at least 1 and not {self.canvas_scale}')


@dataclass
class RegistrationResult:
    H_est: Optional[np.ndarray] = None
    inliers: int = 0
    target_px: Optional[Point] = None
    failure: Optional[str] = None
    matched: int = 0
    detected_query: int = 0
    detected_ref: int = 0
    degenerate_sets: int = 0
    inlier_mask: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.failure is None and self.target_px is not None


# ---------------------------------------------------------------------------
# homography estimation

def normalize_points(pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """centre on the mean, scale to a mean distance of sqrt(2)"""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (pts - c) * s, T


def _dlt(src: np.ndarray, dst: np.ndarray) -> Optional[np.ndarray]:
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    n = len(src)
    zero, one = np.zeros(n), np.ones(n)
    A = np.empty((2 * n, 9))
    A[0::2] = np.c_[x, y, one, zero, zero, zero, -u * x, -u * y, -u]
    A[1::2] = np.c_[zero, zero, zero, x, y, one, -v * x, -v * y, -v]
    _, sv, vt = np.linalg.svd(A)
    if sv[7] < 1e-10 * sv[0]:
        return None
    return vt[-1].reshape(3, 3)


def fit_homography(src: np.ndarray, dst: np.ndarray) -> Optional[np.ndarray]:
    """normalised direct linear transform, least squares for more than 4 pairs"""
    src_n, T_src = normalize_points(np.asarray(src, dtype=np.float64))
    dst_n, T_dst = normalize_points(np.asarray(dst, dtype=np.float64))
    Hn = _dlt(src_n, dst_n)
    if Hn is None:
        return None
    H = np.linalg.inv(T_dst) @ Hn @ T_src
    if not abs(np.linalg.det(H)) > 1e-12 * np.abs(H).max() ** 3:
        return None
    return normalize_homography(H)


def transfer_error(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """symmetric transfer error in pixels"""
    with np.errstate(divide='ignore', invalid='ignore'):
        forward = apply_homography(H, src) - dst
        backward = apply_homography(np.linalg.inv(H), dst) - src
        err = np.sqrt((forward ** 2).sum(axis=1) + (backward ** 2).sum(axis=1))
    return np.where(np.isfinite(err), err, np.inf)


def _collinear(pts: np.ndarray, eps: float = 1e-3) -> bool:
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b = pts[j] - pts[i], pts[k] - pts[i]
        if abs(a[0] * b[1] - a[1] * b[0]) < eps:
            return True
    return False


def estimate_homography_ransac(src: np.ndarray, dst: np.ndarray, inlier_px: float = 3.0, max_iters: int = 2000,
                               rng: Union[np.random.Generator, int, None] = None) -> RegistrationResult:
    """
    RANSAC over 4-point minimal sets, refit on all inliers.

    Parameters
    ----------
    src, dst : np.ndarray
        (n, 2) matching points, ``dst ~ H src``
    inlier_px : float
        symmetric transfer error threshold
    max_iters : int
        number of minimal sets drawn
    rng : np.random.Generator or int
        random source, a seed or a generator

    Returns
    -------
    RegistrationResult
        ``H_est``, the inlier count and mask, and the number of collinear sets skipped
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < MIN_MATCHES:
        raise NotEnoughMatches(f'{n} matches, at least {MIN_MATCHES} are needed')
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng or 0)

    src_n, _ = normalize_points(src)
    dst_n, _ = normalize_points(dst)
    best: Optional[Tuple[int, float, np.ndarray]] = None
    degenerate = 0
    for _ in range(max_iters):
        idx = rng.choice(n, size=MIN_MATCHES, replace=False)
        if _collinear(src_n[idx]) or _collinear(dst_n[idx]):
            degenerate += 1
            continue
        H = fit_homography(src[idx], dst[idx])
        if H is None:
            degenerate += 1
            continue
        err = transfer_error(H, src, dst)
        mask = err < inlier_px
        count = int(mask.sum())
        score = float(err[mask].sum())
        if best is None or count > best[0] or (count == best[0] and score < best[1]):
            best = (count, score, mask)
        if count == n:
            break

    if best is None:
        raise DegenerateConfiguration(f'all {degenerate} minimal sets were degenerate')
    if best[0] < MIN_MATCHES:
        raise RansacFailed(f'best consensus has {best[0]} inliers')

    mask = best[2]
    H = fit_homography(src[mask], dst[mask])
    if H is None:
        raise RansacFailed('refit on the inliers is degenerate')
    refit = transfer_error(H, src, dst) < inlier_px
    if refit.sum() >= MIN_MATCHES and not np.array_equal(refit, mask):
        H_refit = fit_homography(src[refit], dst[refit])
        if H_refit is not None:
            H, mask = H_refit, refit
    return RegistrationResult(H_est=H, inliers=int(mask.sum()), inlier_mask=mask, degenerate_sets=degenerate)


# ---------------------------------------------------------------------------
# camera prior

def _similarity(center_ref: Point, yaw: float, zoom: float, center_canvas: Point) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([
        [zoom * c, -zoom * s, center_ref[0] - zoom * (c * center_canvas[0] - s * center_canvas[1])],
        [zoom * s, zoom * c, center_ref[1] - zoom * (s * center_canvas[0] + c * center_canvas[1])],
        [0.0, 0.0, 1.0]])


def prior_similarity(prior: ViewTransform) -> Tuple[Point, float, float]:
    """(reference position of the view centre, yaw, zoom) of a prior transform"""
    c = prior.view_size / 2
    p = apply_homography(prior.H, np.array([[c, c], [c + 1, c], [c, c + 1]]))
    J = np.c_[p[1] - p[0], p[2] - p[0]]
    zoom = math.sqrt(abs(np.linalg.det(J)))
    yaw = math.atan2(J[1, 0] - J[0, 1], J[0, 0] + J[1, 1])
    return (float(p[0, 0]), float(p[0, 1])), yaw, zoom


def perturb_prior(t: ViewTransform, rng: np.random.Generator, translation: float = 8.0,
                  rotation: float = math.radians(5), log_scale: float = 0.1) -> ViewTransform:
    """an approximate camera: reference shift, in-plane rotation and zoom noise"""
    shift = rng.normal(0.0, translation, size=2) if translation > 0 else np.zeros(2)
    yaw = rng.normal(0.0, rotation) if rotation > 0 else 0.0
    scale = math.exp(rng.normal(0.0, log_scale)) if log_scale > 0 else 1.0
    c = t.view_size / 2
    noise = _similarity((c, c), yaw, scale, (c, c))
    shift_ref = np.array([[1.0, 0.0, shift[0]], [0.0, 1.0, shift[1]], [0.0, 0.0, 1.0]])
    H = normalize_homography(shift_ref @ t.H @ noise)
    return ViewTransform(H=H, source_image_id=t.source_image_id, seed=t.seed, view_size=t.view_size)


# ---------------------------------------------------------------------------
# registration

class Registrar:
    """registers views against one reference image, caching its features"""

    def __init__(self, reference: Union[GeoImage, np.ndarray], p_ref: Point, cfg: Optional[BaselineConfig] = None):
        self.pixels = reference.pixels if isinstance(reference, GeoImage) else np.asarray(reference)
        self.p_ref = p_ref
        self.cfg = cfg or BaselineConfig()
        self._features: Optional[Tuple[List[Keypoint], np.ndarray]] = None

    def _sift(self, img: np.ndarray):
        return sift(ScaleSpace(img), contrast=self.cfg.contrast, edge=self.cfg.edge)

    def reference_features(self):
        if self._features is None:
            self._features = self._sift(self.pixels)
        return self._features

    def canvas(self, prior: ViewTransform) -> Tuple[np.ndarray, np.ndarray]:
        """reference resampled around the prior at its scale and rotation, and canvas -> reference"""
        size = int(round(self.cfg.canvas_scale * prior.view_size))
        center, yaw, zoom = prior_similarity(prior)
        H_pre = _similarity(center, yaw, zoom, (size / 2, size / 2))
        image = warp(self.pixels, ViewTransform(H=H_pre, source_image_id=prior.source_image_id, view_size=size))
        return image, H_pre

    def register(self, current: np.ndarray, prior: Optional[ViewTransform] = None,
                 seed: Optional[int] = None) -> RegistrationResult:
        """detect, describe, match, RANSAC and project; failures are recorded in the result"""
        cfg = self.cfg
        result = RegistrationResult()
        try:
            if prior is not None and cfg.use_prior:
                ref_img, H_pre = self.canvas(prior)
                ref_kps, ref_desc = self._sift(ref_img)
            else:
                H_pre = np.eye(3)
                ref_kps, ref_desc = self.reference_features()
            cur_kps, cur_desc = self._sift(np.asarray(current, dtype=np.float64))
            result.detected_query, result.detected_ref = len(cur_kps), len(ref_kps)
            if not cur_kps or not ref_kps:
                raise NotEnoughMatches(f'{len(cur_kps)} current and {len(ref_kps)} reference keypoints')

            matches = match_ratio(cur_desc, ref_desc, cfg.ratio, cfg.cross_check)
            result.matched = matches.matched
            src = np.array([ref_kps[j].position for j in matches.ref_indices]).reshape(-1, 2)
            dst = np.array([cur_kps[i].position for i in matches.query_indices]).reshape(-1, 2)
            rng = np.random.default_rng(cfg.seed if seed is None else seed)
            fit = estimate_homography_ransac(src, dst, cfg.inlier_px, cfg.max_iters, rng)

            H_est = normalize_homography(fit.H_est @ np.linalg.inv(H_pre))
            result.H_est, result.inliers, result.inlier_mask = H_est, fit.inliers, fit.inlier_mask
            result.degenerate_sets = fit.degenerate_sets
            result.target_px = project_target(np.linalg.inv(H_est), self.p_ref)
        except (RegistrationError, GeometryError) as e:
            result.failure = f'{type(e).__name__}: {e}'
            logger.debug(f'registration failed: {result.failure}')
        return result


def register_and_project(current: np.ndarray, reference: Union[GeoImage, np.ndarray], prior: Optional[ViewTransform],
                         p_ref: Point, cfg: Optional[BaselineConfig] = None) -> RegistrationResult:
    return Registrar(reference, p_ref, cfg).register(current, prior)


def frame_seed(cfg: BaselineConfig, name: str) -> int:
    """RANSAC seed of one frame, independent of evaluation order"""
    return (cfg.seed * 1000003 + seed32(name)) & (1 << 32) - 1
