"""
Evaluation loops of the learned method and the registration baseline over
dataset splits and simulated trajectories.
"""
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from stackguide.baseline import BaselineConfig, Registrar, frame_seed, perturb_prior
from stackguide.error import AnnotationError, NetworkError
from stackguide.logger import logger
from stackguide.net import ModelWeights, forward, localize, softmax_heatmap
from stackguide.raster import GeoImage, TargetAnnotation
from stackguide.report import EvalConfig, FrameResult, render_overlay
from stackguide.rng import stream
from stackguide.synth import DatasetManifest, Sample, ViewTransform, load_sample_image, make_sample
from stackguide.trajectory import Trajectory, judge_trajectory
from stackguide.utils import humantime, pool_map, wrap_tqdm


def frame_id(sample: Sample) -> str:
    return f'{sample.split}_{sample.index}'


def predict_frame(weights: ModelWeights, image: np.ndarray, frame: str, truth_px) -> FrameResult:
    try:
        loc = localize(forward(weights, image))
    except NetworkError as e:
        return FrameResult(frame, 'learned', tuple(truth_px), failure=f'{type(e).__name__}: {e}')
    return FrameResult(frame, 'learned', tuple(truth_px), predicted_px=(loc.u, loc.v), confidence=loc.confidence)


def evaluate_learned(manifest: DatasetManifest, weights: ModelWeights, split: str = 'test',
                     threads: int = 1, quiet: bool = False) -> List[FrameResult]:
    samples = manifest.split(split)

    def _eval(sample: Sample) -> FrameResult:
        return predict_frame(weights, load_sample_image(manifest, sample), frame_id(sample), sample.target_px)

    start = time.time()
    results = list(wrap_tqdm('learned', pool_map(_eval, samples, threads), total=len(samples), quiet=quiet))
    logger.info(f'learned: {len(results)} frames took {humantime(time.time() - start)}',
                duration=time.time() - start)
    return results


def inference_times(weights: ModelWeights, images: Sequence[np.ndarray]) -> List[float]:
    """single-threaded wall time of one forward pass and arg-max per image, in seconds"""
    times = []
    for image in images:
        start = time.perf_counter()
        localize(forward(weights, image))
        times.append(time.perf_counter() - start)
    return times


def reference_prior(t: ViewTransform, source: GeoImage, reference: GeoImage, rng: np.random.Generator,
                    cfg: BaselineConfig) -> ViewTransform:
    """perturbed camera prior expressed in the reference image's pixels"""
    noisy = perturb_prior(t, rng, cfg.prior_translation, cfg.prior_rotation, cfg.prior_log_scale)
    to_ref = np.linalg.inv(reference.geo.matrix) @ source.geo.matrix
    return ViewTransform(H=to_ref @ noisy.H, source_image_id=reference.image_id, seed=t.seed,
                         view_size=t.view_size)


class BaselineEvaluator:
    """registers frames against one reference image of the stack"""

    def __init__(self, stack: Sequence[GeoImage], target: TargetAnnotation, cfg: BaselineConfig,
                 reference_id: Optional[str] = None):
        self.by_id = dict((img.image_id, img) for img in stack)
        reference_id = reference_id or cfg.reference
        if reference_id and reference_id not in self.by_id:
            raise AnnotationError(f'reference image "{reference_id}" is not in the stack')
        self.reference = self.by_id[reference_id] if reference_id else stack[0]
        self.cfg = cfg
        self.registrar = Registrar(self.reference, target.pixel(self.reference.image_id), cfg)

    def prepare(self):
        # reference features are shared by all frames registered without a prior
        self.registrar.reference_features()

    def __call__(self, image: np.ndarray, t: ViewTransform, frame: str, truth_px) -> FrameResult:
        prior = None
        if self.cfg.use_prior:
            rng = stream(self.cfg.seed, 'prior', frame)
            prior = reference_prior(t, self.by_id[t.source_image_id], self.reference, rng, self.cfg)
        result = self.registrar.register(image, prior, seed=frame_seed(self.cfg, frame))
        return FrameResult(frame, 'baseline', tuple(truth_px), predicted_px=result.target_px if result.ok else None,
                           failure=result.failure)


def evaluate_baseline(manifest: DatasetManifest, stack: Sequence[GeoImage], target: TargetAnnotation,
                      cfg: BaselineConfig, reference_id: Optional[str] = None, split: str = 'test',
                      threads: int = 1, quiet: bool = False) -> List[FrameResult]:
    evaluator = BaselineEvaluator(stack, target, cfg, reference_id)
    if not cfg.use_prior:
        evaluator.prepare()
    samples = manifest.split(split)

    def _eval(sample: Sample) -> FrameResult:
        return evaluator(load_sample_image(manifest, sample), sample.transform, frame_id(sample), sample.target_px)

    start = time.time()
    results = list(wrap_tqdm('baseline', pool_map(_eval, samples, threads), total=len(samples), quiet=quiet))
    failures = sum(1 for r in results if r.failure)
    logger.info(f'baseline: {len(results)} frames ({failures} failed) took {humantime(time.time() - start)}',
                duration=time.time() - start)
    return results


def evaluate_trajectories(trajectories: Sequence[Trajectory], stack: Sequence[GeoImage], target: TargetAnnotation,
                          cfg: EvalConfig, weights: Optional[ModelWeights] = None,
                          baseline: Optional[BaselineEvaluator] = None,
                          threads: int = 1, quiet: bool = False) -> Tuple[List[FrameResult], Dict[str, List[Dict]]]:
    """frame results of every method and one verdict per trajectory and method"""
    by_id = dict((img.image_id, img) for img in stack)
    if baseline is not None and not baseline.cfg.use_prior:
        baseline.prepare()

    def _eval(traj: Trajectory) -> Dict[str, List[FrameResult]]:
        frames: Dict[str, List[FrameResult]] = {}
        for i, t in enumerate(traj.transforms):
            sample = make_sample(by_id, target, t, 'trajectory', i)
            frame = f'trajectory{traj.index}_{i}'
            if weights is not None:
                frames.setdefault('learned', []).append(predict_frame(weights, sample.image, frame, sample.target_px))
            if baseline is not None:
                frames.setdefault('baseline', []).append(baseline(sample.image, t, frame, sample.target_px))
        return frames

    results: List[FrameResult] = []
    verdicts: Dict[str, List[Dict]] = {}
    for traj, frames in zip(trajectories, wrap_tqdm('trajectories', pool_map(_eval, trajectories, threads),
                                                    total=len(trajectories), quiet=quiet)):
        for method, rs in frames.items():
            results.extend(rs)
            verdict = judge_trajectory([r.error for r in rs], cfg.threshold, cfg.min_fraction, cfg.max_consecutive)
            verdict.index = traj.index
            verdicts.setdefault(method, []).append(verdict.dict())
    for method, vs in verdicts.items():
        logger.info(f'{method}: guidance succeeded on {sum(v["success"] for v in vs)}/{len(vs)} trajectories')
    return results, verdicts


def write_overlays(manifest: DatasetManifest, weights: ModelWeights, out_dir: Path, count: int, split: str = 'test'):
    """likelihood overlays of the first ``count`` frames of ``split``"""
    if not weights.config.selection:
        logger.warning('overlays need the selection head, skipped')
        return
    for sample in manifest.split(split)[:count]:
        image = load_sample_image(manifest, sample)
        pred = forward(weights, image)
        render_overlay(image, softmax_heatmap(pred.heatmap), sample.target_px, out_dir / f'{frame_id(sample)}.png')
