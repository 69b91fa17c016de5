"""
Simulated approach trajectories and trajectory-level guidance verdicts.

Frame ``t`` of a trajectory with ``T`` frames zooms log-linearly from
``zoom_start`` to ``zoom_end``, rolls by ``roll_rate`` per frame around a
random start angle and moves the target from a lateral offset to the view
centre; small roll and tilt jitter is added per frame.
"""
from dataclasses import dataclass
from fractions import Fraction
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

from stackguide.error import EmptyTrajectory, InvalidCount
from stackguide.logger import logger
from stackguide.raster import GeoImage, TargetAnnotation
from stackguide.rng import stream, substream_seed
from stackguide.synth import Sample, ViewTransform, compose_view, make_sample, project_target
from stackguide.utils import pool_map, writelines

TWO_THIRDS = Fraction(2, 3)


@dataclass(frozen=True)
class TrajectoryConfig:
    frames: int = 30
    zoom_start: float = 8.0
    zoom_end: float = 1.0
    roll_rate: float = 0.05
    roll_jitter: float = 0.01
    lateral_offset_start: float = 64.0
    tilt_jitter: float = math.radians(2)
    view_size: int = 256
    focal_ratio: float = 1.0
    count: int = 100
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.frames < 8:
            raise ValueError(f'a trajectory needs at least 8 frames and not {self.frames}')
        if not self.zoom_start >= self.zoom_end > 0:
            raise ValueError(f'expect zoom_start >= zoom_end > 0 and not {self.zoom_start}, {self.zoom_end}')
        if not 0 <= self.lateral_offset_start < self.view_size / 2:
            raise ValueError(f'lateral_offset_start must be in [0, {self.view_size / 2})')
        if self.roll_jitter < 0 or self.tilt_jitter < 0:
            raise ValueError('jitters must not be negative')
        if not 0 < self.train_fraction < 1 or self.count < 2:
            raise ValueError('expect 0 < train_fraction < 1 and at least 2 trajectories')


@dataclass(eq=False)
class Trajectory:
    index: int
    source_image_id: str
    transforms: List[ViewTransform]

    def __len__(self):
        return len(self.transforms)


@dataclass
class TrajectoryVerdict:
    errors: List[float]
    fraction_within: Fraction
    longest_failure_run: int
    success: bool
    index: Optional[int] = None

    def dict(self):
        return {
            'index': self.index,
            'frames': len(self.errors),
            'fraction_within': float(self.fraction_within),
            'longest_failure_run': self.longest_failure_run,
            'success': self.success,
        }


def simulate_trajectory(cfg: TrajectoryConfig, stack: Sequence[GeoImage], target: TargetAnnotation,
                        index: int = 0) -> Trajectory:
    """frame transforms of trajectory ``index``, deterministic per ``(cfg.seed, index)``"""
    if not stack:
        raise InvalidCount('stack is empty')
    rng = stream(cfg.seed, 'trajectory', index)
    seed = substream_seed(cfg.seed, 'trajectory', index)
    img = stack[int(rng.integers(len(stack)))]
    p_ref = target.pixel(img.image_id)
    roll_start = rng.uniform(0, 2 * math.pi)
    heading = rng.uniform(0, 2 * math.pi)

    center = cfg.view_size / 2
    focal = cfg.focal_ratio * cfg.view_size
    log_start, log_end = math.log(cfg.zoom_start), math.log(cfg.zoom_end)
    transforms = []
    for t in range(cfg.frames):
        frac = t / (cfg.frames - 1)
        # noise is always drawn so streams do not depend on the jitter settings
        roll_noise, tilt_x, tilt_y = rng.standard_normal(3)
        zoom = math.exp(log_start + (log_end - log_start) * frac)
        roll = roll_start + cfg.roll_rate * t + cfg.roll_jitter * roll_noise
        offset = cfg.lateral_offset_start * (1 - frac)
        view_pos = (center + offset * math.cos(heading), center + offset * math.sin(heading))
        H = compose_view(p_ref, view_pos, roll, zoom, cfg.tilt_jitter * tilt_x, cfg.tilt_jitter * tilt_y,
                         cfg.view_size, focal)
        transforms.append(ViewTransform(H=H, source_image_id=img.image_id, seed=seed, view_size=cfg.view_size))
    return Trajectory(index=index, source_image_id=img.image_id, transforms=transforms)


def simulate_trajectories(cfg: TrajectoryConfig, stack: Sequence[GeoImage], target: TargetAnnotation,
                          threads: int = 1) -> List[Trajectory]:
    logger.info(f'simulate {cfg.count} trajectories of {cfg.frames} frames')
    return list(pool_map(lambda i: simulate_trajectory(cfg, stack, target, i), range(cfg.count), threads))


def split_trajectories(n: int, train_fraction: float = 0.9) -> Tuple[List[int], List[int]]:
    """the first ``round(n * train_fraction)`` trajectories train, the rest test"""
    n_train = int(round(n * train_fraction))
    if not 0 < n_train < n:
        raise InvalidCount(f'{n} trajectories cannot be split with train fraction {train_fraction}')
    return list(range(n_train)), list(range(n_train, n))


def trajectory_samples(trajectories: Sequence[Trajectory], stack: Sequence[GeoImage], target: TargetAnnotation,
                       split: str = 'train', image_dir: Optional[Path] = None, threads: int = 1) -> List[Sample]:
    """every frame as an independent sample, indexed in trajectory order"""
    by_id = dict((img.image_id, img) for img in stack)
    jobs = [t for traj in trajectories for t in traj.transforms]
    return list(pool_map(lambda job: make_sample(by_id, target, job[1], split, job[0], image_dir),
                         list(enumerate(jobs)), threads))


def longest_run(flags: Sequence[bool]) -> int:
    best = run = 0
    for f in flags:
        run = run + 1 if f else 0
        best = max(best, run)
    return best


def judge_trajectory(errors: Sequence[float], threshold: float = 10.0,
                     min_fraction: Union[Fraction, float] = TWO_THIRDS,
                     max_consecutive: int = 4) -> TrajectoryVerdict:
    """
    Guidance succeeds iff at least ``min_fraction`` of the frames have an
    error strictly below ``threshold`` and no ``max_consecutive`` frames in a
    row are wrong. Failed frames carry an infinite (or NaN) error.
    """
    errors = [float(e) for e in errors]
    if not errors:
        raise EmptyTrajectory('no frames to judge')
    good = [e < threshold for e in errors]
    fraction = Fraction(sum(good), len(errors))
    run = longest_run([not g for g in good])
    success = fraction >= Fraction(min_fraction) and run < max_consecutive
    return TrajectoryVerdict(errors=errors, fraction_within=fraction, longest_failure_run=run, success=success)


def write_trajectory(path: Union[Path, str], trajectory: Trajectory, target: TargetAnnotation):
    """tab separated frame index, 9 entries of H and the true target pixel"""
    header = ['frame'] + [f'h{i}{j}' for i in range(3) for j in range(3)] + ['u', 'v']
    p_ref = target.pixel(trajectory.source_image_id)
    rows = []
    for i, t in enumerate(trajectory.transforms):
        u, v = project_target(t, p_ref)
        rows.append('\t'.join([str(i)] + [f'{h:.17g}' for h in t.H.reshape(-1)] + [f'{u!r}', f'{v!r}']))
    writelines(['\t'.join(header)] + rows, path)

