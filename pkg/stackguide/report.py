"""
Metrics, report tables and likelihood overlays.

The reported ``px-error`` is the mean Euclidean distance in pixels over the
frames that produced a prediction; failed frames only enter the share of
frames within the threshold.
"""
from dataclasses import dataclass, field
from fractions import Fraction
import io
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from stackguide.conf import RewriteHashConf
from stackguide.error import EmptyResults, WriteFailure
from stackguide.raster import Point
from stackguide.trajectory import TWO_THIRDS
from stackguide.utils import dump_json, dumps_json, hash32, hash_file, load_json, write_bytes

METHODS = ('learned', 'baseline')
YELLOW = np.array([1.0, 1.0, 0.0])
RED = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class EvalConfig:
    split: str = 'test'
    methods: Tuple[str, ...] = METHODS
    threshold: float = 10.0
    # exact: "2/3" from a config stays 2/3, floats snap to the nearest small fraction
    min_fraction: Union[Fraction, float, str] = TWO_THIRDS
    max_consecutive: int = 4
    overlays: int = 8
    timing_frames: int = 100

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f'unknown methods {unknown}, expect {METHODS}')
        if not self.threshold > 0:
            raise ValueError(f'threshold must be positive and not {self.threshold}')
        try:
            fraction = Fraction(self.min_fraction)
        except (TypeError, ValueError, ZeroDivisionError) as e:
            raise ValueError(f'min_fraction must be a fraction and not {self.min_fraction!r}') from e
        if isinstance(self.min_fraction, float):
            fraction = fraction.limit_denominator(1000)
        if not 0 < fraction <= 1:
            raise ValueError(f'min_fraction must be in (0, 1] and not {self.min_fraction}')
        if self.max_consecutive < 1:
            raise ValueError(f'max_consecutive must be at least 1 and not {self.max_consecutive}')
        object.__setattr__(self, 'min_fraction', fraction)


@dataclass
class FrameResult:
    frame_id: str
    method: str
    truth_px: Point
    predicted_px: Optional[Point] = None
    failure: Optional[str] = None
    confidence: Optional[float] = None

    @property
    def error(self) -> float:
        if self.predicted_px is None:
            return math.inf
        return math.hypot(self.predicted_px[0] - self.truth_px[0], self.predicted_px[1] - self.truth_px[1])

    def dict(self) -> Dict:
        error = self.error
        return {
            'frame': self.frame_id,
            'method': self.method,
            'truth_px': list(self.truth_px),
            'predicted_px': None if self.predicted_px is None else list(self.predicted_px),
            'error': error if math.isfinite(error) else None,
            'failure': self.failure,
            'confidence': self.confidence,
        }


def pct_key(threshold: float) -> str:
    """report key of the share of frames within ``threshold``, e.g. ``pct_within_10px``"""
    return f'pct_within_{threshold:g}px'


@dataclass
class MethodSummary:
    method: str
    mean_px_error: Optional[float]
    pct_within: float
    n: int
    failures: int
    threshold: float = 10.0

    def dict(self) -> Dict:
        return {
            'method': self.method,
            'mean_px_error': self.mean_px_error,
            pct_key(self.threshold): self.pct_within,
            'threshold': self.threshold,
            'n': self.n,
            'failures': self.failures,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> 'MethodSummary':
        threshold = float(d.get('threshold', 10.0))
        return cls(method=d['method'], mean_px_error=d['mean_px_error'], pct_within=float(d[pct_key(threshold)]),
                   n=int(d['n']), failures=int(d['failures']), threshold=threshold)


@dataclass
class EvalReport:
    methods: List[MethodSummary]
    trajectories: Dict[str, List[Dict]] = field(default_factory=dict)
    provenance: Dict = field(default_factory=dict)

    def method(self, name: str) -> MethodSummary:
        for m in self.methods:
            if m.method == name:
                return m
        raise KeyError(name)

    def dict(self) -> Dict:
        return {
            'methods': [m.dict() for m in self.methods],
            'trajectories': self.trajectories,
            'provenance': self.provenance,
        }


def summarize(method: str, results: Sequence[FrameResult], threshold: float = 10.0) -> MethodSummary:
    errors = [r.error for r in results]
    finite = [e for e in errors if math.isfinite(e)]
    within = sum(1 for e in errors if e < threshold)
    return MethodSummary(method=method,
                         mean_px_error=float(np.mean(finite)) if finite else None,
                         pct_within=100.0 * within / len(errors),
                         n=len(errors),
                         failures=sum(1 for r in results if r.predicted_px is None),
                         threshold=threshold)


def compute_metrics(results: Iterable[FrameResult], threshold: float = 10.0) -> EvalReport:
    """per-method mean px-error over predicted frames and share of all frames within ``threshold``"""
    by_method: Dict[str, List[FrameResult]] = {}
    for r in results:
        by_method.setdefault(r.method, []).append(r)
    if not by_method:
        raise EmptyResults('no frame results')
    return EvalReport(methods=[summarize(m, rs, threshold) for m, rs in by_method.items()])


def merge_reports(reports: Sequence[EvalReport]) -> EvalReport:
    if not reports:
        raise EmptyResults('no reports to merge')
    merged = EvalReport(methods=[], provenance={'merged': [r.provenance for r in reports]})
    for r in reports:
        merged.methods.extend(r.methods)
        for method, verdicts in r.trajectories.items():
            merged.trajectories.setdefault(method, []).extend(verdicts)
    return merged


def text_table(header: List[str], rows: List[List[str]]) -> str:
    widths = [max(len(c) for c in col) for col in zip(header, *rows)]
    lines = [' | '.join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header] + rows]
    lines.insert(1, '-+-'.join('-' * w for w in widths))
    return '\n'.join(lines)


def format_table(report: EvalReport) -> str:
    """method | px-error | frames with error less than 10px | n | failures"""
    threshold = report.methods[0].threshold if report.methods else 10.0
    header = ['method', 'px-error', f'frames with error less than {threshold:g}px', 'n', 'failures']
    rows = [[m.method,
             '-' if m.mean_px_error is None else f'{m.mean_px_error:.2f}px',
             f'{m.pct_within:.1f}%',
             str(m.n),
             str(m.failures)] for m in report.methods]
    return text_table(header, rows)


def format_verdicts(report: EvalReport) -> str:
    header = ['method', 'trajectory', 'frames', 'within', 'longest failure run', 'success']
    rows = []
    for method, verdicts in report.trajectories.items():
        for v in verdicts:
            rows.append([method, str(v['index']), str(v['frames']), f'{100 * v["fraction_within"]:.1f}%',
                         str(v['longest_failure_run']), 'yes' if v['success'] else 'no'])
        ok = sum(1 for v in verdicts if v['success'])
        rows.append([method, 'all', '', '', '', f'{ok}/{len(verdicts)}'])
    return text_table(header, rows)


def write_report(report: EvalReport, path: Union[Path, str]):
    try:
        dump_json(report.dict(), path)
    except OSError as e:
        raise WriteFailure(f'{path}: {e}') from e


def load_report(path: Union[Path, str]) -> EvalReport:
    data = load_json(path)
    return EvalReport(methods=[MethodSummary.from_dict(m) for m in data['methods']],
                      trajectories=data.get('trajectories', {}), provenance=data.get('provenance', {}))


def provenance(config: Optional[Dict] = None, **files: Optional[Union[Path, str]]) -> Dict:
    """hashes of input files (``manifest=...``, ``weights=...``) and of the config"""
    prov: Dict = dict((f'{k}_hash', hash_file(v)) for k, v in sorted(files.items()) if v is not None)
    if config is not None:
        prov['config_hash'] = hash32(dumps_json(RewriteHashConf().rewrite(config)))
    return prov


def render_overlay(image: np.ndarray, likelihood: np.ndarray, truth_px: Optional[Point],
                   out_path: Union[Path, str], alpha: float = 0.6, marker: int = 2):
    """
    Write a colour overlay: grayscale view, cells tinted yellow in proportion
    to ``likelihood / max(likelihood)`` and the true target marked red.
    ``.png`` is written with Pillow, anything else as binary PPM.
    """
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    likelihood = np.asarray(likelihood, dtype=np.float64)
    h, w = image.shape
    gh, gw = likelihood.shape
    if gh == 0 or gw == 0 or h % gh or w % gw:
        raise WriteFailure(f'a {gw}x{gh} grid does not divide a {w}x{h} image')
    if not np.all(np.isfinite(likelihood)) or likelihood.min() < 0:
        raise WriteFailure('likelihood must be finite and non-negative')

    top = likelihood.max()
    a = alpha * (likelihood / top if top > 0 else np.zeros_like(likelihood))
    a = np.repeat(np.repeat(a, h // gh, axis=0), w // gw, axis=1)[..., None]
    rgb = image[..., None] * (1 - a) + YELLOW * a

    if truth_px is not None:
        u, v = int(round(truth_px[0])), int(round(truth_px[1]))
        rgb[max(v - marker, 0):max(v + marker + 1, 0), max(u - marker, 0):max(u + marker + 1, 0)] = RED
    pixels = np.round(rgb * 255).astype(np.uint8)

    out_path = Path(out_path)
    try:
        if out_path.suffix.lower() == '.png':
            buffer = io.BytesIO()
            Image.fromarray(pixels).save(buffer, format='PNG')
            data = buffer.getvalue()
        else:
            data = f'P6\n{w} {h}\n255\n'.encode('ascii') + pixels.tobytes()
        write_bytes(data, out_path)
    except OSError as e:
        raise WriteFailure(f'{out_path}: {e}') from e
