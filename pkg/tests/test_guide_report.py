from fractions import Fraction
import math
from pathlib import Path

import numpy as np
import pytest

from stackguide.error import EmptyResults, WriteFailure
from stackguide.report import (
    EvalConfig, EvalReport, FrameResult, MethodSummary, compute_metrics, format_table, format_verdicts, load_report,
    merge_reports, provenance, render_overlay, write_report
)
from stackguide.trajectory import judge_trajectory


def _cells(line):
    return [c.strip() for c in line.split('|')]


def _read_ppm(path):
    data = path.read_bytes()
    header, w_h, maxval, pixels = data.split(b'\n', 3)
    w, h = map(int, w_h.split())
    assert (header, maxval) == (b'P6', b'255')
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


def test_eval_config_invalid():
    with pytest.raises(ValueError):
        EvalConfig(methods=('learned', 'oracle'))
    with pytest.raises(ValueError):
        EvalConfig(threshold=0)


def test_eval_config_min_fraction_is_exact():
    assert EvalConfig().min_fraction == Fraction(2, 3)
    assert EvalConfig(min_fraction='2/3').min_fraction == Fraction(2, 3)
    assert EvalConfig(min_fraction=2 / 3).min_fraction == Fraction(2, 3)
    assert EvalConfig(min_fraction=0.5).min_fraction == Fraction(1, 2)
    with pytest.raises(ValueError):
        EvalConfig(min_fraction='two thirds')
    with pytest.raises(ValueError):
        EvalConfig(min_fraction=0)


def test_exactly_two_thirds_with_config_fraction():
    cfg = EvalConfig(min_fraction='2/3')
    errors = [1.0, 1.0, 50.0] * 10
    verdict = judge_trajectory(errors, cfg.threshold, cfg.min_fraction, cfg.max_consecutive)
    assert verdict.success


def test_pct_key_follows_threshold(tmp_path):
    report = compute_metrics([FrameResult('f0', 'learned', (0.0, 0.0), (3.0, 0.0))], threshold=5.0)
    summary = report.method('learned').dict()
    assert summary['pct_within_5px'] == 100.0
    assert 'pct_within_10px' not in summary
    write_report(report, tmp_path / 'r.json')
    loaded = load_report(tmp_path / 'r.json').method('learned')
    assert (loaded.threshold, loaded.pct_within) == (5.0, 100.0)
    assert 'less than 5px' in format_table(report)


def test_frame_error():
    assert FrameResult('f', 'learned', (0.0, 0.0), (3.0, 4.0)).error == 5.0
    failed = FrameResult('f', 'baseline', (0.0, 0.0), failure='RansacFailed: no consensus')
    assert failed.error == math.inf
    assert failed.dict()['error'] is None


def test_single_frame():
    report = compute_metrics([FrameResult('f0', 'learned', (10.0, 10.0), (13.0, 10.0))])
    m = report.method('learned')
    assert (m.mean_px_error, m.pct_within, m.n, m.failures) == (3.0, 100.0, 1, 0)


def test_failed_frame_only_counts_in_share():
    report = compute_metrics([FrameResult('f0', 'baseline', (0.0, 0.0), (3.0, 0.0)),
                              FrameResult('f1', 'baseline', (0.0, 0.0), failure='NotEnoughMatches: 2 matches')])
    m = report.method('baseline')
    assert m.mean_px_error == 3.0
    assert m.pct_within == 50.0
    assert m.failures == 1


def test_threshold_is_strict():
    report = compute_metrics([FrameResult('f0', 'learned', (0.0, 0.0), (10.0, 0.0))])
    assert report.method('learned').pct_within == 0.0


def test_all_failed():
    report = compute_metrics([FrameResult('f0', 'learned', (0.0, 0.0))])
    assert report.method('learned').mean_px_error is None
    assert format_table(report).splitlines()[2].split('|')[1].strip() == '-'


def test_empty_results():
    with pytest.raises(EmptyResults):
        compute_metrics([])
    with pytest.raises(EmptyResults):
        merge_reports([])


def test_format_table_layout():
    report = EvalReport(methods=[MethodSummary('baseline', 1.68, 96.4, 200, 0),
                                 MethodSummary('learned', 6.58, 96.1, 200, 0)])
    lines = format_table(report).splitlines()
    assert _cells(lines[0]) == ['method', 'px-error', 'frames with error less than 10px', 'n', 'failures']
    assert set(lines[1]) == {'-', '+'}
    assert _cells(lines[2]) == ['baseline', '1.68px', '96.4%', '200', '0']
    assert _cells(lines[3]) == ['learned', '6.58px', '96.1%', '200', '0']
    assert len({line.index('|') for line in (lines[0], lines[2], lines[3])}) == 1


def test_format_verdicts():
    good = judge_trajectory([1.0] * 10)
    good.index = 0
    bad = judge_trajectory([math.inf] * 10)
    bad.index = 1
    report = EvalReport(methods=[], trajectories={'learned': [good.dict(), bad.dict()]})
    lines = format_verdicts(report).splitlines()
    assert _cells(lines[2]) == ['learned', '0', '10', '100.0%', '0', 'yes']
    assert _cells(lines[3]) == ['learned', '1', '10', '0.0%', '10', 'no']
    assert _cells(lines[4])[-1] == '1/2'


def test_report_roundtrip_and_merge(tmp_path):
    a = compute_metrics([FrameResult('f0', 'learned', (0.0, 0.0), (1.0, 0.0))])
    a.provenance = {'manifest_hash': 'abc'}
    b = compute_metrics([FrameResult('f0', 'baseline', (0.0, 0.0), (2.0, 0.0))])
    write_report(a, tmp_path / 'a.json')
    loaded = load_report(tmp_path / 'a.json')
    assert loaded.dict() == a.dict()
    merged = merge_reports([loaded, b])
    assert [m.method for m in merged.methods] == ['learned', 'baseline']
    assert merged.provenance == {'merged': [{'manifest_hash': 'abc'}, {}]}


def test_write_report_deterministic(tmp_path):
    results = [FrameResult(f'f{i}', 'learned', (0.0, 0.0), (float(i), 0.0)) for i in range(5)]
    write_report(compute_metrics(results), tmp_path / 'a.json')
    write_report(compute_metrics(results), tmp_path / 'b.json')
    assert (tmp_path / 'a.json').read_bytes() == (tmp_path / 'b.json').read_bytes()


def test_write_report_failure(tmp_path):
    (tmp_path / 'file').write_text('')
    with pytest.raises(WriteFailure):
        write_report(compute_metrics([FrameResult('f0', 'learned', (0.0, 0.0))]), tmp_path / 'file' / 'r.json')


def test_provenance(tmp_path):
    (tmp_path / 'manifest.json').write_text('{}')
    prov = provenance({'seed': 1, '#note': 'ignored'}, manifest=tmp_path / 'manifest.json', weights=None)
    assert sorted(prov) == ['config_hash', 'manifest_hash']
    assert prov['config_hash'] == provenance({'seed': 1})['config_hash']
    assert prov['config_hash'] != provenance({'seed': 2})['config_hash']


def test_overlay_uniform(tmp_path):
    render_overlay(np.zeros((16, 16)), np.ones((2, 2)), None, tmp_path / 'o.ppm')
    rgb = _read_ppm(tmp_path / 'o.ppm')
    assert rgb.shape == (16, 16, 3)
    assert np.all(rgb == [153, 153, 0])


def test_overlay_one_hot(tmp_path):
    likelihood = np.zeros((2, 2))
    likelihood[1, 0] = 0.3
    render_overlay(np.full((16, 16), 1.0), likelihood, None, tmp_path / 'o.ppm', alpha=1.0)
    rgb = _read_ppm(tmp_path / 'o.ppm')
    assert np.all(rgb[8:, :8] == [255, 255, 0])
    assert np.all(rgb[:8] == 255) and np.all(rgb[8:, 8:] == 255)


def test_overlay_marks_truth(tmp_path):
    render_overlay(np.zeros((16, 16)), np.zeros((2, 2)), (3.0, 4.0), tmp_path / 'o.ppm')
    rgb = _read_ppm(tmp_path / 'o.ppm')
    assert np.all(rgb[2:7, 1:6] == [255, 0, 0])
    assert rgb[:, :, 0].sum() == 25 * 255


def test_overlay_png_deterministic(tmp_path):
    image = np.random.default_rng(0).random((32, 32))
    likelihood = np.random.default_rng(1).random((4, 4))
    render_overlay(image, likelihood, (10.0, 20.0), tmp_path / 'a.png')
    render_overlay(image, likelihood, (10.0, 20.0), tmp_path / 'b.png')
    assert (tmp_path / 'a.png').read_bytes() == (tmp_path / 'b.png').read_bytes()
    assert (tmp_path / 'a.png').read_bytes()[:8] == b'\x89PNG\r\n\x1a\n'


def test_overlay_invalid(tmp_path):
    with pytest.raises(WriteFailure):
        render_overlay(np.zeros((16, 16)), np.ones((3, 3)), None, tmp_path / 'o.ppm')
    with pytest.raises(WriteFailure):
        render_overlay(np.zeros((16, 16)), -np.ones((2, 2)), None, tmp_path / 'o.ppm')


def test_table_from_report_file():
    report = load_report(Path(__file__).parent / 'data' / 'table_report.json')
    lines = format_table(report).splitlines()
    assert _cells(lines[2]) == ['baseline', '1.68px', '96.4%', '200', '0']
    assert _cells(lines[3]) == ['learned', '6.58px', '96.1%', '200', '0']
