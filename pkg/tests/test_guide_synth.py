import math

import numpy as np
import pytest
from scipy import ndimage

from stackguide.error import InvalidCount, PointAtInfinity, RejectionOverflow
from stackguide.raster import GeoImage, GeoTransform, TargetAnnotation
from stackguide.rng import stream, substream_seed
from stackguide.synth import (
    SamplerConfig, ViewTransform, apply_homography, compose_view, generate_dataset, load_manifest,
    load_sample_image, project_target, sample_view, warp, warp_with_mask
)


def _translation(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def test_stream_is_keyed():
    a = stream(42, 'train', 3).random(4)
    assert np.array_equal(a, stream(42, 'train', 3).random(4))
    assert not np.array_equal(a, stream(42, 'test', 3).random(4))
    assert not np.array_equal(a, stream(43, 'train', 3).random(4))
    assert substream_seed(42, 'train', 3) == substream_seed(42, 'train', 3)


def test_sample_view_no_randomness(textured):
    img, target = textured
    cfg = SamplerConfig(yaw_range=0, zoom_min=1, zoom_max=1, tilt_max=0, jitter_translation=0, view_size=64,
                        target_in_view_margin=8)
    t = sample_view(stream(0, 'train', 0), cfg, [img], target)
    assert np.allclose(t.H[:2, :2], np.eye(2))
    assert np.allclose(t.H[2], [0, 0, 1])
    assert project_target(t, target.pixel('a')) == pytest.approx((32, 32), abs=1e-12)


def test_quarter_turn():
    H = compose_view((0, 0), (0, 0), yaw=math.pi / 2)
    d = apply_homography(H, [[1, 0]])[0] - apply_homography(H, [[0, 0]])[0]
    assert d == pytest.approx([0, 1], abs=1e-12)


def test_sample_view_deterministic(textured):
    img, target = textured
    cfg = SamplerConfig(view_size=64, target_in_view_margin=8, jitter_translation=16)
    a = sample_view(stream(42, 'train', 0), cfg, [img], target)
    b = sample_view(stream(42, 'train', 0), cfg, [img], target)
    assert a.H.tobytes() == b.H.tobytes()


def test_sample_view_target_in_margin(textured):
    img, target = textured
    cfg = SamplerConfig(view_size=64, target_in_view_margin=8, jitter_translation=40)
    for i in range(50):
        t = sample_view(stream(5, 'train', i), cfg, [img], target)
        u, v = project_target(t, target.pixel('a'))
        assert 8 <= u <= 56 and 8 <= v <= 56


def test_rejection_overflow(textured):
    img, target = textured
    cfg = SamplerConfig(view_size=32, target_in_view_margin=15, jitter_translation=1e5, tilt_max=0)
    with pytest.raises(RejectionOverflow):
        sample_view(stream(0, 'train', 0), cfg, [img], target)


def test_sampler_config_invalid():
    with pytest.raises(ValueError):
        SamplerConfig(zoom_min=2, zoom_max=1)
    with pytest.raises(ValueError):
        SamplerConfig(view_size=100)


def test_warp_identity():
    src = np.random.default_rng(0).random((64, 64))
    view = warp(src, ViewTransform(H=np.eye(3), source_image_id='a', view_size=32))
    assert np.array_equal(view, src[:32, :32])


def test_warp_integer_shift():
    src = np.random.default_rng(0).random((64, 64))
    view = warp(src, ViewTransform(H=_translation(3, 0), source_image_id='a', view_size=32))
    assert np.array_equal(view, src[:32, 3:35])


def test_warp_bilinear_midpoint():
    src = np.array([[0.0, 1.0], [0.0, 1.0]])
    view = warp(src, ViewTransform(H=_translation(0.5, 0), source_image_id='a', view_size=1))
    assert view[0, 0] == pytest.approx(0.5)


def test_warp_out_of_bounds_masked():
    src = np.ones((16, 16))
    view, mask = warp_with_mask(src, ViewTransform(H=_translation(-4, 0), source_image_id='a', view_size=8))
    assert not mask[:, :4].any() and mask[:, 4:].all()
    assert np.all(view[:, :4] == 0) and np.all(view[:, 4:] == 1)


def test_warp_matches_nearest_neighbour():
    rng = np.random.default_rng(3)
    src = rng.random((64, 64))
    size = 16
    tried = 0
    while tried < 50:
        A = rng.integers(-1, 2, size=(2, 2)).astype(np.float64)
        if abs(np.linalg.det(A)) < 0.5:
            continue
        tried += 1
        H = np.eye(3)
        H[:2, :2] = A
        H[:2, 2] = rng.integers(16, 48, size=2)
        view, mask = warp_with_mask(src, ViewTransform(H=H, source_image_id='a', view_size=size))
        for j in range(size):
            for i in range(size):
                u, v = (H @ [i, j, 1])[:2].astype(int)
                if 0 <= u < 64 and 0 <= v < 64:
                    assert mask[j, i]
                    assert view[j, i] == src[v, u]


def test_project_target_identity():
    assert project_target(np.eye(3), (10, 20)) == (10, 20)


def test_project_target_translation():
    assert project_target(_translation(5, 7), (10, 20)) == pytest.approx((5, 13))


def test_project_target_inverts_homography():
    rng = np.random.default_rng(4)
    for _ in range(100):
        H = np.eye(3) + 0.1 * rng.standard_normal((3, 3))
        H[2, :2] = 1e-4 * rng.standard_normal(2)
        x = rng.uniform(0, 256, 2)
        p = apply_homography(H, x)[0]
        assert project_target(H, p) == pytest.approx(tuple(x), abs=1e-9)


def test_project_target_at_infinity():
    H = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    with pytest.raises(PointAtInfinity):
        project_target(H, (0, 5))


def test_warp_projection_consistency():
    p_ref = (128.0, 127.0)
    v, u = np.mgrid[0:256, 0:256]
    blob = np.exp(-((u - p_ref[0]) ** 2 + (v - p_ref[1]) ** 2) / (2 * 6.0 ** 2))
    img = GeoImage(pixels=blob, geo=GeoTransform(), image_id='a')
    target = TargetAnnotation(world_position=p_ref, per_image_pixel={'a': p_ref})
    cfg = SamplerConfig(zoom_min=1.0, zoom_max=2.0, tilt_max=0.05, view_size=64, target_in_view_margin=8,
                        jitter_translation=16)
    for i in range(20):
        t = sample_view(stream(9, 'train', i), cfg, [img], target)
        view = warp(img, t)
        row, col = np.unravel_index(np.argmax(view), view.shape)
        pu, pv = project_target(t, p_ref)
        assert abs(col - pu) < 1 and abs(row - pv) < 1


def _stack():
    rng = np.random.default_rng(5)
    stack = []
    for image_id in ('a', 'b'):
        pixels = ndimage.gaussian_filter(rng.random((96, 96)), 1.0)
        stack.append(GeoImage(pixels=pixels / pixels.max(), geo=GeoTransform(), image_id=image_id))
    target = TargetAnnotation(world_position=(48, 48), per_image_pixel={'a': (48, 48), 'b': (48, 48)})
    return stack, target


SMALL = SamplerConfig(view_size=32, target_in_view_margin=4, jitter_translation=8, zoom_min=0.5, zoom_max=1.0)


def test_generate_dataset_deterministic(tmp_path):
    stack, target = _stack()
    a = generate_dataset(stack, target, SMALL, 2, 1, 7, out_dir=tmp_path / 'a')
    b = generate_dataset(stack, target, SMALL, 2, 1, 7, out_dir=tmp_path / 'b')
    assert len(a.samples) == 3
    assert [s.target_px for s in a.samples] == [s.target_px for s in b.samples]
    assert (tmp_path / 'a' / 'manifest.json').read_bytes() == (tmp_path / 'b' / 'manifest.json').read_bytes()
    assert (tmp_path / 'a' / 'train_1.pgm').read_bytes() == (tmp_path / 'b' / 'train_1.pgm').read_bytes()


def test_generate_dataset_threads(tmp_path):
    stack, target = _stack()
    a = generate_dataset(stack, target, SMALL, 4, 2, 7, threads=1)
    b = generate_dataset(stack, target, SMALL, 4, 2, 7, threads=3)
    assert [s.transform.H.tobytes() for s in a.samples] == [s.transform.H.tobytes() for s in b.samples]
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a.samples, b.samples))


def test_generate_dataset_split_images():
    stack, target = _stack()
    manifest = generate_dataset(stack, target, SMALL, 6, 4, 1, split_images={'train': ['a'], 'test': ['b']})
    assert {s.source_image_id for s in manifest.split('train')} == {'a'}
    assert {s.source_image_id for s in manifest.split('test')} == {'b'}


def test_generate_dataset_invalid_count():
    stack, target = _stack()
    with pytest.raises(InvalidCount):
        generate_dataset(stack, target, SMALL, 0, 1, 7)
    with pytest.raises(InvalidCount):
        generate_dataset(stack, target, SMALL, 1, 1, 7, split_images={'train': ['c']})


def test_manifest_reload(tmp_path):
    stack, target = _stack()
    generated = generate_dataset(stack, target, SMALL, 2, 1, 7, out_dir=tmp_path)
    manifest = load_manifest(tmp_path / 'manifest.json')
    assert (manifest.r_train, manifest.r_test) == (2, 1)
    for g, s in zip(generated.samples, manifest.samples):
        assert s.transform.H.tobytes() == g.transform.H.tobytes()
        assert s.target_px == g.target_px
        expected = warp(stack[0] if s.source_image_id == 'a' else stack[1], s.transform)
        assert np.allclose(load_sample_image(manifest, s), expected, atol=1 / 65535)
