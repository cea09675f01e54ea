"""Segmenter backends: oracle, noisy-oracle, recorded."""

import numpy as np
import pytest

from noduleseg import dataio, segmenter
from noduleseg.errors import MissingPredictionError, ValidationError
from noduleseg.geometry import Box, generate_prompts


def make_scene(rng, size=48):
    gt = np.zeros((size, size), dtype=np.uint8)
    gt[12:30, 10:26] = 1
    img = dataio.Image("scene0", rng.random((size, size), dtype=np.float32))
    return img, gt


@pytest.fixture()
def scene(rng):
    return make_scene(rng)


def test_oracle_is_gt_clipped_to_box(scene):
    img, gt = scene
    seg = segmenter.OracleSegmenter({"scene0": gt})
    box = Box(14.0, 8.0, 40.0, 20.5)
    out = seg.segment(img, box)
    ref = np.zeros_like(gt)
    ref[8:21, 14:40] = gt[8:21, 14:40]
    assert np.array_equal(out, ref)
    assert not out[~box.pixel_mask(*gt.shape).astype(bool)].any()


def test_oracle_shape_mismatch(scene):
    img, gt = scene
    seg = segmenter.OracleSegmenter({"scene0": gt[:-1]})
    with pytest.raises(ValidationError, match="shape"):
        seg.segment(img, Box(0, 0, 10, 10))


def test_empty_rasterization_rejected(scene):
    img, gt = scene
    seg = segmenter.OracleSegmenter({"scene0": gt})
    with pytest.raises(ValidationError, match="empty"):
        seg.segment(img, Box(100.0, 100.0, 120.0, 120.0))


def test_disk_structure_small_radii():
    assert segmenter.disk_structure(0).shape == (1, 1)
    d1 = segmenter.disk_structure(1)
    assert d1.sum() == 5  # plus shape
    assert segmenter.disk_structure(2).sum() == 13


def test_noisy_oracle_deterministic_and_confined(scene):
    img, gt = scene
    box = Box(8.0, 10.0, 28.0, 32.0)
    seg = segmenter.NoisyOracleSegmenter({"scene0": gt}, seed=0, radius=2)
    a = seg.segment(img, box)
    b = seg.segment(img, box)
    assert np.array_equal(a, b)
    inside = box.pixel_mask(*gt.shape).astype(bool)
    assert not a[~inside].any()


def test_noisy_oracle_erode_dilate_direction(scene):
    img, gt = scene
    box = Box(6.0, 8.0, 30.0, 34.0)
    base = segmenter.OracleSegmenter({"scene0": gt}).segment(img, box)
    for seed in range(6):
        seg = segmenter.NoisyOracleSegmenter({"scene0": gt}, seed=seed, radius=2)
        out = seg.segment(img, box)
        if seg._erode_not_dilate(img.id, box):
            assert (out <= base).all() and out.sum() < base.sum()
        else:
            assert (out >= base).all() and out.sum() > base.sum()


def test_noisy_oracle_seed_changes_some_outputs(scene):
    img, gt = scene
    boxes = [Box(6, 8, 30, 34), Box(10, 10, 27, 31), Box(4, 2, 44, 40)]
    a = segmenter.NoisyOracleSegmenter({"scene0": gt}, seed=0, radius=2)
    b = segmenter.NoisyOracleSegmenter({"scene0": gt}, seed=1, radius=2)
    diffs = sum(
        not np.array_equal(a.segment(img, bx), b.segment(img, bx)) for bx in boxes
    )
    assert diffs > 0


def test_noisy_oracle_radius_zero_is_oracle(scene):
    img, gt = scene
    box = Box(6.0, 8.0, 30.0, 34.0)
    noisy = segmenter.NoisyOracleSegmenter({"scene0": gt}, seed=3, radius=0)
    clean = segmenter.OracleSegmenter({"scene0": gt})
    assert np.array_equal(noisy.segment(img, box), clean.segment(img, box))


def test_segment_all_order_and_nesting(scene, rng):
    img, gt = scene
    ann = dataio.AspectRatioAnnotation(
        "scene0", (10.0, 20.0), (25.0, 22.0), (17.0, 13.0), (18.0, 29.0))
    prompts = generate_prompts(ann)
    seg = segmenter.OracleSegmenter({"scene0": gt})
    m1, m2, m3 = seg.segment_all(img, prompts)
    # wider boxes keep at least as much of the gt
    assert m1.sum() <= m2.sum() <= m3.sum() or m1.sum() <= m3.sum()
    assert np.array_equal(m1, seg.segment(img, prompts["b1"]))


def test_recorded_roundtrip(tmp_path, scene):
    img, gt = scene
    box = Box(8.0, 10.0, 28.0, 32.0)
    oracle = segmenter.OracleSegmenter({"scene0": gt})
    pred = oracle.segment(img, box)
    dataio.save_mask(pred, tmp_path / "scene0__b2.png")
    seg = segmenter.RecordedSegmenter(tmp_path)
    out = seg.segment(img, box, "b2")
    assert np.array_equal(out, pred)


def test_recorded_missing_prediction(tmp_path, scene):
    img, _ = scene
    seg = segmenter.RecordedSegmenter(tmp_path)
    with pytest.raises(MissingPredictionError, match="scene0__b1.png"):
        seg.segment(img, Box(0, 0, 10, 10), "b1")


def test_recorded_rejects_out_of_box_foreground(tmp_path, scene):
    img, gt = scene
    full = np.ones_like(gt)
    dataio.save_mask(full, tmp_path / "scene0__b1.png")
    seg = segmenter.RecordedSegmenter(tmp_path)
    with pytest.raises(ValidationError, match="outside"):
        seg.segment(img, Box(5.0, 5.0, 20.0, 20.0), "b1")


def test_make_segmenter_factory(tmp_path, scene):
    _, gt = scene
    lookup = {"scene0": gt}
    assert isinstance(segmenter.make_segmenter("oracle", lookup),
                      segmenter.OracleSegmenter)
    s = segmenter.make_segmenter("noisy-oracle", lookup, seed=7, radius=3)
    assert (s.seed, s.radius) == (7, 3)
    assert isinstance(segmenter.make_segmenter("recorded", pred_dir=tmp_path),
                      segmenter.RecordedSegmenter)
    with pytest.raises(ValidationError):
        segmenter.make_segmenter("magic")


def test_gt_lookup_from_dataset(small_dataset):
    index = dataio.load_dataset(small_dataset)
    lookup = segmenter.gt_lookup_from_dataset(index)
    gt = lookup(index.entries[0].image_id)
    dataio.validate_mask(gt)
    assert np.array_equal(gt, lookup(index.entries[0].image_id))
    with pytest.raises(ValidationError):
        lookup("no-such-id")
