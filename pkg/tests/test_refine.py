import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from polycl.refine import (
    RefineConfig,
    RefinementError,
    boxes_intersect_truth,
    mask_to_bboxes,
    refine_slice,
    refine_volume,
)
from polycl.segmenters import (
    EIGHT_CONNECTED,
    BoxPrompt,
    Capabilities,
    NullSegmenter,
    OracleSegmenter,
    PromptableSegmenter,
)
from polycl.volume_io import SliceRecord


def test_single_pixel_box():
    m = np.zeros((10, 10), bool)
    m[3, 7] = True
    assert mask_to_bboxes(m, min_area=1) == [BoxPrompt(7, 3, 7, 3)]
    assert mask_to_bboxes(m, min_area=5) == []
    assert mask_to_bboxes(np.zeros((4, 4), bool)) == []


def test_diagonal_pixels_are_one_component():
    m = np.eye(4, dtype=bool)
    assert mask_to_bboxes(m, min_area=1) == [BoxPrompt(0, 0, 3, 3)]


@settings(max_examples=60)
@given(arrays(bool, (24, 24)))
def test_boxes_are_tight(mask):
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    boxes = mask_to_bboxes(mask, min_area=1)
    assert len(boxes) == n
    for k, box in enumerate(boxes, start=1):
        comp = labels == k
        inside = box.to_mask(mask.shape)
        assert not (comp & ~inside).any()
        rows, cols = np.nonzero(comp)
        assert (rows.min(), rows.max(), cols.min(), cols.max()) == (box.y_min, box.y_max, box.x_min, box.x_max)


def _records(n=6, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for k in range(n):
        img = rng.random((32, 32)).astype(np.float32)
        gt = np.zeros((32, 32), bool)
        r0, c0 = rng.integers(4, 12, 2)
        gt[r0 : r0 + 12, c0 : c0 + 14] = True
        recs.append(SliceRecord("s", k, img, True, gt))
    return recs


def test_erosion_refinement_monotone():
    recs = _records()
    coarse = np.stack([ndimage.binary_erosion(r.mask, iterations=2) for r in recs])
    oracle = OracleSegmenter([(r.pixels, r.mask) for r in recs])
    res = refine_volume(recs, coarse, oracle)
    for row in res.slices:
        assert row.dice_after > row.dice_before
        assert row.dice_after == 1.0
        assert row.hd_after <= row.hd_before


def test_empty_coarse_passes_through():
    recs = _records(2)
    res = refine_volume(recs, np.zeros((2, 32, 32), bool), OracleSegmenter([(r.pixels, r.mask) for r in recs]))
    assert not res.masks.any() and all(row.n_boxes == 0 for row in res.slices)


def test_margin_reaches_nearby_component():
    rec = _records(1)[0]
    coarse = np.zeros_like(rec.mask)
    rows, cols = np.nonzero(rec.mask)
    coarse[rows.min() - 3 : rows.min() - 1, cols.min() : cols.min() + 3] = True  # false positive just outside
    oracle = OracleSegmenter([(rec.pixels, rec.mask)])
    tight, _ = refine_slice(rec.pixels, coarse, oracle)
    padded, boxes = refine_slice(rec.pixels, coarse, oracle, RefineConfig(margin=2))
    assert not tight.any() and len(boxes) == 1
    assert np.array_equal(padded, rec.mask)


def test_errors_are_wrapped_and_capability_checked():
    recs = _records(1)
    with pytest.raises(RefinementError, match="slice 0"):
        refine_volume(recs, recs[0].mask[None], OracleSegmenter())

    class NoBox(PromptableSegmenter):
        capabilities = Capabilities(stateful_propagation=True)

    from polycl.segmenters import UnsupportedCapabilityError

    with pytest.raises(UnsupportedCapabilityError):
        refine_volume(recs, recs[0].mask[None], NoBox())
    with pytest.raises(ValueError):
        refine_volume(recs, np.zeros((2, 32, 32), bool), NullSegmenter())


def test_boxes_intersect_truth():
    gt = np.zeros((8, 8), bool)
    gt[0, 0] = True
    assert boxes_intersect_truth([BoxPrompt(0, 0, 1, 1)], gt)
    assert not boxes_intersect_truth([BoxPrompt(2, 2, 3, 3)], gt)
