import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from cisformer.config import SynthConfig
from cisformer.data import (contrast_stats, gt_boundary_from_mask, load_dataset, read_annotations,
                            record_masks, rle_counts_to_string, rle_decode, rle_encode, rle_string_to_counts,
                            save_dataset, synth_generate)
from cisformer.metrics import IOU_THRESHOLDS, InvalidMaskError, evaluate_ap, mask_iou

SMALL = SynthConfig(image_size=64)

# -- synthetic generator ----------------------------------------------------------


def test_same_seed_byte_identical():
    a, b = synth_generate(SMALL, 3, seed=7), synth_generate(SMALL, 3, seed=7)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.masks.tobytes() == y.masks.tobytes()
        assert x.boundaries.tobytes() == y.boundaries.tobytes()


def test_different_seeds_differ():
    assert synth_generate(SMALL, 1, 1)[0].image.tobytes() != synth_generate(SMALL, 1, 2)[0].image.tobytes()


@pytest.mark.parametrize("lo,hi", [(1, 4), (2, 2), (3, 4)])
def test_instance_count_within_range(lo, hi):
    cfg = SynthConfig(image_size=64, min_instances=lo, max_instances=hi)
    for s in synth_generate(cfg, 12, seed=lo * 10 + hi):
        assert lo <= len(s.masks) <= hi


def test_masks_disjoint_nonempty_and_boundaries_inside():
    for s in synth_generate(SMALL, 10, seed=3):
        assert s.masks.sum(0).max() <= 1
        assert all(m.any() for m in s.masks)
        assert np.all(s.boundaries <= s.masks)
        assert s.image.dtype == np.float32 and s.image.min() >= 0 and s.image.max() <= 1


def test_contrast_below_bound_on_100_images():
    cfg = SynthConfig()
    values = [c for s in synth_generate(cfg, 100, seed=0) for c in contrast_stats(s)]
    assert len(values) >= 100
    assert max(values) < cfg.contrast


# -- ground-truth boundaries ----------------------------------------------------------


def test_single_pixel_boundary_is_the_pixel():
    m = np.zeros((7, 7), np.uint8)
    m[3, 4] = 1
    assert np.array_equal(gt_boundary_from_mask(m, 2), m)


def test_full_frame_width_one_is_frame_ring():
    b = gt_boundary_from_mask(np.ones((6, 8), np.uint8), 1)
    ring = np.ones((6, 8), np.uint8)
    ring[1:-1, 1:-1] = 0
    assert np.array_equal(b, ring)


def test_empty_mask_empty_boundary():
    assert not gt_boundary_from_mask(np.zeros((5, 5)), 2).any()


def test_width_must_be_positive():
    with pytest.raises(ValueError):
        gt_boundary_from_mask(np.ones((3, 3)), 0)


def test_boundary_of_separated_union_is_union_of_boundaries():
    a = np.zeros((20, 30), np.uint8)
    b = np.zeros((20, 30), np.uint8)
    a[2:9, 2:12] = 1
    b[10:18, 16:28] = 1
    assert np.array_equal(gt_boundary_from_mask(a | b, 2), gt_boundary_from_mask(a, 2) | gt_boundary_from_mask(b, 2))


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)),
       st.integers(1, 3))
def test_boundary_subset_of_mask_and_near_complement(mask, width):
    b = gt_boundary_from_mask(mask, width).astype(bool)
    assert np.all(b <= mask.astype(bool))
    padded = np.pad(mask.astype(bool), width, constant_values=False)
    near_bg = ndimage.binary_dilation(~padded, np.ones((2 * width + 1,) * 2))[width:-width, width:-width]
    assert np.all(b <= near_bg)


# -- IoU / AP -------------------------------------------------------------------------------


def _box(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), np.uint8)
    m[y0:y1, x0:x1] = 1
    return m


def test_iou_identical_disjoint_and_half_overlap():
    a = _box(10, 10, 0, 4, 0, 4)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, _box(10, 10, 5, 9, 5, 9)) == 0.0
    assert mask_iou(a, _box(10, 10, 0, 4, 2, 6)) == pytest.approx(1 / 3)


def test_iou_both_empty_is_invalid():
    with pytest.raises(InvalidMaskError):
        mask_iou(np.zeros((3, 3)), np.zeros((3, 3)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, (6, 6), elements=st.integers(0, 1)), arrays(np.uint8, (6, 6), elements=st.integers(0, 1)))
def test_iou_symmetric_and_one_iff_equal(a, b):
    if not (a.any() or b.any()):
        return
    assert mask_iou(a, b) == mask_iou(b, a)
    assert (mask_iou(a, b) == 1.0) == np.array_equal(a, b)


def test_ap_perfect_prediction():
    gt = _box(10, 10, 2, 6, 2, 6)
    r = evaluate_ap([[{"mask": gt, "score": 0.9}]], [gt[None]])
    assert r.ap == r.ap50 == r.ap75 == 1.0


def test_ap_iou_point_six():
    gt = _box(10, 10, 0, 10, 0, 6)  # 60 pixels
    pred = _box(10, 10, 0, 10, 0, 10)  # 100 pixels, IoU 0.6
    assert mask_iou(pred, gt) == pytest.approx(0.6)
    r = evaluate_ap([[{"mask": pred, "score": 0.9}]], [gt[None]])
    assert r.ap50 == pytest.approx(1.0, abs=1e-6)
    assert r.ap75 == pytest.approx(0.0, abs=1e-6)
    assert r.ap == pytest.approx(0.2, abs=1e-6)
    assert sum(v == 1.0 for v in r.per_threshold.values()) == 2


def test_ap_no_predictions_is_zero():
    r = evaluate_ap([[]], [_box(8, 8, 0, 3, 0, 3)[None]])
    assert r.ap == r.ap50 == r.ap75 == 0.0


def test_ap_report_structure():
    gt = _box(10, 10, 2, 6, 2, 6)
    r = evaluate_ap([[{"mask": gt, "score": 0.5}]], [gt[None]])
    assert sorted(r.per_threshold) == [round(float(t), 2) for t in IOU_THRESHOLDS]
    assert r.ap == pytest.approx(np.mean(list(r.per_threshold.values())))
    assert r.to_dict()["per_threshold"]["0.50"] == 1.0


def _random_case(rng, n_img=3):
    gts, preds = [], []
    for _ in range(n_img):
        g = []
        for _ in range(rng.integers(1, 4)):
            y, x = rng.integers(0, 12, 2)
            g.append(_box(16, 16, y, y + 4, x, x + 4))
        gts.append(np.stack(g))
        p = []
        for _ in range(rng.integers(0, 6)):
            y, x = rng.integers(0, 12, 2)
            p.append({"mask": _box(16, 16, y, y + rng.integers(2, 5), x, x + rng.integers(2, 5)),
                      "score": float(rng.random())})
        preds.append(p)
    return preds, gts


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_invariant_to_prediction_order(seed):
    rng = np.random.default_rng(seed)
    preds, gts = _random_case(rng)
    shuffled = [[p[i] for i in rng.permutation(len(p))] for p in preds]
    assert evaluate_ap(preds, gts).per_threshold == evaluate_ap(shuffled, gts).per_threshold


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_removing_false_positive_never_lowers_ap(seed):
    rng = np.random.default_rng(seed)
    preds, gts = _random_case(rng)
    fp = {"mask": _box(16, 16, 0, 1, 0, 1), "score": float(rng.random())}  # overlaps nothing enough to match
    with_fp = [p + ([fp] if i == 0 else []) for i, p in enumerate(preds)]
    a, b = evaluate_ap(with_fp, gts), evaluate_ap(preds, gts)
    for t in a.per_threshold:
        assert b.per_threshold[t] >= a.per_threshold[t] - 1e-12


# -- RLE and annotation files -----------------------------------------------------------------


def test_rle_hand_example():
    m = np.array([[0, 1], [1, 1]], np.uint8)
    assert rle_encode(m) == {"counts": [1, 3], "size": [2, 2]}
    assert rle_encode(np.ones((2, 2)))["counts"] == [0, 4]


@settings(max_examples=100, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 15), st.integers(1, 15)), elements=st.integers(0, 1)))
def test_rle_round_trip(mask):
    rle = rle_encode(mask)
    assert sum(rle["counts"]) == mask.size
    assert np.array_equal(rle_decode(rle), mask)
    s = rle_counts_to_string(rle["counts"])
    assert rle_string_to_counts(s) == rle["counts"]
    assert np.array_equal(rle_decode({"counts": s, "size": rle["size"]}), mask)


def test_rle_decode_rejects_wrong_length():
    with pytest.raises(ValueError):
        rle_decode({"counts": [1, 2], "size": [2, 2]})


def test_dataset_round_trip(tmp_path):
    samples = synth_generate(SMALL, 3, seed=5)
    ann = save_dataset(samples, tmp_path, "train")
    loaded = load_dataset(ann)
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.masks, b.masks) and np.array_equal(a.boundaries, b.boundaries)
        assert np.array_equal(np.round(a.image * 255), np.round(b.image * 255))
    rec = read_annotations(ann)[0]
    assert set(rec) == {"image_id", "file_name", "height", "width", "instances"}
    assert set(rec["instances"][0]) == {"rle_counts", "rle_size"}


def test_reads_coco_instances_file(tmp_path):
    m = _box(6, 5, 1, 4, 1, 3)
    rle = rle_encode(m)
    coco = {"images": [{"id": 9, "file_name": "a.png", "height": 6, "width": 5}],
            "annotations": [{"image_id": 9, "segmentation": {"counts": rle_counts_to_string(rle["counts"]),
                                                              "size": rle["size"]}}]}
    path = tmp_path / "coco.json"
    path.write_text(json.dumps(coco))
    (rec,) = read_annotations(path)
    assert rec["image_id"] == 9 and np.array_equal(record_masks(rec)[0], m)
