import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxbias import interventions as iv
from ctxbias.core import (Dataset, DetectionRecord, DimensionError, DomainError, ImageRecord,
                          InstanceAnnotation, SemanticMap, mask_to_bbox)
from ctxbias.detector import match_detections
from ctxbias.synthbench import generate, shape_mask

from conftest import ConstantDetector, OracleDetector


def one_instance_image(image_id="im", size=32, cls=0):
    m = shape_mask("disc", 12, size, 8, 8)
    pixels = np.full((size, size, 3), 250, np.uint8)
    inst = InstanceAnnotation(image_id, cls, mask_to_bbox(m), m, 0)
    return ImageRecord(image_id, pixels, SemanticMap(image_id, np.zeros((size, size))), (inst,)), m


# -- loss of information ------------------------------------------------------

def test_loss_of_information_examples():
    assert iv.loss_of_information(0.1) == 1.0
    assert iv.loss_of_information(1.0) == 0.0
    assert iv.loss_of_information(0.01) == pytest.approx(2.0, abs=1e-12)
    assert iv.loss_of_information(0.0) == pytest.approx(12.0)
    for bad in (-0.1, 1.5):
        with pytest.raises(DomainError):
            iv.loss_of_information(bad)


def test_severe_loss_boundary_is_exact():
    assert not iv.severe_loss(0.1)
    assert iv.severe_loss(float(np.nextafter(0.1, 0.0)))
    with pytest.raises(DomainError):
        iv.severe_loss(2.0)


@given(st.floats(0.0, 1.0))
def test_severe_loss_agrees_with_log_away_from_boundary(x):
    if abs(x - 0.1) > 1e-12:
        assert iv.severe_loss(x) == (iv.loss_of_information(x) > 1.0)
    assert iv.loss_of_information(x) >= 0.0


# -- compositing --------------------------------------------------------------

def test_composite_with_own_image_is_identity(small_source):
    img = small_source.images[0]
    out = iv.composite_background(img.pixels, img.instances, img.pixels)
    assert np.array_equal(out, img.pixels)


def test_composite_full_mask_is_identity():
    m = np.ones((16, 16), bool)
    inst = InstanceAnnotation("im", 0, (0, 0, 16, 16), m)
    image = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    out = iv.composite_background(image, [inst], np.zeros_like(image))
    assert np.array_equal(out, image)


def test_composite_checkerboard_diff_count():
    img, m = one_instance_image()
    yy, xx = np.mgrid[0:32, 0:32]
    checker = np.where(((yy // 4 + xx // 4) % 2 == 0)[..., None], 0, 128).astype(np.uint8)
    checker = np.repeat(checker, 3, axis=2)
    out = iv.composite_background(img.pixels, img.instances, checker)
    differs = np.any(out != checker, axis=2)
    assert differs.sum() == m.sum()
    assert np.array_equal(differs, m)


def test_composite_without_instances_warns():
    bg = np.zeros((8, 8, 3), np.uint8)
    with pytest.warns(UserWarning):
        out = iv.composite_background(np.ones((8, 8, 3), np.uint8), [], bg)
    assert np.array_equal(out, bg)


def test_composite_shape_mismatch():
    img, _ = one_instance_image()
    with pytest.raises(DimensionError):
        iv.composite_background(img.pixels, img.instances, np.zeros((8, 8, 3), np.uint8))


def test_fit_background_resizes():
    bg = np.zeros((10, 20, 4), np.uint8)
    assert iv.fit_background(bg, (32, 32)).shape == (32, 32, 3)


# -- drop classification ------------------------------------------------------

def _gt_pair():
    a = InstanceAnnotation("im", 0, (0, 0, 10, 10), np.pad(np.ones((10, 10), bool), (0, 30)), 0)
    mb = np.zeros((40, 40), bool)
    mb[0:10, 6:16] = True
    b = InstanceAnnotation("im", 0, (6, 0, 10, 10), mb, 1)
    return a, b


def test_classify_drop_reasons():
    a, b = _gt_pair()
    before = DetectionRecord("im", 0, (0, 0, 10, 10), 0.9, "im#0", 1.0)
    same = match_detections([DetectionRecord("im", 0, (0, 0, 10, 10), 0.9)], [a, b])
    assert iv.classify_drop(a, before, same) == (None, 1.0)
    changed = match_detections([DetectionRecord("im", 1, (0, 0, 10, 10), 0.9)], [a, b])
    assert iv.classify_drop(a, before, changed)[0] == "class_changed"
    gone = match_detections([DetectionRecord("im", 0, (30, 30, 5, 5), 0.9)], [a, b])
    assert iv.classify_drop(a, before, gone)[0] == "info_loss"
    assert iv.classify_drop(a, before, [])[0] == "info_loss"
    # The surviving box now sits closer to the neighbour and is matched to it.
    moved = match_detections([DetectionRecord("im", 0, (4, 0, 10, 10), 0.9)], [a, b])
    assert moved[0].matched_gt == "im#1"
    assert iv.classify_drop(a, before, moved)[0] == "rematched"


def test_drop_event_reason_validated():
    with pytest.raises(DomainError):
        iv.DropEvent("im", "im#0", "disc", "flat", "vanished", 0.9, 0.0)


def test_pair_count_absent_not_zero():
    assert iv.PairCount().drop_rate is None
    assert iv.TrialResult(1).drop_rate(("disc", "flat")) is None


def test_trial_indices():
    a = iv.trial_indices(100, 3, 7)
    assert np.array_equal(a, iv.trial_indices(100, 3, 7))
    assert len(a) == 80 and np.all(np.diff(a) > 0)
    assert not np.array_equal(a, iv.trial_indices(100, 4, 7))
    assert np.array_equal(iv.trial_indices(5, 1, 0, 1.0), np.arange(5))


# -- image space --------------------------------------------------------------

def test_identity_pool_reproduces_baseline(trained, small_source, small_target):
    # One image per domain and a pool holding exactly that image: every
    # composite equals the original.
    src, tgt = small_source.subset([0]), small_target.subset([0])
    pool = [src.images[0].pixels]
    res = iv.run_q1_image_space(trained, {"s": src}, pool, n_trials=3, seed=0)
    s = res["summary"]["s"]
    assert s["trials"] == [s["baseline"]] * 3 and s["std"] == 0.0
    res = iv.run_q1_image_space(trained, {"t": tgt}, [tgt.images[0].pixels], n_trials=2)
    assert res["summary"]["t"]["mean"] == res["summary"]["t"]["baseline"]


def test_constant_model_has_zero_std(small_source):
    model = ConstantDetector([(0, (10, 10, 12, 12), 0.9), (1, (40, 40, 12, 12), 0.8)])
    pool = [np.zeros((64, 64, 3), np.uint8), np.full((64, 64, 3), 255, np.uint8)]
    res = iv.run_q1_image_space(model, {"s": small_source}, pool, n_trials=6, seed=1)
    assert len(res["trials"]) == 6 and res["summary"]["s"]["std"] == 0.0


def test_image_space_sequence_deterministic(trained, small_source):
    pool = [np.full((64, 64, 3), v, np.uint8) for v in (0, 90, 180)]
    a = iv.run_q1_image_space(trained, {"s": small_source}, pool, n_trials=2, seed=5)
    b = iv.run_q1_image_space(trained, {"s": small_source}, pool, n_trials=2, seed=5)
    assert a["summary"] == b["summary"]


def test_image_space_config_errors(trained, small_source, spec):
    with pytest.raises(iv.ConfigError):
        iv.run_q1_image_space(trained, {"s": small_source}, [], n_trials=1)
    with pytest.raises(iv.ConfigError):
        iv.run_q1_image_space(trained, {"s": Dataset(spec.label_space, [])},
                              [np.zeros((64, 64, 3), np.uint8)])


# -- feature space ------------------------------------------------------------

def test_unchanged_detections_give_no_drops(small_source):
    model = OracleDetector(small_source)
    res = iv.run_q1_feature_space(model, small_source, "stripes")
    assert res["events"] == []
    assert all(pc.drops == 0 and pc.tp > 0 for pc in res["pairs"].values())


def test_absent_label_contributes_nothing(small_source):
    space = small_source.label_space
    bg = space.bg_id("dots")
    model = OracleDetector(small_source)
    outcomes = iv.feature_space_outcomes(model, small_source, "dots")
    with_label = {i for i, im in enumerate(small_source.images) if (im.semantic.labels == bg).any()}
    assert {o.image_index for o in outcomes} == with_label
    without = small_source.subset(sorted(set(range(len(small_source))) - with_label))
    with pytest.warns(UserWarning):
        assert iv.run_q1_feature_space(model, without, "dots")["pairs"] == {}


def test_unknown_layer_rejected(small_source):
    with pytest.raises(iv.ConfigError):
        iv.feature_space_outcomes(OracleDetector(small_source), small_source, "dots", "stage9")


def test_drop_events_grounded_in_baseline(trained, spec):
    ds = generate(spec, 40, "source")
    res = iv.run_q1_feature_space(trained, ds, "stripes")
    rerun = iv.baseline_true_positives(trained, ds)
    by_id = {img.image_id: i for i, img in enumerate(ds.images)}
    for e in res["events"]:
        det = rerun[by_id[e.image_id]][e.instance_id]
        assert det.iou_with_match == e.iou_before >= 0.5
    for pc in res["pairs"].values():
        assert 0 <= pc.drops <= pc.tp and 0.0 <= pc.drop_rate <= 1.0


def test_feature_trials_deterministic(trained, small_source):
    a = iv.run_q1_feature_trials(trained, small_source, ["stripes", "flat"], n_trials=3, seed=2)
    b = iv.run_q1_feature_trials(trained, small_source, ["stripes", "flat"], n_trials=3, seed=2)
    assert [(t.tps, t.drops) for t in a["trials"]] == [(t.tps, t.drops) for t in b["trials"]]
    for t in a["trials"]:
        assert all(t.drops.get(p, 0) <= n for p, n in t.tps.items())


# -- CAM bins -----------------------------------------------------------------

def test_full_image_bin_mask_gives_zero_drop(trained, spec):
    ds = generate(spec, 30, "source")
    base = iv.baseline_true_positives(trained, ds)
    full = {iid: {1: np.ones((64, 64), bool)} for tp in base for iid in tp}
    res = iv.run_q2_cam_bins(trained, ds, bins=[1], confidence=0.5, n_samples=2,
                             bin_masks=full)
    assert res["n_instances"] > 0
    assert res["per_bin"][1] == 0.0


def test_cam_bins_validate_range(trained, small_source):
    with pytest.raises(iv.ConfigError):
        iv.run_q2_cam_bins(trained, small_source, bins=[0, 10])


def test_cam_bins_warn_without_confident_instances(untrained, small_source):
    with pytest.warns(UserWarning):
        res = iv.run_q2_cam_bins(untrained, small_source.subset([0, 1]), bins=[1], confidence=0.99)
    assert res["per_bin"][1] is None


# -- pinned benchmark ---------------------------------------------------------

def test_pinned_background_swap_costs_five_points(pinned_run):
    summary = json.loads((pinned_run / "q1_image.json").read_text())["summary"]
    for dom, s in summary.items():
        assert s["mean"] <= s["baseline"] - 0.05, dom


def test_pinned_bin_decay_is_monotone_at_reported_rungs(pinned_run):
    per_bin = json.loads((pinned_run / "q2_cam.json").read_text())["domains"]["source"]["per_bin"]
    assert per_bin["1"] > per_bin["5"] > per_bin["9"]
    assert per_bin["9"] <= 0.1
    assert not math.isnan(per_bin["1"])
