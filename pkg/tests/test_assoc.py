import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctxbias import assoc
from ctxbias.core import FeatureTensor, read_array
from ctxbias.interventions import DropEvent


def naive_features(act, cam, inst):
    """Per-cell loops over a grid-sized activation (no numpy reductions)."""
    c, h, w = act.shape
    region = [[bool(cam[y][x]) or bool(inst[y][x]) for x in range(w)] for y in range(h)]
    sq = sum(float(act[k, y, x]) ** 2 for k in range(c) for y in range(h) for x in range(w)
             if region[y][x])
    norm = sq ** 0.5
    xc = np.zeros((c, h, w))
    for k in range(c):
        for y in range(h):
            for x in range(w):
                if region[y][x] and norm > 0:
                    xc[k, y, x] = act[k, y, x] / norm
    fcells = [(y, x) for y in range(h) for x in range(w) if inst[y][x]]
    bcells = [(y, x) for y in range(h) for x in range(w) if region[y][x] and not inst[y][x]]
    f = [sum(xc[k, y, x] for y, x in fcells) / len(fcells) for k in range(c)]
    b = [sum(xc[k, y, x] for y, x in bcells) / len(bcells) for k in range(c)]
    return xc, np.array(f), np.array(b)


# -- extraction ---------------------------------------------------------------

def test_all_ones_activation_gives_equal_constant_vectors():
    act = np.ones((3, 4, 4))
    inst = np.zeros((4, 4), bool)
    inst[:2] = True
    xc, f, b = assoc.extract_features(np.ones((4, 4), bool), inst, act)
    assert np.allclose(f, 0.25 / np.sqrt(3)) and np.allclose(f, b)
    assert np.linalg.norm(xc) == pytest.approx(1.0)


def test_cam_equal_to_instance_has_no_background():
    inst = np.zeros((4, 4), bool)
    inst[1:3, 1:3] = True
    with pytest.raises(assoc.BgFeatureUndefined):
        assoc.extract_features(inst, inst, np.ones((2, 4, 4)))


def test_matches_per_cell_oracle():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(40):
        act = rng.standard_normal((4, 5, 5))
        inst = rng.random((5, 5)) < 0.3
        cam = rng.random((5, 5)) < 0.5
        if not inst.any() or (cam & ~inst).sum() == 0:
            continue
        got = assoc.extract_features(cam, inst, FeatureTensor("stage1", act))
        want = naive_features(act.astype(np.float32).astype(np.float64), cam, inst)
        for g, w in zip(got, want):
            assert np.allclose(g, w, atol=1e-6)
        checked += 1
    assert checked >= 20


def test_image_sized_masks_are_downsampled():
    act = np.arange(16, dtype=float).reshape(1, 4, 4) + 1
    inst = np.zeros((16, 16), bool)
    inst[0:4, 0:4] = True                      # exactly cell (0, 0)
    cam = np.zeros((16, 16), bool)
    cam[0:4, 0:8] = True                       # cells (0, 0) and (0, 1)
    _, f, b = assoc.extract_features(cam, inst, act)
    norm = np.sqrt(1 + 4)
    assert f == pytest.approx([1 / norm]) and b == pytest.approx([2 / norm])


def test_tiny_instance_falls_back_to_centroid_cell():
    inst = np.zeros((16, 16), bool)
    inst[5, 5] = True
    _, f, _ = assoc.extract_features(np.ones((16, 16), bool), inst, np.ones((2, 4, 4)))
    assert np.all(f > 0)


@given(arrays(np.float64, (3, 4, 4), elements=st.floats(-10, 10)),
       arrays(bool, (4, 4)), arrays(bool, (4, 4)))
@settings(max_examples=100, deadline=None)
def test_normalized_tensor_has_unit_or_zero_norm(act, cam, inst):
    if not inst.any() or not (cam & ~inst).any():
        return
    xc, _, _ = assoc.extract_features(cam, inst, act)
    n = np.linalg.norm(xc)
    assert n == 0.0 or abs(n - 1.0) < 1e-9


# -- partition ----------------------------------------------------------------

def _features(ids, rng):
    return {iid: assoc.InstanceFeatures(iid, k, fg, {"stage1": (rng.standard_normal(3),
                                                                 rng.standard_normal(3))})
            for k, (iid, fg) in enumerate(ids)}


def _event(iid, fg):
    return DropEvent("im", iid, fg, "stripes", "info_loss", 0.8, 0.0)


def test_partition_rules():
    rng = np.random.default_rng(1)
    feats = _features([("a", "triangle"), ("b", "triangle"), ("c", "disc")], rng)
    part = assoc.partition([_event("a", "triangle")], [("b", "triangle"), ("c", "disc")],
                           feats, "stripes", "source")
    assert [r.instance_id for r in part.F_a[("triangle", "stripes")]] == ["a"]
    assert [r.instance_id for r in part.F_na[("triangle", "stripes")]] == ["b"]
    assert [r.instance_id for r in part.F_na[("disc", "stripes")]] == ["c"]
    assert all(r.associated for r in part.F_a[("triangle", "stripes")])
    assert part.pairs() == [("disc", "stripes"), ("triangle", "stripes")]
    fs = part.feature_set(("triangle", "stripes"), "stage1", True)
    assert len(fs) == 1 and np.array_equal(fs.f[0], feats["a"].layers["stage1"][0])


def test_all_retained_leaves_associated_empty():
    rng = np.random.default_rng(2)
    feats = _features([("a", "disc")], rng)
    part = assoc.partition([], [("a", "disc")], feats, "dots", "source")
    assert part.F_a == {}
    assert len(part.feature_set(("disc", "dots"), "stage1", True)) == 0


def test_partition_rejects_double_bookkeeping():
    rng = np.random.default_rng(3)
    feats = _features([("a", "disc")], rng)
    with pytest.raises(assoc.BookkeepingError):
        assoc.partition([_event("a", "disc")], [("a", "disc")], feats, "dots", "s")


def test_partition_counts_instances_without_features():
    part = assoc.partition([_event("z", "disc")], [], {}, "dots", "s")
    assert part.missing_features == 1 and part.F_a == {}


@given(st.lists(st.booleans(), min_size=1, max_size=12), st.integers(0, 2 ** 16))
@settings(max_examples=50, deadline=None)
def test_membership_ignores_feature_values(dropped, seed):
    ids = [(f"i{k}", "disc") for k in range(len(dropped))]
    events = [_event(i, fg) for (i, fg), d in zip(ids, dropped) if d]
    kept = [(i, fg) for (i, fg), d in zip(ids, dropped) if not d]
    groups = []
    for s in (seed, seed + 1):
        part = assoc.partition(events, kept, _features(ids, np.random.default_rng(s)), "dots", "s")
        groups.append(({r.instance_id for recs in part.F_a.values() for r in recs},
                       {r.instance_id for recs in part.F_na.values() for r in recs}))
    assert groups[0] == groups[1]
    assert groups[0][0] == {i for (i, _), d in zip(ids, dropped) if d}


# -- balancing ----------------------------------------------------------------

def test_balance_sample():
    na = list(range(10))
    assert assoc.balance_sample(na, na, 0) == (na, False)
    assert assoc.balance_sample([], na, 0) == ([], False)
    sub, low = assoc.balance_sample([0, 1, 2], na, 7)
    assert len(sub) == 3 and not low and set(sub) <= set(na)
    assert assoc.balance_sample([0, 1, 2], na, 7) == (sub, low)
    assert assoc.balance_sample(list(range(12)), na, 0) == (na, True)


def test_balance_sample_is_roughly_uniform():
    counts = np.zeros(10)
    for seed in range(2000):
        for i in assoc.balance_sample([0, 1], list(range(10)), seed)[0]:
            counts[i] += 1
    assert np.all(np.abs(counts / 2000 - 0.2) < 0.04)


# -- persistence --------------------------------------------------------------

def test_feature_store_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    items = [assoc.InstanceFeatures(f"im{k}#0", k, "disc",
                                    {layer: (rng.standard_normal(4), rng.standard_normal(4))
                                     for layer in ("stage1", "stage2")}) for k in range(3)]
    assoc.save_feature_store(tmp_path, "source", items)
    back = assoc.load_feature_store(tmp_path)
    assert sorted(back) == [it.instance_id for it in items]
    for it in items:
        for layer, (f, b) in it.layers.items():
            assert np.allclose(back[it.instance_id].layers[layer][0], f, atol=1e-6)
            assert np.allclose(back[it.instance_id].layers[layer][1], b, atol=1e-6)
    with pytest.raises(assoc.CtxBiasError):
        assoc.load_feature_store(tmp_path / "nothing")


def test_export_partition_index(tmp_path):
    rng = np.random.default_rng(5)
    feats = _features([("a", "triangle"), ("b", "triangle")], rng)
    part = assoc.partition([_event("a", "triangle")], [("b", "triangle")], feats, "stripes", "source")
    assoc.export_partition(tmp_path, part, "source")
    index = json.loads((tmp_path / "index.json").read_text())
    assert {(e["associated"], tuple(e["instances"])) for e in index} == {(True, ("a",)), (False, ("b",))}
    entry = next(e for e in index if e["associated"])
    mat, _ = read_array(tmp_path / entry["f_avg"])
    assert np.allclose(mat[0], feats["a"].layers["stage1"][0], atol=1e-6)
