import numpy as np
import pytest
from scipy import stats

from ctxbias.core import SchemaError, write_dataset
from ctxbias.synthbench import (DomainSpec, GenerationError, SceneSpec, background_pool,
                                cooccurrence, generate, host_label, scene_spec_from_dict,
                                shape_mask)

from conftest import PLANTED, make_spec


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_gives_byte_identical_datasets(tmp_path, spec):
    write_dataset(generate(spec, 12, "source"), tmp_path / "a")
    write_dataset(generate(spec, 12, "source"), tmp_path / "b")
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_different_seed_differs(spec):
    a = generate(spec, 3, "source")
    b = generate(make_spec(seed=1), 3, "source")
    assert any(not np.array_equal(x.pixels, y.pixels) for x, y in zip(a.images, b.images))


def test_uniform_association_gives_uniform_cooccurrence():
    s = make_spec(domains={"a": DomainSpec(), "b": DomainSpec()})
    counts = cooccurrence(generate(s, 400, "a"))
    freq = counts / counts.sum(axis=1, keepdims=True)
    assert np.all(np.abs(freq - 0.25) <= 0.05)


def test_planted_association_within_tolerance():
    s = make_spec()
    ds = generate(s, 500, "source")
    counts = cooccurrence(ds)
    space = ds.label_space
    freq = counts / counts.sum(axis=1, keepdims=True)
    p_stripes = freq[space.fg_id("triangle"), space.bg_id("stripes") - space.n_fg]
    assert 0.90 <= p_stripes <= 1.0
    for fg in space.fg_classes:
        target = s.association_row("source", fg)
        assert np.all(np.abs(freq[space.fg_id(fg)] - target) <= 0.05), fg


def test_masks_consistent_with_semantic_map(small_source):
    space = small_source.label_space
    for img in small_source.images:
        for inst in img.instances:
            assert np.all(img.semantic.labels[inst.instance_mask] == inst.class_id)
            assert host_label(img.semantic.labels, inst.instance_mask, space) >= space.n_fg
        assert img.semantic.labels.shape == img.shape
        assert img.semantic.labels.max() < space.n_labels


def test_instances_do_not_overlap(small_source):
    for img in small_source.images:
        cover = np.zeros(img.shape, int)
        for inst in img.instances:
            cover += inst.instance_mask
        assert cover.max() <= 1


def test_domain_shift_leaves_fg_geometry_alone():
    s = make_spec()
    areas = {d: [int(i.instance_mask.sum()) for i in generate(s, 300, d).annotations()]
             for d in ("source", "target")}
    assert stats.ks_2samp(areas["source"], areas["target"]).pvalue > 0.05


def test_brightness_offset_shifts_pixels():
    dom = {"a": DomainSpec(association=PLANTED), "b": DomainSpec(association=PLANTED, brightness=-30)}
    s = make_spec(domains=dom)
    a, b = generate(s, 5, "a"), generate(s, 5, "b")
    assert np.mean([im.pixels.mean() for im in b.images]) < np.mean([im.pixels.mean() for im in a.images])


def test_infeasible_placement_is_generation_error():
    s = make_spec(size_range=(30, 31))
    with pytest.raises(GenerationError):
        generate(s, 1, "source")


def test_generate_preconditions(spec):
    with pytest.raises(GenerationError):
        generate(spec, 0, "source")
    with pytest.raises(GenerationError):
        generate(spec, 1, "nowhere")


@pytest.mark.parametrize("bad", [
    {"domains": {"a": {}}},
    {"fg_classes": ["disc"]},
    {"domains": {"a": {"association": {"disc": {"flat": 0.7}}}, "b": {}}},
    {"bg_labels": ["stripes", "lava"]},
])
def test_scene_spec_validation(bad):
    doc = {"domains": {"a": {}, "b": {}}}
    doc.update(bad)
    with pytest.raises(SchemaError):
        scene_spec_from_dict(doc)


def test_shape_masks_fit_their_box():
    for kind in ("disc", "triangle", "cross", "square"):
        m = shape_mask(kind, 12, 32, 5, 7)
        ys, xs = np.nonzero(m)
        assert m.any() and xs.min() >= 5 and xs.max() < 17 and ys.min() >= 7 and ys.max() < 19


def test_background_pool_deterministic():
    a, b = background_pool(4, 32, 3), background_pool(4, 32, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].shape == (32, 32, 3) and a[0].dtype == np.uint8


def test_spec_row_defaults_to_uniform():
    s = SceneSpec(domains={"a": DomainSpec(), "b": DomainSpec()})
    assert np.allclose(s.association_row("a", "disc"), 0.25)
    assert s.dominant_label("a", "disc") is None
