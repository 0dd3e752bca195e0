import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctxbias import cam
from ctxbias.core import DetectionRecord, DomainError, read_tensor
from ctxbias.detector import HookError
from ctxbias.detector.model import to_input, upsample
from ctxbias.interventions import baseline_true_positives

from conftest import OracleDetector


class LinearToy:
    """One-channel 'layer' a = x[0] + 0.5 (pixel / 255) and score w * sum(a)."""

    differentiable = True

    def __init__(self, w):
        self.w = w

    def instance_score(self, x, det, layer):
        act = (x[:, :1] + 0.5).detach().requires_grad_()
        return act, self.w * act.sum()


def toy_det(conf=0.9):
    return DetectionRecord("im", 0, (0, 0, 4, 4), conf, cell=0)


def toy_image(seed=0, size=16):
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)


def closed_form_heat(image, w):
    a = image[..., 0].astype(np.float64) / 255.0
    s, hw = a.sum(), a.size
    alpha = w ** 2 / (2 * w ** 2 + s * w ** 3)
    return hw * alpha * max(w, 0.0) * a


# -- GradCAM++ ----------------------------------------------------------------

@pytest.mark.parametrize("w", [0.3, 1.0, 2.5])
def test_linear_toy_matches_closed_form(w):
    image = toy_image()
    heat = cam.smooth_gradcam(LinearToy(w), image, toy_det(), "toy", n_samples=1,
                              noise_sigma=0.0).heat
    expected = closed_form_heat(image, w)
    assert np.allclose(heat, expected, rtol=1e-6, atol=1e-9)
    # Heat is proportional to relu(w) * activation.
    a = image[..., 0] / 255.0
    assert np.allclose(heat / heat.max(), a / a.max(), atol=1e-6)


def test_linear_toy_negative_weight_is_degenerate():
    with pytest.raises(cam.DegenerateMapError):
        cam.smooth_gradcam(LinearToy(-1.0), toy_image(), toy_det(), "toy", 1, 0.0)


def test_zero_gradient_is_degenerate():
    with pytest.raises(cam.DegenerateMapError):
        cam.smooth_gradcam(LinearToy(0.0), toy_image(), toy_det(), "toy", 2, 0.0)


def test_single_channel_heat_invariant_to_score_scale():
    image = toy_image(3)
    a = cam.smooth_gradcam(LinearToy(1.0), image, toy_det(), "toy", 1, 0.0).heat
    b = cam.smooth_gradcam(LinearToy(7.0), image, toy_det(), "toy", 1, 0.0).heat
    assert np.allclose(a / a.max(), b / b.max(), atol=1e-6)


def test_gradcam_pp_ignores_negative_gradients():
    act = torch.ones(2, 3, 3)
    grad = torch.stack([torch.full((3, 3), -1.0), torch.full((3, 3), 1.0)])
    out = cam.gradcam_pp(act, grad)
    # Channel 0 has only negative gradients, so only channel 1 contributes.
    assert torch.allclose(out, cam.gradcam_pp(act[1:], grad[1:]))


# -- smoothing on the detector ------------------------------------------------

@pytest.fixture(scope="module")
def confident_det(trained, small_source):
    base = baseline_true_positives(trained, small_source)
    for i, tps in enumerate(base):
        for iid, d in sorted(tps.items()):
            return small_source.images[i], d
    pytest.skip("quick model found no true positive")


def test_one_noiseless_sample_equals_plain_gradcam(trained, confident_det):
    img, det = confident_det
    got = cam.smooth_gradcam(trained, img.pixels, det, "stage4", n_samples=1, noise_sigma=0.0,
                             min_confidence=0.5).heat
    act, score = trained.instance_score(to_input(img.pixels)[None], det, "stage4")
    (grad,) = torch.autograd.grad(score, act)
    plain = upsample(cam.gradcam_pp(act[0].detach(), grad[0]), img.shape).clamp_min(0).numpy()
    assert np.array_equal(got, plain.astype(np.float64))


def test_smooth_gradcam_deterministic(trained, confident_det):
    img, det = confident_det
    a = cam.smooth_gradcam(trained, img.pixels, det, "stage4", 4, seed=3, min_confidence=0.5)
    b = cam.smooth_gradcam(trained, img.pixels, det, "stage4", 4, seed=3, min_confidence=0.5)
    assert np.array_equal(a.heat, b.heat)
    assert a.heat.shape == img.shape and a.heat.min() >= 0 and a.normalization > 0


def test_cam_preconditions(trained, confident_det, small_source):
    img, det = confident_det
    with pytest.raises(HookError):
        cam.smooth_gradcam(OracleDetector(small_source), img.pixels, det)
    with pytest.raises(DomainError):
        cam.smooth_gradcam(trained, img.pixels, det, min_confidence=1.0)
    with pytest.raises(DomainError):
        cam.smooth_gradcam(trained, img.pixels, det, n_samples=0, min_confidence=0.5)
    with pytest.raises(DomainError):
        cam.smooth_gradcam(trained, img.pixels, DetectionRecord("x", 0, (0, 0, 1, 1), 0.99))


# -- threshold ladder ---------------------------------------------------------

def test_thresholds():
    t = cam.bin_thresholds(2.0)
    assert len(t) == 9
    assert t[:8] == pytest.approx([2.0 * (1 - 0.1 * k) for k in range(1, 9)], abs=1e-12)
    assert t[8] == cam.MIN_THRESHOLD
    with pytest.raises(DomainError):
        cam.bin_thresholds(0.0)


def test_uniform_heat_gives_full_masks():
    inst = np.zeros((8, 8), bool)
    inst[2, 2] = True
    for b in cam.bin_ladder(cam.CamMap("i", "l", np.full((8, 8), 0.7)), inst):
        assert b.mask.all()


def test_indicator_heat_bin1_is_instance():
    inst = np.zeros((10, 10), bool)
    inst[3:6, 4:8] = True
    ladder = cam.bin_ladder(cam.CamMap("i", "l", inst.astype(float)), inst)
    assert np.array_equal(ladder[0].mask, inst)


@given(arrays(np.float64, (12, 12), elements=st.floats(0, 5)),
       arrays(bool, (12, 12)))
@settings(max_examples=100, deadline=None)
def test_ladder_nested_and_contains_instance(heat, inst):
    if heat.max() <= 0 or not inst.any():
        return
    ladder = cam.bin_ladder(cam.CamMap("i", "l", heat), inst)
    for lo, hi in zip(ladder, ladder[1:]):
        assert np.all(hi.mask >= lo.mask)
    for b in ladder:
        assert np.all(b.mask[inst])
    assert cam.hit_ratio([b.mask for b in ladder], [inst] * 9)[0] == 1.0


def test_cam_map_rejects_negative():
    with pytest.raises(DomainError):
        cam.CamMap("i", "l", np.array([[-1.0]]))
    with pytest.raises(DomainError):
        cam.bin_ladder(cam.CamMap("i", "l", np.ones((4, 4))), np.ones((3, 3), bool))


# -- hit ratio ----------------------------------------------------------------

def test_hit_ratio_examples():
    inst = np.zeros((10, 10), bool)
    inst[0, :10] = True
    inst[1, :5] = True                        # 15 instance pixels
    mask = inst.copy()
    mask[5:8, :10] = True                     # plus 30 background pixels
    assert cam.hit_ratio([mask], [inst]) == (1.0, 2.0)
    assert cam.hit_ratio([inst], [inst]) == (1.0, 0.0)
    half = np.zeros_like(inst)
    half[0, :10] = True
    fg, bg = cam.hit_ratio([half, mask], [inst, inst])
    assert fg == pytest.approx((10 / 15 + 1.0) / 2) and bg == pytest.approx(1.0)


def test_hit_ratio_errors():
    with pytest.raises(DomainError):
        cam.hit_ratio([np.ones((3, 3), bool)], [np.zeros((3, 3), bool)])
    with pytest.raises(DomainError):
        cam.hit_ratio([], [])
    with pytest.raises(DomainError):
        cam.hit_ratio([np.ones((3, 3), bool)], [np.ones((4, 4), bool)])


def test_save_cam(tmp_path):
    heat = np.random.default_rng(0).uniform(0, 2, (8, 8))
    m = cam.CamMap("im#0", "stage4", heat)
    cam.save_cam(m, tmp_path / "c.cbt")
    back = read_tensor(tmp_path / "c.cbt")
    assert back.layer == "stage4" and back.provenance == {"instance_ref": "im#0"}
    assert np.array_equal(back.data[0], heat.astype(np.float32))
    assert (tmp_path / "c.png").exists()
