"""Smooth-GradCAM++ saliency, threshold-ladder binarization and hit ratios."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core import CtxBiasError, DetectionRecord, DomainError, FeatureTensor, write_tensor
from .detector.model import HookError, to_input, upsample

N_BINS = 9
REPORTED_BINS = (1, 3, 5, 7, 9)
MIN_THRESHOLD = 1e-9


class DegenerateMapError(CtxBiasError):
    pass


@dataclass(frozen=True, eq=False)
class CamMap:
    instance_ref: str
    layer: str
    heat: np.ndarray

    def __post_init__(self):
        heat = np.asarray(self.heat, dtype=np.float64)
        if not np.all(np.isfinite(heat)) or heat.min() < 0:
            raise DomainError("CAM heat must be finite and non-negative")
        object.__setattr__(self, "heat", heat)

    @property
    def normalization(self) -> float:
        return float(self.heat.max())


@dataclass(frozen=True, eq=False)
class BinMask:
    k: int
    threshold: float
    mask: np.ndarray


def gradcam_pp(activation: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """GradCAM++ map from one (C, H, W) activation and its score gradient."""
    g2 = grad.pow(2)
    g3 = grad.pow(3)
    act_sum = activation.sum(dim=(1, 2), keepdim=True)
    denom = 2 * g2 + act_sum * g3
    denom = torch.where(denom != 0, denom, torch.ones_like(denom))
    alpha = torch.where(grad != 0, g2 / denom, torch.zeros_like(g2))
    weights = (alpha * torch.relu(grad)).sum(dim=(1, 2))
    return torch.relu((weights[:, None, None] * activation).sum(dim=0))


def smooth_gradcam(model, image: np.ndarray, det: DetectionRecord, layer: str = "stage4",
                   n_samples: int = 8, noise_sigma: float | None = None, seed: int = 0,
                   min_confidence: float = 0.85, instance_ref: str | None = None) -> CamMap:
    """Average GradCAM++ over ``n_samples`` noisy copies of the input.

    ``noise_sigma`` is in the model's input units; the default is a tenth of
    the input's dynamic range.  Maps are upsampled bilinearly to image size.
    """
    if not getattr(model, "differentiable", False):
        raise HookError("adapter has no differentiable score path; CAM is unavailable")
    if det.cell is None:
        raise DomainError("detection carries no cell index to backpropagate from")
    if det.confidence < min_confidence:
        raise DomainError(f"detection confidence {det.confidence:.3f} below {min_confidence}")
    if n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    base = to_input(image)[None]
    if noise_sigma is None:
        noise_sigma = 0.1 * float(base.max() - base.min())
    gen = torch.Generator().manual_seed(seed)
    total = None
    any_grad = False
    for _ in range(n_samples):
        x = base
        if noise_sigma > 0:
            x = base + noise_sigma * torch.randn(base.shape, generator=gen)
        act, score = model.instance_score(x, det, layer)
        (grad,) = torch.autograd.grad(score, act)
        any_grad = any_grad or bool(torch.any(grad != 0))
        cam = gradcam_pp(act[0].detach(), grad[0])
        total = cam if total is None else total + cam
    if not any_grad:
        raise DegenerateMapError(f"zero gradient everywhere for {instance_ref or det.image_id}")
    heat = upsample(total / n_samples, tuple(image.shape[:2])).clamp_min(0.0)
    if float(heat.max()) <= 0:
        raise DegenerateMapError(f"all-zero CAM for {instance_ref or det.image_id}")
    return CamMap(instance_ref or det.image_id, layer, heat.numpy().astype(np.float64))


def bin_thresholds(max_heat: float, n_bins: int = N_BINS) -> list[float]:
    """Relative rungs 0.9, 0.8, ... of the map maximum; the last rung is 1e-9."""
    if not max_heat > 0:
        raise DomainError("CAM maximum must be positive")
    out = []
    for k in range(1, n_bins + 1):
        frac = 1.0 - 0.1 * k if k < n_bins else 0.0
        out.append(max(max_heat * frac, MIN_THRESHOLD))
    return out


def bin_ladder(cam: CamMap, instance_mask: np.ndarray, n_bins: int = N_BINS) -> list[BinMask]:
    inst = np.asarray(instance_mask, dtype=bool)
    if inst.shape != cam.heat.shape:
        raise DomainError("instance mask and CAM differ in shape")
    return [BinMask(k, t, (cam.heat >= t) | inst)
            for k, t in enumerate(bin_thresholds(cam.normalization, n_bins), start=1)]


def hit_ratio(cam_masks: Sequence[np.ndarray], instance_masks: Sequence[np.ndarray]
              ) -> tuple[float, float]:
    """Mean foreground and background hit, both relative to instance area."""
    fg_hits, bg_hits = [], []
    for mask, inst in zip(cam_masks, instance_masks, strict=True):
        mask = np.asarray(mask, dtype=bool)
        inst = np.asarray(inst, dtype=bool)
        if mask.shape != inst.shape:
            raise DomainError("CAM mask and instance mask differ in shape")
        area = int(inst.sum())
        if area == 0:
            raise DomainError("empty instance mask")
        fg_hits.append((mask & inst).sum() / area)
        bg_hits.append((mask & ~inst).sum() / area)
    if not fg_hits:
        raise DomainError("no instances to average")
    return float(np.mean(fg_hits)), float(np.mean(bg_hits))


def save_cam(cam: CamMap, path: str | Path, png: bool = True) -> None:
    """Write the map as a CBT1 tensor and, optionally, a colour-mapped PNG."""
    path = Path(path)
    write_tensor(FeatureTensor(cam.layer, cam.heat[None].astype(np.float32),
                               {"instance_ref": cam.instance_ref}), path)
    if png:
        from matplotlib import colormaps
        from PIL import Image

        norm = cam.heat / cam.normalization
        rgba = colormaps["inferno"](norm)
        Image.fromarray((rgba[..., :3] * 255).astype(np.uint8)).save(path.with_suffix(".png"))
