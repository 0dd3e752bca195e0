"""Background interventions and drop bookkeeping.

Three protocols are implemented:

* image space: foregrounds are pasted onto backgrounds drawn from a pool and
  mAP@50 is re-measured (``run_q1_image_space``);
* feature space: activations under one background label are zeroed at a
  shallow layer and prior true positives are checked for drops
  (``run_q1_feature_space``);
* CAM bins: everything outside a thresholded CAM mask (always including the
  instance itself) is zeroed and drops are counted per threshold rung
  (``run_q2_cam_bins``).
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from PIL import Image

from . import cam as cammod
from .core import (CtxBiasError, Dataset, DetectionRecord, DimensionError, DomainError,
                   ImageRecord, InstanceAnnotation, iou)
from .detector.evaluate import map50, match_detections
from .detector.model import AblationHook

log = logging.getLogger(__name__)

REASONS = ("class_changed", "info_loss", "rematched")
MIN_SUPPORT = 5
LOSS_THRESHOLD = 1.0


class ConfigError(CtxBiasError):
    pass


@dataclass(frozen=True)
class DropEvent:
    image_id: str
    instance_id: str
    fg_class: str
    removed: str
    reason: str
    iou_before: float
    iou_after: float

    def __post_init__(self):
        if self.reason not in REASONS:
            raise DomainError(f"unknown drop reason {self.reason!r}")


@dataclass
class PairCount:
    tp: int = 0
    drops: int = 0

    @property
    def drop_rate(self) -> float | None:
        return self.drops / self.tp if self.tp else None


@dataclass
class TrialResult:
    trial: int
    drops: dict[tuple[str, str], int] = field(default_factory=dict)
    tps: dict[tuple[str, str], int] = field(default_factory=dict)
    map50: dict[str, float] = field(default_factory=dict)

    def drop_rate(self, pair: tuple[str, str]) -> float | None:
        tp = self.tps.get(pair, 0)
        return self.drops.get(pair, 0) / tp if tp else None


def loss_of_information(iou_after: float) -> float:
    """``-log10`` of the post-intervention IoU; above 1.0 means IoU fell under 0.1."""
    if not 0.0 <= iou_after <= 1.0:
        raise DomainError(f"iou_after {iou_after} outside [0, 1]")
    return -math.log10(max(iou_after, 1e-12))


def severe_loss(iou_after: float) -> bool:
    """``loss_of_information(iou_after) > 1.0``, decided exactly as ``iou_after < 0.1``.

    Comparing the logarithm would misclassify IoUs one ulp below 0.1, whose
    rounded ``-log10`` is exactly 1.0.
    """
    if not 0.0 <= iou_after <= 1.0:
        raise DomainError(f"iou_after {iou_after} outside [0, 1]")
    return iou_after < 10.0 ** -LOSS_THRESHOLD


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([seed, trial, 0x71])


def trial_indices(n: int, trial: int, seed: int, fraction: float = 0.8) -> np.ndarray:
    """Image subsample used by one trial; a pure function of (seed, trial)."""
    if fraction >= 1.0:
        return np.arange(n)
    k = max(1, int(round(n * fraction)))
    return np.sort(trial_rng(seed, trial).choice(n, size=k, replace=False))


# -- image space --------------------------------------------------------------

def fit_background(bg: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    bg = np.asarray(bg, dtype=np.uint8)[..., :3]
    if bg.shape[:2] == tuple(shape):
        return bg
    return np.asarray(Image.fromarray(bg).resize((shape[1], shape[0]), Image.BILINEAR))


def composite_background(image: np.ndarray, annotations: Sequence[InstanceAnnotation],
                         bg_image: np.ndarray) -> np.ndarray:
    """Keep instance pixels of ``image``; take every other pixel from ``bg_image``."""
    image = np.asarray(image)
    bg_image = np.asarray(bg_image)
    if bg_image.shape != image.shape:
        raise DimensionError(f"background {bg_image.shape} does not match image {image.shape}")
    if not annotations:
        warnings.warn("composite without instances returns the background unchanged", stacklevel=2)
        return bg_image.copy()
    keep = np.zeros(image.shape[:2], dtype=bool)
    for inst in annotations:
        keep |= inst.instance_mask
    return np.where(keep[..., None], image, bg_image)


def _dataset_map(model, images: Sequence[np.ndarray], dataset: Dataset) -> float:
    per = model.predict_many(list(images))
    dets = [DetectionRecord(img.image_id, d.class_id, d.bbox, d.confidence, cell=d.cell)
            for img, ds in zip(dataset.images, per) for d in ds]
    return map50(dets, dataset.annotations())["map"]


def run_q1_image_space(model, datasets: dict[str, Dataset], bg_pool: Sequence[np.ndarray],
                       n_trials: int = 6, seed: int = 0) -> dict:
    """Paste foregrounds onto pool backgrounds; mAP@50 per (domain, trial).

    Trial ``t`` assigns pool entry ``seq_t[i]`` to the i-th image of every
    domain, so all domains see the same background sequence.
    """
    if not bg_pool:
        raise ConfigError("background pool is empty")
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    for name, ds in datasets.items():
        if len(ds) == 0:
            raise ConfigError(f"domain {name!r} has no images")
    longest = max(len(ds) for ds in datasets.values())
    baseline = {name: _dataset_map(model, [im.pixels for im in ds], ds)
                for name, ds in datasets.items()}
    trials = []
    for t in range(1, n_trials + 1):
        seq = trial_rng(seed, t).integers(0, len(bg_pool), size=longest)
        res = TrialResult(t)
        for name, ds in datasets.items():
            composed = [composite_background(im.pixels, im.instances,
                                             fit_background(bg_pool[seq[i]], im.shape))
                        for i, im in enumerate(ds.images)]
            res.map50[name] = _dataset_map(model, composed, ds)
        trials.append(res)
    summary = {}
    for name in datasets:
        vals = np.array([tr.map50[name] for tr in trials])
        summary[name] = {"baseline": baseline[name], "mean": float(vals.mean()),
                         "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                         "trials": vals.tolist()}
    return {"trials": trials, "summary": summary}


# -- drop accounting ----------------------------------------------------------

def confident(dets: Sequence[DetectionRecord], threshold: float) -> list[DetectionRecord]:
    return [d for d in dets if d.confidence >= threshold]


def true_positives(dets: Sequence[DetectionRecord], annotations: Sequence[InstanceAnnotation],
                   iou_threshold: float = 0.5) -> dict[str, DetectionRecord]:
    """Matched detections keyed by ground-truth instance id."""
    return {d.matched_gt: d for d in match_detections(dets, annotations, iou_threshold)
            if d.matched_gt is not None}


def classify_drop(gt: InstanceAnnotation, before: DetectionRecord,
                  after: Sequence[DetectionRecord]) -> tuple[str | None, float]:
    """Reason this prior true positive was dropped (or None) and its post IoU.

    ``after`` must already carry match results.  An instance that is still
    matched is retained.  Otherwise the post-intervention detection that
    overlaps the ground-truth box most decides the reason.
    """
    for d in after:
        if d.matched_gt == gt.instance_id:
            return None, d.iou_with_match
    best, best_iou = None, 0.0
    for d in after:
        v = iou(d.bbox, gt.bbox)
        if v > best_iou:
            best, best_iou = d, v
    if severe_loss(best_iou):
        return "info_loss", best_iou
    if best.class_id != before.class_id:
        return "class_changed", best_iou
    if best.matched_gt is not None:
        return "rematched", best_iou
    return None, best_iou


@dataclass
class ImageOutcome:
    """Per-image result of one feature-space removal."""

    image_index: int
    tps: dict[str, int] = field(default_factory=dict)
    events: list[DropEvent] = field(default_factory=list)
    retained: list[tuple[str, str]] = field(default_factory=list)


def _evaluate_removal(img: ImageRecord, before: dict[str, DetectionRecord],
                      after: Sequence[DetectionRecord], removed: str, fg_names,
                      score_threshold: float, iou_threshold: float, index: int) -> ImageOutcome:
    after = match_detections(confident(after, score_threshold), img.instances, iou_threshold)
    out = ImageOutcome(index)
    for inst in img.instances:
        det = before.get(inst.instance_id)
        if det is None:
            continue
        fg = fg_names[inst.class_id]
        out.tps[fg] = out.tps.get(fg, 0) + 1
        reason, iou_after = classify_drop(inst, det, after)
        if reason is None:
            out.retained.append((inst.instance_id, fg))
        else:
            out.events.append(DropEvent(img.image_id, inst.instance_id, fg, removed, reason,
                                        det.iou_with_match, iou_after))
    return out


def baseline_true_positives(model, dataset: Dataset, score_threshold: float = 0.5,
                            iou_threshold: float = 0.5) -> list[dict[str, DetectionRecord]]:
    per = model.predict_many(dataset.images)
    return [true_positives(confident(d, score_threshold), img.instances, iou_threshold)
            for img, d in zip(dataset.images, per)]


def feature_space_outcomes(model, dataset: Dataset, bg_label: str, layer: str = "stage1",
                           score_threshold: float = 0.5, iou_threshold: float = 0.5,
                           baseline: list | None = None) -> list[ImageOutcome]:
    """Zero ``bg_label``'s region at ``layer`` for each image containing it."""
    space = dataset.label_space
    bg_id = space.bg_id(bg_label)
    if layer not in model.layer_names:
        raise ConfigError(f"layer {layer!r} is not hookable")
    if baseline is None:
        baseline = baseline_true_positives(model, dataset, score_threshold, iou_threshold)
    todo = [i for i, img in enumerate(dataset.images) if (img.semantic.labels == bg_id).any()]
    if not todo:
        warnings.warn(f"background label {bg_label!r} absent from every image", stacklevel=2)
        return []
    hooks = [[AblationHook(layer, dataset.images[i].semantic.region(bg_id))] for i in todo]
    hooked = model.predict_many([dataset.images[i] for i in todo], hooks)
    return [_evaluate_removal(dataset.images[i], baseline[i], after, bg_label, space.fg_classes,
                              score_threshold, iou_threshold, i)
            for i, after in zip(todo, hooked)]


def aggregate_pairs(outcomes: Sequence[ImageOutcome], bg_label: str,
                    indices: set[int] | None = None) -> dict[tuple[str, str], PairCount]:
    pairs: dict[tuple[str, str], PairCount] = defaultdict(PairCount)
    for o in outcomes:
        if indices is not None and o.image_index not in indices:
            continue
        for fg, n in o.tps.items():
            pairs[(fg, bg_label)].tp += n
        for e in o.events:
            pairs[(e.fg_class, bg_label)].drops += 1
    return dict(pairs)


def run_q1_feature_space(model, dataset: Dataset, bg_label: str, layer: str = "stage1",
                         score_threshold: float = 0.5, iou_threshold: float = 0.5) -> dict:
    """Drop rates per (fg, ``bg_label``) pair plus every drop event."""
    outcomes = feature_space_outcomes(model, dataset, bg_label, layer, score_threshold,
                                      iou_threshold)
    pairs = aggregate_pairs(outcomes, bg_label)
    return {"pairs": pairs, "events": [e for o in outcomes for e in o.events],
            "outcomes": outcomes}


def run_q1_feature_trials(model, dataset: Dataset, bg_labels: Sequence[str], layer: str = "stage1",
                          n_trials: int = 6, seed: int = 0, fraction: float = 0.8,
                          score_threshold: float = 0.5, iou_threshold: float = 0.5) -> dict:
    """Feature-space removal for every label, aggregated over seeded image subsamples."""
    baseline = baseline_true_positives(model, dataset, score_threshold, iou_threshold)
    outcomes = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for bg in bg_labels:
            outcomes[bg] = feature_space_outcomes(model, dataset, bg, layer, score_threshold,
                                                  iou_threshold, baseline)
    trials = []
    for t in range(1, n_trials + 1):
        keep = set(trial_indices(len(dataset), t, seed, fraction).tolist())
        res = TrialResult(t)
        for bg in bg_labels:
            for pair, pc in aggregate_pairs(outcomes[bg], bg, keep).items():
                res.tps[pair] = pc.tp
                res.drops[pair] = pc.drops
        trials.append(res)
    totals = {}
    for bg in bg_labels:
        totals.update(aggregate_pairs(outcomes[bg], bg))
    return {"trials": trials, "totals": totals, "outcomes": outcomes}


# -- CAM bins -----------------------------------------------------------------

@dataclass
class CamInstance:
    image_index: int
    instance_id: str
    fg_class: str
    confidence: float
    cam: cammod.CamMap
    dropped: dict[int, bool] = field(default_factory=dict)
    reasons: dict[int, str | None] = field(default_factory=dict)
    hits: dict[int, tuple[float, float]] = field(default_factory=dict)


def run_q2_cam_bins(model, dataset: Dataset, bins: Sequence[int] = tuple(range(1, 10)),
                    confidence: float = 0.85, cam_layer: str = "stage4",
                    ablation_layer: str = "stage1", n_samples: int = 8,
                    noise_sigma: float | None = None, seed: int = 0,
                    score_threshold: float = 0.5, iou_threshold: float = 0.5,
                    bin_masks: dict | None = None) -> dict:
    """Ablate outside each CAM rung at the shallow layer; mean drop rate per bin.

    ``bin_masks`` may override the ladder with explicit ``{instance_id: {k: mask}}``.
    """
    if any(not 1 <= k <= cammod.N_BINS for k in bins):
        raise ConfigError(f"bins must lie in 1..{cammod.N_BINS}")
    baseline = baseline_true_positives(model, dataset, score_threshold, iou_threshold)
    instances: list[CamInstance] = []
    skipped = 0
    for i, img in enumerate(dataset.images):
        jobs, hooks = [], []
        for inst in img.instances:
            det = baseline[i].get(inst.instance_id)
            if det is None or det.confidence < confidence:
                continue
            try:
                cmap = cammod.smooth_gradcam(model, img.pixels, det, cam_layer, n_samples,
                                             noise_sigma, seed=seed, min_confidence=confidence,
                                             instance_ref=inst.instance_id)
            except cammod.DegenerateMapError:
                skipped += 1
                continue
            ci = CamInstance(i, inst.instance_id, dataset.label_space.fg_classes[inst.class_id],
                             det.confidence, cmap)
            if bin_masks is not None:
                ladder = {k: np.asarray(bin_masks[inst.instance_id][k], bool) | inst.instance_mask
                          for k in bins}
            else:
                ladder = {b.k: b.mask for b in cammod.bin_ladder(cmap, inst.instance_mask)}
            for k in bins:
                mask = ladder[k]
                ci.hits[k] = cammod.hit_ratio([mask], [inst.instance_mask])
                jobs.append((ci, inst, det, k))
                hooks.append([AblationHook(ablation_layer, ~mask)])
            instances.append(ci)
        if not jobs:
            continue
        hooked = model.predict_many([img] * len(jobs), hooks)
        for (ci, inst, det, k), after in zip(jobs, hooked):
            after = match_detections(confident(after, score_threshold), img.instances, iou_threshold)
            reason, _ = classify_drop(inst, det, after)
            ci.dropped[k] = reason is not None
            ci.reasons[k] = reason
    if not instances:
        warnings.warn(f"no instance reached confidence {confidence}", stacklevel=2)
    per_bin = {}
    for k in bins:
        flags = [ci.dropped[k] for ci in instances]
        per_bin[k] = float(np.mean(flags)) if flags else None
    per_class: dict[str, dict[int, float]] = defaultdict(dict)
    for fg in sorted({ci.fg_class for ci in instances}):
        members = [ci for ci in instances if ci.fg_class == fg]
        for k in bins:
            per_class[fg][k] = float(np.mean([ci.dropped[k] for ci in members]))
    return {"per_bin": per_bin, "per_class": dict(per_class), "instances": instances,
            "n_instances": len(instances), "skipped_degenerate": skipped}
