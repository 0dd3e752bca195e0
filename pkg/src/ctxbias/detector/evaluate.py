"""Greedy detection matching and all-point interpolated AP at IoU 0.5."""

from __future__ import annotations

import dataclasses
from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np

from ..core import CtxBiasError, DetectionRecord, DomainError, InstanceAnnotation, iou


class EvaluationError(CtxBiasError):
    pass


def _by_confidence(dets: Sequence[DetectionRecord]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].confidence)


def match_detections(dets: Sequence[DetectionRecord],
                     annotations: Sequence[InstanceAnnotation],
                     iou_threshold: float = 0.5) -> list[DetectionRecord]:
    """Return ``dets`` (same order) with ``matched_gt`` filled in.

    Detections are visited in descending confidence; each claims the unmatched
    same-class ground truth of highest IoU if that IoU reaches the threshold.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise DomainError("iou_threshold must lie in (0, 1)")
    by_image: dict[str, list[InstanceAnnotation]] = defaultdict(list)
    for gt in annotations:
        by_image[gt.image_id].append(gt)
    taken: set[str] = set()
    out = list(dets)
    for i in _by_confidence(dets):
        det = dets[i]
        best, best_iou = None, -1.0
        for gt in by_image.get(det.image_id, ()):
            if gt.class_id != det.class_id:
                continue
            if gt.instance_id in taken:
                continue
            v = iou(det.bbox, gt.bbox)
            if v > best_iou:
                best, best_iou = gt, v
        if best is not None and best_iou >= iou_threshold:
            taken.add(best.instance_id)
            out[i] = dataclasses.replace(det, matched_gt=best.instance_id, iou_with_match=best_iou)
        else:
            out[i] = dataclasses.replace(det, matched_gt=None, iou_with_match=None)
    return out


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from TP flags sorted by descending confidence."""
    if n_gt == 0:
        raise EvaluationError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    tp = tp.astype(np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def map50(dets: Iterable[DetectionRecord], annotations: Sequence[InstanceAnnotation],
          iou_threshold: float = 0.5) -> dict:
    """Per-class AP and their mean over classes present in the ground truth."""
    annotations = list(annotations)
    if not annotations:
        raise EvaluationError("no ground truth to evaluate against")
    gt_by_class: dict[int, list[InstanceAnnotation]] = defaultdict(list)
    for gt in annotations:
        gt_by_class[gt.class_id].append(gt)
    det_by_class: dict[int, list[DetectionRecord]] = defaultdict(list)
    for d in dets:
        det_by_class[d.class_id].append(d)

    per_class = {}
    for cls in sorted(gt_by_class):
        gts = gt_by_class[cls]
        cdets = det_by_class.get(cls, [])
        matched = match_detections(cdets, gts, iou_threshold)
        order = _by_confidence(cdets)
        tp = np.array([matched[i].matched_gt is not None for i in order], dtype=bool)
        per_class[cls] = average_precision(tp, len(gts))
    return {"per_class": per_class, "map": float(np.mean(list(per_class.values())))}
