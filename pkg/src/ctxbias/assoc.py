"""Per-instance CAM feature extraction and the associated / non-associated split."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import CtxBiasError, FeatureTensor, read_array, write_array
from .detector.model import downsample_mask


class BgFeatureUndefined(CtxBiasError):
    """The CAM region holds no background cells at this layer."""


class BookkeepingError(CtxBiasError):
    pass


@dataclass(frozen=True, eq=False)
class AssociationRecord:
    domain_id: str
    instance_id: str
    fg_class: str
    bg_label: str
    associated: bool
    layer: str
    X_f_avg: np.ndarray
    X_b_avg: np.ndarray
    X_c: np.ndarray | None = None


@dataclass
class FeatureSet:
    """Stacked fg/bg vectors of one group of records, rows aligned."""

    f: np.ndarray
    b: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.f)

    def take(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=int)
        return FeatureSet(self.f[idx], self.b[idx], [self.ids[i] for i in idx])


def _grid_mask(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask if mask.shape == grid else downsample_mask(mask, grid)


def extract_features(cam_mask: np.ndarray, instance_mask: np.ndarray,
                     activation: FeatureTensor | np.ndarray):
    """Return ``(X_c, X_f_avg, X_b_avg)`` for one instance at one layer.

    Masks may be image-sized (majority-vote downsampled here) or already on
    the activation grid.  An instance too small to win any cell falls back to
    the cell holding its centroid.
    """
    act = activation.data if isinstance(activation, FeatureTensor) else np.asarray(activation)
    act = act.astype(np.float64)
    grid = act.shape[1:]
    inst_full = np.asarray(instance_mask, dtype=bool)
    inst = _grid_mask(inst_full, grid)
    if not inst.any():
        ys, xs = np.nonzero(inst_full)
        if ys.size == 0:
            raise CtxBiasError("empty instance mask")
        sy, sx = inst_full.shape[0] / grid[0], inst_full.shape[1] / grid[1]
        inst = np.zeros(grid, dtype=bool)
        inst[int(ys.mean() // sy), int(xs.mean() // sx)] = True
    cam = _grid_mask(cam_mask, grid) | inst
    x = act * cam[None]
    norm = np.linalg.norm(x)
    x_c = x / norm if norm > 0 else x
    bg = cam & ~inst
    f_avg = x_c[:, inst].mean(axis=1)
    if not bg.any():
        raise BgFeatureUndefined("CAM region has no background cells")
    b_avg = x_c[:, bg].mean(axis=1)
    return x_c, f_avg, b_avg


@dataclass
class InstanceFeatures:
    """Layer-wise pooled vectors of one confident instance (removal-independent)."""

    instance_id: str
    image_index: int
    fg_class: str
    layers: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


@dataclass
class AssociationPartition:
    F_a: dict[tuple[str, str], list[AssociationRecord]] = field(default_factory=dict)
    F_na: dict[tuple[str, str], list[AssociationRecord]] = field(default_factory=dict)
    missing_features: int = 0

    def pairs(self) -> list[tuple[str, str]]:
        return sorted(set(self.F_a) | set(self.F_na))

    def feature_set(self, pair, layer: str, associated: bool) -> FeatureSet:
        recs = [r for r in (self.F_a if associated else self.F_na).get(pair, []) if r.layer == layer]
        if not recs:
            return FeatureSet(np.zeros((0, 0)), np.zeros((0, 0)), [])
        return FeatureSet(np.stack([r.X_f_avg for r in recs]), np.stack([r.X_b_avg for r in recs]),
                          [r.instance_id for r in recs])


def partition(drop_events: Iterable, retained: Iterable[tuple[str, str]],
              features: dict[str, InstanceFeatures], bg_label: str, domain: str,
              into: AssociationPartition | None = None) -> AssociationPartition:
    """Associated iff the prior true positive dropped under removal of ``bg_label``."""
    part = into if into is not None else AssociationPartition()
    dropped = {e.instance_id: e.fg_class for e in drop_events}
    kept = dict(retained)
    both = dropped.keys() & kept.keys()
    if both:
        raise BookkeepingError(f"instances both dropped and retained: {sorted(both)[:3]}")
    for flag, group in ((True, dropped), (False, kept)):
        target = part.F_a if flag else part.F_na
        for iid in sorted(group):
            feats = features.get(iid)
            if feats is None:
                part.missing_features += 1
                continue
            pair = (group[iid], bg_label)
            for layer, (f, b) in feats.layers.items():
                target.setdefault(pair, []).append(
                    AssociationRecord(domain, iid, group[iid], bg_label, flag, layer, f, b))
    return part


def balance_sample(f_a: Sequence, f_na: Sequence, seed: int) -> tuple[list, bool]:
    """Uniform subsample of ``f_na`` sized like ``f_a``; flag is True on low support."""
    if len(f_na) < len(f_a):
        return list(f_na), True
    if len(f_na) == len(f_a):
        return list(f_na), False
    idx = np.sort(np.random.default_rng([seed, 0xBA1]).choice(len(f_na), len(f_a), replace=False))
    return [f_na[i] for i in idx], False


# -- persistence --------------------------------------------------------------

def save_feature_store(root: str | Path, domain: str, items: Sequence[InstanceFeatures]) -> None:
    """One (N, C) CBT1 matrix per layer and side, indexed by a JSON row list."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    layers = sorted({layer for it in items for layer in it.layers})
    index = {"domain": domain, "layers": {}, "rows": {}}
    for layer in layers:
        rows = [it for it in items if layer in it.layers]
        index["rows"][layer] = [[it.instance_id, it.image_index, it.fg_class] for it in rows]
        for side, k in (("f_avg", 0), ("b_avg", 1)):
            mat = np.stack([it.layers[layer][k] for it in rows]) if rows else np.zeros((0, 0))
            write_array(root / f"{layer}_{side}.cbt", mat)
        index["layers"][layer] = {"f_avg": f"{layer}_f_avg.cbt", "b_avg": f"{layer}_b_avg.cbt"}
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


def load_feature_store(root: str | Path) -> dict[str, InstanceFeatures]:
    root = Path(root)
    path = root / "index.json"
    if not path.exists():
        raise CtxBiasError(f"no feature store at {root}")
    index = json.loads(path.read_text())
    out: dict[str, InstanceFeatures] = {}
    for layer, files in index["layers"].items():
        f, _ = read_array(root / files["f_avg"])
        b, _ = read_array(root / files["b_avg"])
        for row, (iid, image_index, fg) in enumerate(index["rows"][layer]):
            item = out.setdefault(iid, InstanceFeatures(iid, image_index, fg))
            item.layers[layer] = (f[row].astype(np.float64), b[row].astype(np.float64))
    return out


def export_partition(root: str | Path, part: AssociationPartition, domain: str) -> None:
    """CBT1 vectors grouped by (pair, layer, associated flag) plus a JSON index."""
    root = Path(root)
    groups = defaultdict(list)
    for flag, table in ((True, part.F_a), (False, part.F_na)):
        for pair, recs in table.items():
            for r in recs:
                groups[(pair, r.layer, flag)].append(r)
    index = []
    for (pair, layer, flag), recs in sorted(groups.items()):
        stem = f"{pair[0]}__{pair[1]}__{layer}__{'a' if flag else 'na'}"
        write_array(root / f"{stem}_f.cbt", np.stack([r.X_f_avg for r in recs]))
        write_array(root / f"{stem}_b.cbt", np.stack([r.X_b_avg for r in recs]))
        index.append({"domain": domain, "fg": pair[0], "bg": pair[1], "layer": layer,
                      "associated": flag, "instances": [r.instance_id for r in recs],
                      "f_avg": f"{stem}_f.cbt", "b_avg": f"{stem}_b.cbt"})
    root.mkdir(parents=True, exist_ok=True)
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


def collect_features(model, dataset, cam_instances, masks: dict[str, np.ndarray],
                     layers: Sequence[str]) -> tuple[list[InstanceFeatures], int]:
    """Pooled vectors at every layer for each CAM instance; returns (items, n_skipped).

    ``masks`` maps instance id to the image-sized CAM bin mask used as the
    feature region.  Instances whose region has no background cell at some
    layer are skipped entirely so every kept record spans all layers.
    """
    by_image: dict[int, list] = defaultdict(list)
    for ci in cam_instances:
        by_image[ci.image_index].append(ci)
    items, skipped = [], 0
    for idx in sorted(by_image):
        img = dataset.images[idx]
        acts = model.capture(img, layers)
        lookup = {inst.instance_id: inst for inst in img.instances}
        for ci in by_image[idx]:
            item = InstanceFeatures(ci.instance_id, idx, ci.fg_class)
            try:
                for layer in layers:
                    _, f, b = extract_features(masks[ci.instance_id],
                                               lookup[ci.instance_id].instance_mask, acts[layer])
                    item.layers[layer] = (f, b)
            except BgFeatureUndefined:
                skipped += 1
                continue
            items.append(item)
    return items, skipped
