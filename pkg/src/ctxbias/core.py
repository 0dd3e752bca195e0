"""Domain types, dataset manifests and the CBT1 tensor container."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import jsonschema
import numpy as np
from PIL import Image

TENSOR_MAGIC = b"CBT1"
DTYPE_F32 = 1


class CtxBiasError(Exception):
    """Base class for all errors raised by this package."""


class LoadError(CtxBiasError):
    pass


class SchemaError(CtxBiasError):
    pass


class FormatError(CtxBiasError):
    pass


class DimensionError(CtxBiasError):
    pass


class DomainError(CtxBiasError, ValueError):
    """An argument lies outside the domain of a function."""


Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class LabelSpace:
    """Foreground classes take ids ``0..n_fg-1``; background labels follow."""

    fg_classes: tuple[str, ...]
    bg_labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "fg_classes", tuple(self.fg_classes))
        object.__setattr__(self, "bg_labels", tuple(self.bg_labels))
        names = self.fg_classes + self.bg_labels
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate label names in {names}")
        if not self.fg_classes:
            raise SchemaError("label space needs at least one foreground class")

    @property
    def n_fg(self) -> int:
        return len(self.fg_classes)

    @property
    def n_labels(self) -> int:
        return len(self.fg_classes) + len(self.bg_labels)

    def fg_id(self, name: str) -> int:
        try:
            return self.fg_classes.index(name)
        except ValueError:
            raise SchemaError(f"unknown foreground class {name!r}") from None

    def bg_id(self, name: str) -> int:
        try:
            return self.n_fg + self.bg_labels.index(name)
        except ValueError:
            raise SchemaError(f"unknown background label {name!r}") from None

    def name(self, label_id: int) -> str:
        if 0 <= label_id < self.n_fg:
            return self.fg_classes[label_id]
        if self.n_fg <= label_id < self.n_labels:
            return self.bg_labels[label_id - self.n_fg]
        raise SchemaError(f"label id {label_id} outside label space")

    def is_bg(self, label_id: int) -> bool:
        return self.n_fg <= label_id < self.n_labels

    def to_json(self) -> dict:
        return {"fg": list(self.fg_classes), "bg": list(self.bg_labels)}


@dataclass(frozen=True, eq=False)
class InstanceAnnotation:
    image_id: str
    class_id: int
    bbox: Box
    instance_mask: np.ndarray
    index: int = 0

    def __post_init__(self):
        mask = np.array(self.instance_mask, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "instance_mask", mask)
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise SchemaError(f"{self.instance_id}: bbox must have positive area")
        if not mask.any():
            raise SchemaError(f"{self.instance_id}: empty instance mask")

    @property
    def instance_id(self) -> str:
        return f"{self.image_id}#{self.index}"


@dataclass(frozen=True, eq=False)
class SemanticMap:
    image_id: str
    labels: np.ndarray

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def region(self, label_id: int) -> np.ndarray:
        return self.labels == label_id


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    class_id: int
    bbox: Box
    confidence: float
    matched_gt: str | None = None
    iou_with_match: float | None = None
    cell: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise DomainError(f"confidence {self.confidence} outside [0, 1]")
        if (self.matched_gt is None) != (self.iou_with_match is None):
            raise SchemaError("iou_with_match must be present iff matched_gt is")


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    """A (C, H, W) float32 activation block with its provenance."""

    layer: str
    data: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C")
        if data.ndim != 3:
            raise DimensionError(f"feature tensor must be rank 3, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise FormatError("feature tensor contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_flat(cls, layer: str, dims: Sequence[int], data: Sequence[float],
                  provenance: dict | None = None) -> "FeatureTensor":
        flat = np.asarray(data, dtype=np.float32).ravel()
        if len(dims) != 3 or math.prod(dims) != flat.size:
            raise DimensionError(f"dims {tuple(dims)} do not match {flat.size} values")
        return cls(layer, flat.reshape(dims), dict(provenance or {}))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class DomainId:
    name: str

    def __post_init__(self):
        if not self.name:
            raise SchemaError("domain name must be nonempty")

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True, eq=False)
class ImageRecord:
    image_id: str
    pixels: np.ndarray
    semantic: SemanticMap
    instances: tuple[InstanceAnnotation, ...] = ()

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def instance(self, instance_id: str) -> InstanceAnnotation:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)


@dataclass(eq=False)
class Dataset:
    label_space: LabelSpace
    images: list[ImageRecord]
    domain: str | None = None

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def annotations(self) -> list[InstanceAnnotation]:
        return [inst for img in self.images for inst in img.instances]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self.label_space, [self.images[i] for i in indices], self.domain)


# -- geometry -----------------------------------------------------------------

def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """Intersection over union of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise DomainError("boxes must have positive area")
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return float(min(1.0, inter / union))


def mask_to_bbox(mask: np.ndarray) -> Box:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise SchemaError("cannot take bbox of an empty mask")
    return (float(xs.min()), float(ys.min()),
            float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))


# -- tensor container ---------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_array(path: str | Path, array: np.ndarray, meta: dict | None = None) -> None:
    """Write an arbitrary-rank float32 array in CBT1 layout."""
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise DimensionError("rank above 255 is not representable")
    header = TENSOR_MAGIC + struct.pack("<BBxx", DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + arr.tobytes(order="C"))
    if meta is not None:
        _sidecar(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def read_array(path: str | Path) -> tuple[np.ndarray, dict | None]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise LoadError(f"missing tensor file {path}") from None
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    dtype, rank = struct.unpack_from("<BB", raw, 4)
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    dims_end = 8 + 4 * rank
    if len(raw) < dims_end:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    n_bytes = 4 * math.prod(dims)
    payload = raw[dims_end:]
    if len(payload) != n_bytes:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {n_bytes}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite values in payload")
    meta = None
    if _sidecar(path).exists():
        meta = json.loads(_sidecar(path).read_text())
    return arr, meta


def write_tensor(t: FeatureTensor, path: str | Path) -> None:
    write_array(path, t.data, {"layer": t.layer, "provenance": t.provenance})


def read_tensor(path: str | Path) -> FeatureTensor:
    arr, meta = read_array(path)
    if arr.ndim != 3:
        raise FormatError(f"{path}: feature tensors are rank 3, got rank {arr.ndim}")
    meta = meta or {}
    return FeatureTensor(meta.get("layer", ""), arr, meta.get("provenance", {}))


# -- dataset manifest ---------------------------------------------------------

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["label_space", "images"],
    "properties": {
        "domain": {"type": ["string", "null"]},
        "label_space": {
            "type": "object",
            "required": ["fg", "bg"],
            "properties": {
                "fg": {"type": "array", "items": {"type": "string"}},
                "bg": {"type": "array", "items": {"type": "string"}},
            },
        },
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "file", "width", "height", "semantic_map_file", "instances"],
                "properties": {
                    "id": {"type": "string"},
                    "file": {"type": "string"},
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                    "semantic_map_file": {"type": "string"},
                    "instances": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["class", "bbox", "instance_mask_file"],
                            "properties": {
                                "class": {"type": "string"},
                                "bbox": {"type": "array", "items": {"type": "number"},
                                         "minItems": 4, "maxItems": 4},
                                "instance_mask_file": {"type": "string"},
                            },
                        },
                    },
                },
            },
        },
    },
}


def _load_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise LoadError(f"missing file {path}")
    with Image.open(path) as im:
        return np.array(im)


def _save_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG", optimize=False, compress_level=6)


def read_dataset(manifest_path: str | Path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise LoadError(f"missing manifest {manifest_path}")
    doc = json.loads(manifest_path.read_text())
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"{manifest_path}: {exc.message}") from None
    space = LabelSpace(doc["label_space"]["fg"], doc["label_space"]["bg"])
    root = manifest_path.parent
    images = []
    seen = set()
    for entry in doc["images"]:
        image_id = entry["id"]
        if image_id in seen:
            raise SchemaError(f"duplicate image id {image_id!r}")
        seen.add(image_id)
        shape = (entry["height"], entry["width"])
        pixels = _load_png(root / entry["file"])
        if pixels.ndim == 2:
            pixels = np.repeat(pixels[..., None], 3, axis=2)
        pixels = pixels[..., :3]
        if pixels.shape[:2] != shape:
            raise SchemaError(f"{image_id}: image is {pixels.shape[:2]}, manifest says {shape}")
        labels = _load_png(root / entry["semantic_map_file"])
        if labels.shape != shape:
            raise SchemaError(f"{image_id}: semantic map is {labels.shape}, image is {shape}")
        if labels.size and labels.max() >= space.n_labels:
            raise SchemaError(f"{image_id}: semantic map id {labels.max()} outside label space")
        instances = []
        for k, inst in enumerate(entry["instances"]):
            mask = _load_png(root / inst["instance_mask_file"])
            if mask.shape != shape:
                raise SchemaError(f"{image_id}: instance mask {k} has shape {mask.shape}")
            instances.append(InstanceAnnotation(image_id, space.fg_id(inst["class"]),
                                                tuple(inst["bbox"]), mask > 0, k))
        pixels.setflags(write=False)
        images.append(ImageRecord(image_id, pixels, SemanticMap(image_id, labels),
                                  tuple(instances)))
    return Dataset(space, images, doc.get("domain"))


def manifest_dict(dataset: Dataset) -> dict[str, Any]:
    images = []
    for img in dataset.images:
        h, w = img.shape
        images.append({
            "id": img.image_id,
            "file": f"images/{img.image_id}.png",
            "width": int(w),
            "height": int(h),
            "semantic_map_file": f"semantic/{img.image_id}.png",
            "instances": [
                {"class": dataset.label_space.fg_classes[inst.class_id],
                 "bbox": [float(v) for v in inst.bbox],
                 "instance_mask_file": f"masks/{img.image_id}_{inst.index}.png"}
                for inst in img.instances
            ],
        })
    return {"domain": dataset.domain, "label_space": dataset.label_space.to_json(),
            "images": images}


def write_dataset(dataset: Dataset, root: str | Path) -> Path:
    """Serialize ``dataset`` below ``root``; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    doc = manifest_dict(dataset)
    for img, entry in zip(dataset.images, doc["images"]):
        _save_png(root / entry["file"], np.ascontiguousarray(img.pixels, dtype=np.uint8))
        _save_png(root / entry["semantic_map_file"], np.ascontiguousarray(img.semantic.labels))
        for inst, ientry in zip(img.instances, entry["instances"]):
            _save_png(root / ientry["instance_mask_file"],
                      inst.instance_mask.astype(np.uint8) * 255)
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return manifest
