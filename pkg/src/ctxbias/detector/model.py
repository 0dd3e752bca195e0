"""A small single-scale convolutional detector with hookable stages.

Four stages of two 3x3 convolutions each, strides 1, 2, 2, 2, then a dense
head predicting objectness, box offsets and class logits per cell of the
stride-8 grid.  ``stage1`` is the shallow, full-resolution layer used for
feature-space ablation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..core import (CtxBiasError, DetectionRecord, FeatureTensor, ImageRecord, LabelSpace,
                    read_array, write_array)

LAYERS = ("stage1", "stage2", "stage3", "stage4")
STRIDES = {"stage1": 1, "stage2": 2, "stage3": 4, "stage4": 8}
CHECKPOINT_FORMAT = "ctxbias-detector/1"


class HookError(CtxBiasError):
    pass


@dataclass(frozen=True, eq=False)
class AblationHook:
    """Zero a layer's activations wherever ``mask`` (image coordinates) is set."""

    layer: str
    mask: np.ndarray
    mode: str = "zero_where_true"

    def __post_init__(self):
        if self.mode != "zero_where_true":
            raise HookError(f"unsupported hook mode {self.mode!r}")
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))


def downsample_mask(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Majority vote of image pixels per grid cell; ties count as masked."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    gh, gw = grid
    if (gh, gw) == (h, w):
        return mask.copy()
    if h % gh or w % gw:
        raise HookError(f"mask {mask.shape} does not tile grid {grid}")
    sy, sx = h // gh, w // gw
    counts = mask.reshape(gh, sy, gw, sx).sum(axis=(1, 3))
    return 2 * counts >= sy * sx


def _conv(cin, cout, stride):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class DetectorNet(nn.Module):
    def __init__(self, n_classes: int, widths: Sequence[int] = (16, 32, 64, 64)):
        super().__init__()
        strides = (1, 2, 2, 2)
        stages = []
        cin = 3
        for w, s in zip(widths, strides):
            stages.append(nn.Sequential(_conv(cin, w, s), nn.ReLU(), _conv(w, w, 1), nn.ReLU()))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.head = nn.Sequential(_conv(cin, cin, 1), nn.ReLU(), nn.Conv2d(cin, 5 + n_classes, 1))

    def forward(self, x: torch.Tensor, masks: dict[str, torch.Tensor] | None = None,
                capture: Sequence[str] = ()):
        feats = {}
        for name, stage in zip(LAYERS, self.stages):
            x = stage(x)
            if masks and name in masks:
                x = x.masked_fill(masks[name], 0.0)
            if name in capture:
                feats[name] = x
        return self.head(x), feats


def to_input(pixels: np.ndarray) -> torch.Tensor:
    arr = np.asarray(pixels, dtype=np.float32) / 255.0 - 0.5
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> list[int]:
    """Indices kept by greedy NMS over ``(x, y, w, h)`` boxes."""
    order = np.argsort(-scores, kind="stable")
    x1, y1 = boxes[:, 0], boxes[:, 1]
    x2, y2 = x1 + boxes[:, 2], y1 + boxes[:, 3]
    area = boxes[:, 2] * boxes[:, 3]
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        ov = inter / (area[i] + area[rest] - inter)
        order = rest[ov <= threshold]
    return keep


class TinyDetector:
    """Detector adapter: named layers, hooked prediction, activation capture."""

    layer_names = LAYERS
    differentiable = True

    def __init__(self, label_space: LabelSpace, image_size: int = 64,
                 widths: Sequence[int] = (16, 32, 64, 64), anchor: float = 16.0,
                 score_threshold: float = 0.05, nms_iou: float = 0.5, max_dets: int = 50):
        self.label_space = label_space
        self.image_size = image_size
        self.widths = tuple(widths)
        self.anchor = anchor
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.max_dets = max_dets
        self.net = DetectorNet(label_space.n_fg, self.widths)
        self.net.eval()

    # -- geometry ------------------------------------------------------------

    @property
    def stride(self) -> int:
        return STRIDES["stage4"]

    def grid(self, layer: str, image_shape: tuple[int, int]) -> tuple[int, int]:
        s = STRIDES[layer]
        return (image_shape[0] + s - 1) // s, (image_shape[1] + s - 1) // s

    def _check_layers(self, layers: Sequence[str]) -> None:
        for layer in layers:
            if layer not in self.layer_names:
                raise HookError(f"unknown layer {layer!r}; hookable: {self.layer_names}")

    def hook_masks(self, hooks: Sequence[AblationHook], image_shape) -> dict[str, torch.Tensor]:
        self._check_layers([h.layer for h in hooks])
        masks: dict[str, np.ndarray] = {}
        for h in hooks:
            if h.mask.shape != tuple(image_shape):
                raise HookError(f"hook mask {h.mask.shape} does not match image {image_shape}")
            cell = downsample_mask(h.mask, self.grid(h.layer, image_shape))
            masks[h.layer] = masks[h.layer] | cell if h.layer in masks else cell
        return {k: torch.from_numpy(v)[None, None] for k, v in masks.items()}

    # -- decoding ------------------------------------------------------------

    def decode_raw(self, out: torch.Tensor):
        """Split head output into (conf per class, boxes) for every cell."""
        obj = torch.sigmoid(out[:, 0])
        cls = torch.softmax(out[:, 5:], dim=1)
        b, _, gh, gw = out.shape
        gy, gx = torch.meshgrid(torch.arange(gh), torch.arange(gw), indexing="ij")
        s = self.stride
        cx = (gx + torch.sigmoid(out[:, 1])) * s
        cy = (gy + torch.sigmoid(out[:, 2])) * s
        w = self.anchor * torch.exp(out[:, 3].clamp(-4, 4))
        h = self.anchor * torch.exp(out[:, 4].clamp(-4, 4))
        boxes = torch.stack([cx - w / 2, cy - h / 2, w, h], dim=-1)
        return obj[:, None] * cls, boxes

    def _records(self, conf: np.ndarray, boxes: np.ndarray, image_id: str) -> list[DetectionRecord]:
        k, gh, gw = conf.shape
        cls = conf.argmax(axis=0).ravel()
        score = conf.max(axis=0).ravel()
        flat_boxes = boxes.reshape(-1, 4)
        keep = np.nonzero(score >= self.score_threshold)[0]
        records = []
        for c in np.unique(cls[keep]):
            idx = keep[cls[keep] == c]
            for j in nms(flat_boxes[idx].astype(np.float64), score[idx].astype(np.float64), self.nms_iou):
                i = idx[j]
                bx = tuple(float(v) for v in flat_boxes[i])
                records.append(DetectionRecord(image_id, int(c), bx,
                                               float(min(1.0, max(0.0, score[i]))), cell=int(i)))
        records.sort(key=lambda r: (-r.confidence, r.cell))
        return records[: self.max_dets]

    # -- inference -----------------------------------------------------------

    def forward(self, pixels: np.ndarray | Sequence[np.ndarray],
                hooks: Sequence[Sequence[AblationHook]] | None = None,
                capture: Sequence[str] = ()):
        """Head output and captured activations, one image at a time.

        Images are not batched through the network so that a result never
        depends on which other images share the call (batched convolutions
        round differently).
        """
        batch = [pixels] if isinstance(pixels, np.ndarray) and pixels.ndim == 3 else list(pixels)
        self._check_layers(capture)
        outs, feats = [], {name: [] for name in capture}
        with torch.no_grad():
            for i, p in enumerate(batch):
                masks = self.hook_masks(hooks[i], p.shape[:2]) if hooks and hooks[i] else None
                out, f = self.net(to_input(p)[None], masks, capture)
                outs.append(out)
                for name in capture:
                    feats[name].append(f[name])
        return torch.cat(outs), {k: torch.cat(v) for k, v in feats.items()}

    def predict_many(self, images: Sequence[ImageRecord | np.ndarray],
                     hooks: Sequence[Sequence[AblationHook]] | None = None,
                     batch_size: int = 64) -> list[list[DetectionRecord]]:
        results = []
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            pix = [im.pixels if isinstance(im, ImageRecord) else im for im in chunk]
            hk = None if hooks is None else hooks[start:start + batch_size]
            out, _ = self.forward(pix, hk)
            conf, boxes = self.decode_raw(out)
            conf, boxes = conf.numpy(), boxes.numpy()
            for j, im in enumerate(chunk):
                image_id = im.image_id if isinstance(im, ImageRecord) else ""
                results.append(self._records(conf[j], boxes[j], image_id))
        return results

    def predict(self, image: ImageRecord | np.ndarray,
                hooks: Sequence[AblationHook] = ()) -> list[DetectionRecord]:
        return self.predict_many([image], [list(hooks)])[0]

    def capture(self, image: ImageRecord | np.ndarray, layers: Sequence[str],
                hooks: Sequence[AblationHook] = (), provenance: dict | None = None
                ) -> dict[str, FeatureTensor]:
        pix = image.pixels if isinstance(image, ImageRecord) else image
        _, feats = self.forward([pix], [list(hooks)], capture=layers)
        prov = dict(provenance or {})
        if isinstance(image, ImageRecord):
            prov.setdefault("image_id", image.image_id)
        return {name: FeatureTensor(name, feats[name][0].numpy(), dict(prov)) for name in layers}

    def instance_score(self, x: torch.Tensor, det: DetectionRecord, layer: str):
        """Forward a (1, 3, H, W) input with grad, returning (activation, score).

        The score is the detection's confidence at its cell and class.
        """
        self._check_layers([layer])
        out, feats = self.net(x, None, capture=(layer,))
        conf, _ = self.decode_raw(out)
        gw = conf.shape[3]
        cy, cx = divmod(det.cell, gw)
        return feats[layer], conf[0, det.class_id, cy, cx]

    # -- persistence ---------------------------------------------------------

    def config(self) -> dict:
        return {"image_size": self.image_size, "widths": list(self.widths), "anchor": self.anchor,
                "score_threshold": self.score_threshold, "nms_iou": self.nms_iou,
                "max_dets": self.max_dets}

    def save(self, root: str | Path, extra: dict | None = None) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        weights = {}
        for name, tensor in self.net.state_dict().items():
            fname = f"{name}.cbt"
            write_array(root / fname, tensor.detach().numpy())
            weights[name] = fname
        index = {"format": CHECKPOINT_FORMAT, "arch": self.config(),
                 "label_space": self.label_space.to_json(), "layers": list(self.layer_names),
                 "weights": weights, "extra": extra or {}}
        path = root / "index.json"
        path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root: str | Path) -> "TinyDetector":
        root = Path(root)
        index_path = root / "index.json"
        if not index_path.exists():
            raise CtxBiasError(f"no checkpoint index at {index_path}")
        index = json.loads(index_path.read_text())
        if index.get("format") != CHECKPOINT_FORMAT:
            raise CtxBiasError(f"{index_path}: unknown checkpoint format {index.get('format')!r}")
        space = LabelSpace(index["label_space"]["fg"], index["label_space"]["bg"])
        model = cls(space, **index["arch"])
        state = {name: torch.from_numpy(read_array(root / fname)[0])
                 for name, fname in index["weights"].items()}
        model.net.load_state_dict(state)
        model.net.eval()
        return model

    def weights_equal(self, other: "TinyDetector") -> bool:
        a, b = self.net.state_dict(), other.net.state_dict()
        return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def raw_head(model: TinyDetector, pixels: np.ndarray, hooks: Sequence[AblationHook] = ()):
    """Head output for one image; used to compare logits bitwise."""
    out, _ = model.forward([pixels], [list(hooks)])
    return out[0].numpy()


def upsample(heat: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(heat[None, None], size=size, mode="bilinear", align_corners=False)[0, 0]
