from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..core import CtxBiasError, Dataset
from .evaluate import map50
from .model import TinyDetector, to_input

log = logging.getLogger(__name__)


class ConfigError(CtxBiasError):
    pass


class TrainingError(CtxBiasError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 2e-3
    seed: int = 0
    flip: bool = True
    color_jitter: bool = True
    resize_crop: bool = False
    holdout_fraction: float = 0.2
    widths: tuple[int, ...] = (16, 32, 64, 64)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        self.widths = tuple(self.widths)


def _boxes(img) -> tuple[np.ndarray, np.ndarray]:
    boxes = np.array([inst.bbox for inst in img.instances], dtype=np.float32).reshape(-1, 4)
    classes = np.array([inst.class_id for inst in img.instances], dtype=np.int64)
    return boxes, classes


def _augment(pixels, boxes, classes, cfg: TrainConfig, rng: np.random.Generator):
    pixels = pixels.astype(np.float32)
    h, w = pixels.shape[:2]
    boxes = boxes.copy()
    if cfg.flip and rng.random() < 0.5:
        pixels = pixels[:, ::-1]
        boxes[:, 0] = w - boxes[:, 0] - boxes[:, 2]
    if cfg.resize_crop and rng.random() < 0.5:
        scale = rng.uniform(0.85, 1.0)
        cw, ch = int(round(w * scale)), int(round(h * scale))
        x0, y0 = int(rng.integers(0, w - cw + 1)), int(rng.integers(0, h - ch + 1))
        crop = torch.from_numpy(np.ascontiguousarray(pixels[y0:y0 + ch, x0:x0 + cw].transpose(2, 0, 1)))
        pixels = F.interpolate(crop[None], size=(h, w), mode="bilinear",
                               align_corners=False)[0].numpy().transpose(1, 2, 0)
        fx, fy = w / cw, h / ch
        x1 = np.clip(boxes[:, 0] - x0, 0, cw)
        y1 = np.clip(boxes[:, 1] - y0, 0, ch)
        x2 = np.clip(boxes[:, 0] + boxes[:, 2] - x0, 0, cw)
        y2 = np.clip(boxes[:, 1] + boxes[:, 3] - y0, 0, ch)
        kept = (x2 - x1) * (y2 - y1) >= 0.5 * boxes[:, 2] * boxes[:, 3]
        boxes = np.stack([x1 * fx, y1 * fy, (x2 - x1) * fx, (y2 - y1) * fy], axis=1)[kept]
        classes = classes[kept]
    if cfg.color_jitter:
        contrast = rng.uniform(0.8, 1.2)
        bright = rng.uniform(-20, 20)
        pixels = (pixels - 128.0) * contrast + 128.0 + bright
    return np.clip(pixels, 0, 255), boxes, classes


def _targets(model: TinyDetector, boxes, classes, grid):
    gh, gw = grid
    s = model.stride
    obj = np.zeros((gh, gw), np.float32)
    cls = np.full((gh, gw), -1, np.int64)
    box = np.zeros((4, gh, gw), np.float32)
    for (x, y, w, h), c in zip(boxes, classes):
        cx, cy = x + w / 2, y + h / 2
        gx, gy = min(int(cx // s), gw - 1), min(int(cy // s), gh - 1)
        obj[gy, gx] = 1.0
        cls[gy, gx] = c
        box[:, gy, gx] = (cx / s - gx, cy / s - gy,
                          math.log(max(w, 1.0) / model.anchor), math.log(max(h, 1.0) / model.anchor))
    return obj, cls, box


def detection_loss(out: torch.Tensor, obj_t, cls_t, box_t) -> torch.Tensor:
    b = out.shape[0]
    pos = obj_t > 0
    loss = F.binary_cross_entropy_with_logits(out[:, 0], obj_t, reduction="sum",
                                              pos_weight=torch.tensor(4.0))
    if pos.any():
        logits = out[:, 5:].permute(0, 2, 3, 1)[pos]
        loss = loss + F.cross_entropy(logits, cls_t[pos], reduction="sum")
        pred = out[:, 1:5].permute(0, 2, 3, 1)[pos]
        tgt = box_t.permute(0, 2, 3, 1)[pos]
        loss = loss + F.binary_cross_entropy_with_logits(pred[:, :2], tgt[:, :2], reduction="sum")
        loss = loss + F.smooth_l1_loss(pred[:, 2:], tgt[:, 2:], reduction="sum", beta=0.1)
    return loss / b


def evaluate_map(model: TinyDetector, dataset: Dataset) -> float:
    dets = [d for per in model.predict_many(dataset.images) for d in per]
    return map50(dets, dataset.annotations())["map"]


def split_holdout(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    n = len(dataset)
    n_val = int(round(n * fraction))
    if n < 5 or n_val == 0:
        return dataset, dataset
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    return dataset.subset(sorted(perm[n_val:])), dataset.subset(sorted(perm[:n_val]))


def train(dataset: Dataset, config: TrainConfig, select_dataset: Dataset | None = None,
          image_size: int | None = None) -> tuple[TinyDetector, dict]:
    """Train a detector; the returned weights are those of the best-mAP@50 epoch.

    Selection uses ``select_dataset`` when given, otherwise a held-out split.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if not dataset.annotations():
        raise ConfigError("training dataset has no annotated instances")
    torch.manual_seed(config.seed)
    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng([config.seed, 0x7A1])
    size = image_size or dataset.images[0].shape[0]
    model = TinyDetector(dataset.label_space, image_size=size, widths=config.widths)
    train_set, val_set = split_holdout(dataset, config.holdout_fraction, config.seed)
    if select_dataset is not None:
        train_set, val_set = dataset, select_dataset
    opt = torch.optim.Adam(model.net.parameters(), lr=config.learning_rate)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=config.learning_rate, total_steps=total,
                                                pct_start=0.15)
    grid = model.grid("stage4", (size, size))
    history = {"loss": [], "val_map": [], "config": asdict(config)}
    best_map, best_state, best_epoch = -1.0, None, -1
    step = 0
    for epoch in range(config.epochs):
        model.net.train()
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            xs, objs, clss, bxs = [], [], [], []
            for i in order[start:start + config.batch_size]:
                img = train_set.images[i]
                boxes, classes = _boxes(img)
                pix, boxes, classes = _augment(img.pixels, boxes, classes, config, rng)
                xs.append(to_input(pix))
                o, c, b = _targets(model, boxes, classes, grid)
                objs.append(o)
                clss.append(c)
                bxs.append(b)
            out, _ = model.net(torch.stack(xs))
            loss = detection_loss(out, torch.from_numpy(np.stack(objs)),
                                  torch.from_numpy(np.stack(clss)), torch.from_numpy(np.stack(bxs)))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            history["loss"].append(loss.item())
            step += 1
        model.net.eval()
        score = evaluate_map(model, val_set)
        history["val_map"].append(score)
        log.info("epoch %d loss %.4f val mAP@50 %.4f", epoch, history["loss"][-1], score)
        if score > best_map:
            best_map, best_epoch = score, epoch
            best_state = {k: v.detach().clone() for k, v in model.net.state_dict().items()}
    model.net.load_state_dict(best_state)
    model.net.eval()
    history.update(best_epoch=best_epoch, best_val_map=best_map,
                   n_train=len(train_set), n_val=len(val_set))
    return model, history
