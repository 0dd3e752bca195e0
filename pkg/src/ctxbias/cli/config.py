"""Run configuration: one YAML file, defaults below, command-line overrides on top."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from ..cam import N_BINS
from ..core import CtxBiasError, SchemaError
from ..detector.model import LAYERS
from ..synthbench import scene_spec_from_dict


class ConfigError(CtxBiasError):
    """Invalid configuration; the message names the offending field."""


class PrerequisiteError(CtxBiasError):
    def __init__(self, artifact: str, command: str):
        super().__init__(f"missing {artifact}; run `ctxbias {command}` first")
        self.command = command


# The pinned benchmark: 0.95 of triangles sit on stripes and 0.95 of crosses on
# checker in both domains; discs are placed uniformly and serve as controls.
# Unannotated decoy shapes on other textures make the host texture a real cue.
PINNED_SCENE = {
    "image_size": 64,
    "grid": 2,
    "fg_classes": ["disc", "triangle", "cross"],
    "bg_labels": ["stripes", "dots", "flat", "checker"],
    "size_range": [8, 26],
    "objects_per_image": [1, 3],
    "margin": 3,
    "noise_sigma": 6.0,
    "domains": {
        "source": {"association": {"triangle": {"stripes": 0.95, "flat": 0.05},
                                   "cross": {"checker": 0.95, "flat": 0.05}},
                   "decoy_rate": 0.1},
        "target": {"association": {"triangle": {"stripes": 0.95, "flat": 0.05},
                                   "cross": {"checker": 0.95, "flat": 0.05}},
                   "brightness": -30.0, "decoy_rate": 0.1},
    },
}

DEFAULTS: dict[str, Any] = {
    "output_dir": "runs/pinned",
    "seed": 0,
    "jobs": 1,
    "alpha": 0.05,
    "source_domain": "source",
    "target_domain": "target",
    "scene": PINNED_SCENE,
    "data": {"n_train": 500, "n_eval": 400, "n_bg_pool": 32},
    "paths": {"train_dataset": None, "datasets": {}, "bg_pool": None, "checkpoint": None},
    "train": {"epochs": 25, "batch_size": 16, "learning_rate": 0.002, "flip": True,
              "color_jitter": True, "resize_crop": False, "holdout_fraction": 0.2,
              "select_by_domain": None},
    "q1_image": {"n_trials": 6},
    "q1_feature": {"layer": "stage1", "n_trials": 6, "fraction": 0.8,
                   "min_drop": 0.08, "score_threshold": 0.5, "holm": False,
                   "comparisons": [[["triangle", "stripes"], ["disc", "dots"]]]},
    "q2_cam": {"bins": list(range(1, N_BINS + 1)), "confidence": 0.85,
               "cam_layer": "stage4", "ablation_layer": "stage1", "n_samples": 8,
               "noise_sigma": None, "feature_bin": 5, "save_cams": True,
               "max_images": None},
    "q3": {"layers": list(LAYERS), "headline_layer": "stage1",
           "n_trials": 6, "fraction": 0.8, "n_resamples": 10, "min_support": 5,
           "min_features": 3,
           "force_test": None},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "scene":
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _require(cond: bool, field: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{field}: {msg}")


def _bins(value, field: str) -> list[int]:
    _require(isinstance(value, list) and value, field, "must be a nonempty list")
    for k in value:
        _require(isinstance(k, int) and 1 <= k <= N_BINS, field, f"bins must lie in 1..{N_BINS}")
    return sorted(set(value))


def parse_bins(text: str) -> list[int]:
    """``"1,3,5"`` or ``"1-9"``."""
    out = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = part.split("-")
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
    except ValueError as exc:
        raise ConfigError(f"bins: cannot parse {text!r}") from exc
    return _bins(out, "bins")


@dataclass
class RunConfig:
    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def out(self) -> Path:
        return Path(self.raw["output_dir"])

    @property
    def domains(self) -> list[str]:
        return [self.raw["source_domain"], self.raw["target_domain"]]

    @property
    def scene(self):
        return scene_spec_from_dict(self.raw["scene"])

    def path(self, key: str) -> Path:
        given = self.raw["paths"].get(key)
        if given:
            return Path(given)
        return {"train_dataset": self.out / "data" / "train" / "manifest.json",
                "bg_pool": self.out / "data" / "bg_pool",
                "checkpoint": self.out / "checkpoint"}[key]

    def dataset_path(self, domain: str) -> Path:
        given = self.raw["paths"].get("datasets", {}).get(domain)
        return Path(given) if given else self.out / "data" / domain / "manifest.json"

    def echo(self) -> dict:
        return copy.deepcopy(self.raw)


def validate(raw: dict) -> RunConfig:
    unknown = set(raw) - set(DEFAULTS)
    _require(not unknown, ",".join(sorted(unknown)), "unknown config key")
    for section in ("data", "paths", "train", "q1_image", "q1_feature", "q2_cam", "q3"):
        extra = set(raw[section]) - set(DEFAULTS[section])
        _require(not extra, f"{section}.{','.join(sorted(extra))}", "unknown config key")
    _require(isinstance(raw["seed"], int) and raw["seed"] >= 0, "seed", "must be an int >= 0")
    _require(isinstance(raw["jobs"], int) and raw["jobs"] >= 1, "jobs", "must be an int >= 1")
    _require(isinstance(raw["alpha"], (int, float)) and 0 < raw["alpha"] < 1, "alpha",
             "must lie in (0, 1)")
    try:
        spec = scene_spec_from_dict(raw["scene"])
    except (SchemaError, TypeError) as exc:
        raise ConfigError(f"scene: {exc}") from exc
    for key in ("source_domain", "target_domain"):
        _require(raw[key] in spec.domains, key, f"{raw[key]!r} not among scene.domains")
    _require(raw["source_domain"] != raw["target_domain"], "target_domain",
             "must differ from source_domain")
    for key in ("n_train", "n_eval", "n_bg_pool"):
        v = raw["data"][key]
        _require(isinstance(v, int) and v >= 1, f"data.{key}", "must be an int >= 1")
    tr = raw["train"]
    _require(isinstance(tr["epochs"], int) and tr["epochs"] >= 1, "train.epochs",
             "must be an int >= 1")
    _require(isinstance(tr["batch_size"], int) and tr["batch_size"] >= 1, "train.batch_size",
             "must be an int >= 1")
    _require(isinstance(tr["learning_rate"], (int, float)) and tr["learning_rate"] > 0,
             "train.learning_rate", "must be > 0")
    sel = tr["select_by_domain"]
    _require(sel is None or sel in spec.domains, "train.select_by_domain",
             f"{sel!r} not among scene.domains")
    for section in ("q1_image", "q1_feature", "q3"):
        n = raw[section]["n_trials"]
        _require(isinstance(n, int) and n >= 1, f"{section}.n_trials", "must be an int >= 1")
    q1 = raw["q1_feature"]
    _require(q1["layer"] in LAYERS, "q1_feature.layer", f"must be one of {LAYERS}")
    _require(0 < q1["fraction"] <= 1, "q1_feature.fraction", "must lie in (0, 1]")
    for i, comp in enumerate(q1["comparisons"]):
        ok = (isinstance(comp, list) and len(comp) == 2
              and all(isinstance(p, list) and len(p) == 2 for p in comp))
        _require(ok, f"q1_feature.comparisons[{i}]", "must be [[fg, bg], [fg, bg]]")
        for fg, bg in comp:
            _require(fg in spec.fg_classes and bg in spec.bg_labels,
                     f"q1_feature.comparisons[{i}]", f"unknown pair ({fg}, {bg})")
    q2 = raw["q2_cam"]
    q2["bins"] = _bins(q2["bins"], "q2_cam.bins")
    for key in ("cam_layer", "ablation_layer"):
        _require(q2[key] in LAYERS, f"q2_cam.{key}", f"must be one of {LAYERS}")
    _require(isinstance(q2["feature_bin"], int) and 1 <= q2["feature_bin"] <= N_BINS,
             "q2_cam.feature_bin", f"must lie in 1..{N_BINS}")
    _require(0 < q2["confidence"] <= 1, "q2_cam.confidence", "must lie in (0, 1]")
    _require(isinstance(q2["n_samples"], int) and q2["n_samples"] >= 1, "q2_cam.n_samples",
             "must be an int >= 1")
    q3 = raw["q3"]
    _require(q3["layers"] and all(l in LAYERS for l in q3["layers"]), "q3.layers",
             f"must be a nonempty subset of {LAYERS}")
    _require(q3["headline_layer"] in q3["layers"], "q3.headline_layer", "must be in q3.layers")
    _require(isinstance(q3["n_resamples"], int) and q3["n_resamples"] >= 1, "q3.n_resamples",
             "must be an int >= 1")
    _require(isinstance(q3["min_features"], int) and q3["min_features"] >= 2, "q3.min_features",
             "must be an int >= 2 (singleton sets make every MMD equal)")
    _require(q3["force_test"] in (None, "wilcoxon", "ttest"), "q3.force_test",
             "must be wilcoxon, ttest or null")
    return RunConfig(raw)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config: file {p} does not exist")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config: invalid YAML ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a mapping")
    merged = deep_merge(DEFAULTS, raw)
    merged = deep_merge(merged, overrides or {})
    return validate(merged)
