"""Pipeline commands.  Each reads its prerequisites from the run directory,
writes JSON and CSV tables next to its intermediate artifacts, and is a pure
function of the config (wall-clock times go to ``logs/`` only)."""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import time
from collections import defaultdict
from pathlib import Path
from typing import Any

import numpy as np
import torch
from PIL import Image
from scipy.stats import spearmanr

from .. import assoc, cam as cammod, interventions as iv, metrics, stats
from ..core import Dataset, LoadError, read_dataset, write_dataset
from ..detector import TinyDetector, TrainConfig, map50, train
from ..synthbench import background_pool, cooccurrence, generate
from .config import ConfigError, PrerequisiteError, RunConfig

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1000


class NumericError(Exception):
    """A result that must be finite is not."""


# -- io helpers ---------------------------------------------------------------

def _clean(obj, where: str = "result"):
    """JSON-ready copy; any NaN or infinity is a numeric failure."""
    if isinstance(obj, dict):
        return {str(k): _clean(v, f"{where}.{k}") for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v, f"{where}[{i}]") for i, v in enumerate(obj)]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if not math.isfinite(v):
            raise NumericError(f"non-finite value at {where}")
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=1, sort_keys=True, allow_nan=False) + "\n")


def read_json(path: Path, command: str):
    if not path.exists():
        raise PrerequisiteError(str(path), command)
    return json.loads(path.read_text())


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(v) else repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _log_timing(cfg: RunConfig, command: str, seconds: float) -> None:
    write_json(cfg.out / "logs" / f"{command}.json", {"command": command, "seconds": seconds})


def _setup(cfg: RunConfig) -> None:
    torch.set_num_threads(cfg["jobs"])
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.out / "config.json", cfg.echo())


def _explicit(cfg: RunConfig, key: str, domain: str | None = None) -> bool:
    paths = cfg["paths"]
    return bool(paths.get("datasets", {}).get(domain)) if domain else bool(paths.get(key))


def load_domain(cfg: RunConfig, domain: str) -> Dataset:
    path = cfg.dataset_path(domain)
    if not path.exists():
        if _explicit(cfg, "datasets", domain):
            raise ConfigError(f"paths.datasets.{domain}: {path} does not exist")
        raise PrerequisiteError(f"dataset for domain {domain!r} ({path})", "synth")
    return read_dataset(path)


def load_model(cfg: RunConfig) -> TinyDetector:
    path = cfg.path("checkpoint")
    if not (path / "index.json").exists():
        if _explicit(cfg, "checkpoint"):
            raise ConfigError(f"paths.checkpoint: {path} holds no checkpoint")
        raise PrerequisiteError(f"checkpoint ({path})", "train")
    return TinyDetector.load(path)


def load_bg_pool(cfg: RunConfig) -> list[np.ndarray]:
    root = cfg.path("bg_pool")
    index = root / "index.json"
    if not index.exists():
        if _explicit(cfg, "bg_pool"):
            raise ConfigError(f"paths.bg_pool: {root} holds no index.json")
        raise PrerequisiteError(f"background pool ({root})", "synth")
    files = json.loads(index.read_text())["files"]
    out = []
    for name in files:
        with Image.open(root / name) as im:
            out.append(np.array(im.convert("RGB")))
    return out


def _pair_key(pair) -> str:
    return f"{pair[0]}|{pair[1]}"


# -- synth / train / eval -----------------------------------------------------

def cmd_synth(cfg: RunConfig) -> dict:
    _setup(cfg)
    t0 = time.perf_counter()
    base = cfg.scene
    data = cfg["data"]
    src = cfg["source_domain"]
    out = cfg.out / "data"
    if out.exists():
        shutil.rmtree(out)
    summary: dict[str, Any] = {"sets": {}}

    def emit(name: str, ds: Dataset) -> None:
        write_dataset(ds, out / name)
        counts = cooccurrence(ds)
        summary["sets"][name] = {
            "domain": ds.domain, "n_images": len(ds), "n_instances": len(ds.annotations()),
            "cooccurrence": {fg: dict(zip(base.bg_labels, counts[i].tolist()))
                             for i, fg in enumerate(base.fg_classes)}}

    base.seed = cfg["seed"]
    emit("train", generate(base, data["n_train"], src))
    base.seed = cfg["seed"] + EVAL_SEED_OFFSET
    for dom in cfg.domains:
        emit(dom, generate(base, data["n_eval"], dom))
    pool = background_pool(data["n_bg_pool"], base.image_size, cfg["seed"])
    pool_dir = out / "bg_pool"
    pool_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, arr in enumerate(pool):
        name = f"bg_{i:04d}.png"
        Image.fromarray(arr).save(pool_dir / name, format="PNG", compress_level=6)
        names.append(name)
    write_json(pool_dir / "index.json", {"files": names})
    summary["bg_pool"] = len(names)
    write_json(cfg.out / "synth.json", summary)
    _log_timing(cfg, "synth", time.perf_counter() - t0)
    return summary


def cmd_train(cfg: RunConfig) -> dict:
    _setup(cfg)
    t0 = time.perf_counter()
    path = cfg.path("train_dataset")
    if not path.exists():
        if _explicit(cfg, "train_dataset"):
            raise ConfigError(f"paths.train_dataset: {path} does not exist")
        raise PrerequisiteError(f"training dataset ({path})", "synth")
    ds = read_dataset(path)
    tr = dict(cfg["train"])
    select = tr.pop("select_by_domain")
    tc = TrainConfig(seed=cfg["seed"], **tr)
    select_ds = load_domain(cfg, select) if select else None
    model, history = train(ds, tc, select_dataset=select_ds)
    ck = cfg.path("checkpoint")
    if ck.exists():
        shutil.rmtree(ck)
    model.save(ck, extra={"select_by_domain": select})
    doc = {"config": {**tr, "seed": cfg["seed"], "select_by_domain": select},
           "history": history, "n_train_images": len(ds)}
    write_json(cfg.out / "train.json", doc)
    _log_timing(cfg, "train", time.perf_counter() - t0)
    return doc


def cmd_eval(cfg: RunConfig) -> dict:
    """mAP@50 per domain (rows) and class (columns)."""
    _setup(cfg)
    t0 = time.perf_counter()
    model = load_model(cfg)
    sets = {}
    train_path = cfg.path("train_dataset")
    if train_path.exists():
        sets["train"] = read_dataset(train_path)
    for dom in cfg.domains:
        sets[dom] = load_domain(cfg, dom)
    table = {}
    for name, ds in sets.items():
        dets = [d for per in model.predict_many(ds.images) for d in per]
        res = map50(dets, ds.annotations())
        per_class = {ds.label_space.fg_classes[c]: ap for c, ap in sorted(res["per_class"].items())}
        table[name] = {"per_class": per_class, "map50": res["map"], "n_images": len(ds)}
    classes = list(model.label_space.fg_classes)
    rows = [[name] + [table[name]["per_class"].get(c) for c in classes] + [table[name]["map50"]]
            for name in table]
    write_csv(cfg.out / "eval.csv", ["set"] + classes + ["map50"], rows)
    doc = {"table": table, "classes": classes}
    write_json(cfg.out / "eval.json", doc)
    _log_timing(cfg, "eval", time.perf_counter() - t0)
    return doc


# -- Q1 -----------------------------------------------------------------------

def cmd_q1_image(cfg: RunConfig) -> dict:
    _setup(cfg)
    t0 = time.perf_counter()
    model = load_model(cfg)
    datasets = {dom: load_domain(cfg, dom) for dom in cfg.domains}
    pool = load_bg_pool(cfg)
    n_trials = cfg["q1_image"]["n_trials"]
    res = iv.run_q1_image_space(model, datasets, pool, n_trials, cfg["seed"])
    summary = res["summary"]
    rows = [[dom, s["baseline"], s["mean"], s["std"]] + s["trials"] for dom, s in summary.items()]
    write_csv(cfg.out / "q1_image.csv",
              ["domain", "baseline_map50", "mean_map50", "std_map50"]
              + [f"trial_{t}" for t in range(1, n_trials + 1)], rows)
    doc = {"summary": summary, "n_trials": n_trials, "bg_pool_size": len(pool)}
    write_json(cfg.out / "q1_image.json", doc)
    _log_timing(cfg, "q1-image", time.perf_counter() - t0)
    return doc


def _outcomes_json(outcomes: dict[str, list[iv.ImageOutcome]], n_images: int) -> dict:
    doc = {"n_images": n_images, "labels": {}}
    for bg, outs in outcomes.items():
        doc["labels"][bg] = [
            {"image_index": o.image_index, "tps": o.tps,
             "events": [{"image_id": e.image_id, "instance_id": e.instance_id,
                         "fg_class": e.fg_class, "removed": e.removed, "reason": e.reason,
                         "iou_before": e.iou_before, "iou_after": e.iou_after} for e in o.events],
             "retained": [list(r) for r in o.retained]}
            for o in outs]
    return doc


def load_outcomes(cfg: RunConfig, domain: str) -> tuple[dict[str, list[iv.ImageOutcome]], int]:
    doc = read_json(cfg.out / "q1_feature" / domain / "outcomes.json", "q1-feature")
    out = {}
    for bg, outs in doc["labels"].items():
        out[bg] = [iv.ImageOutcome(o["image_index"], dict(o["tps"]),
                                   [iv.DropEvent(**e) for e in o["events"]],
                                   [tuple(r) for r in o["retained"]]) for o in outs]
    return out, doc["n_images"]


def _trial_rates(trials: list[iv.TrialResult], pair) -> list[float | None]:
    return [tr.drop_rate(pair) for tr in trials]


def cmd_q1_feature(cfg: RunConfig) -> dict:
    """Per-pair drop rates over trials; significant pairs and planted-vs-control tests."""
    _setup(cfg)
    t0 = time.perf_counter()
    q = cfg["q1_feature"]
    alpha = cfg["alpha"]
    layer = q["layer"]
    model = load_model(cfg)
    doc: dict[str, Any] = {"layer": layer, "alpha": alpha, "min_drop": q["min_drop"],
                           "holm": q["holm"], "min_support": iv.MIN_SUPPORT, "domains": {}}
    rows, comp_rows = [], []
    for dom in cfg.domains:
        ds = load_domain(cfg, dom)
        res = iv.run_q1_feature_trials(model, ds, ds.label_space.bg_labels, layer, q["n_trials"],
                                       cfg["seed"], q["fraction"], q["score_threshold"])
        write_json(cfg.out / "q1_feature" / dom / "outcomes.json",
                   _outcomes_json(res["outcomes"], len(ds)))
        pairs = []
        for pair, pc in sorted(res["totals"].items()):
            if pc.tp == 0:
                continue
            rates = _trial_rates(res["trials"], pair)
            vals = np.array([r for r in rates if r is not None])
            test = stats.wilcoxon_signed_rank(vals, alpha=alpha) if vals.size else \
                stats.TestResult.inapplicable("wilcoxon", 0, alpha, "no trial support")
            reasons = defaultdict(int)
            for o in res["outcomes"][pair[1]]:
                for e in o.events:
                    if e.fg_class == pair[0]:
                        reasons[e.reason] += 1
            pairs.append({
                "fg": pair[0], "bg": pair[1], "tp": pc.tp, "drops": pc.drops,
                "drop_rate": pc.drop_rate, "trial_drop_rates": rates,
                "mean": float(vals.mean()) if vals.size else None,
                "std": float(vals.std(ddof=1)) if vals.size > 1 else None,
                "test": test.to_json(), "p_holm": None,
                "reasons": dict(sorted(reasons.items())),
                "low_support": pc.tp < iv.MIN_SUPPORT})
        tested = [p for p in pairs if p["test"]["p_value"] is not None]
        for p, adj in zip(tested, stats.holm([p["test"]["p_value"] for p in tested])
                          if tested else []):
            p["p_holm"] = adj
        for p in pairs:
            pval = p["p_holm"] if q["holm"] else p["test"]["p_value"]
            p["significant"] = bool(not p["low_support"] and pval is not None and pval < alpha
                                    and p["mean"] >= q["min_drop"])
            rows.append([dom, p["fg"], p["bg"], p["tp"], p["drops"], p["drop_rate"], p["mean"],
                         p["std"], p["test"]["p_value"], p["p_holm"],
                         stats.stars(p["test"]["p_value"]), p["significant"]])
        comps = []
        for a, b in q["comparisons"]:
            ra = _trial_rates(res["trials"], tuple(a))
            rb = _trial_rates(res["trials"], tuple(b))
            both = [(x, y) for x, y in zip(ra, rb) if x is not None and y is not None]
            entry = {"a": list(a), "b": list(b), "trial_rates_a": ra, "trial_rates_b": rb,
                     "n_trials": len(both), "a_wins": sum(x > y for x, y in both)}
            if both:
                x, y = map(np.array, zip(*both))
                entry["test"] = stats.wilcoxon_signed_rank(x, y, alpha).to_json()
            else:
                entry["test"] = stats.TestResult.inapplicable("wilcoxon", 0, alpha,
                                                              "pair absent").to_json()
            comps.append(entry)
            comp_rows.append([dom, "|".join(a), "|".join(b), entry["n_trials"], entry["a_wins"],
                              entry["test"]["p_value"]])
        doc["domains"][dom] = {
            "pairs": pairs, "comparisons": comps,
            "significant_pairs": [[p["fg"], p["bg"]] for p in pairs if p["significant"]],
            "trials": [{"trial": tr.trial,
                        "tps": {_pair_key(p): v for p, v in sorted(tr.tps.items())},
                        "drops": {_pair_key(p): v for p, v in sorted(tr.drops.items())}}
                       for tr in res["trials"]]}
    write_csv(cfg.out / "q1_feature.csv",
              ["domain", "fg", "bg", "tp", "drops", "drop_rate", "mean_trial_drop",
               "std_trial_drop", "p_value", "p_holm", "stars", "significant"], rows)
    write_csv(cfg.out / "q1_feature_comparisons.csv",
              ["domain", "pair_a", "pair_b", "n_trials", "a_wins", "p_value"], comp_rows)
    write_json(cfg.out / "q1_feature.json", doc)
    _log_timing(cfg, "q1-feature", time.perf_counter() - t0)
    return doc


# -- Q2 -----------------------------------------------------------------------

def _file_safe(instance_id: str) -> str:
    return instance_id.replace("#", "_")


def cmd_q2_cam(cfg: RunConfig) -> dict:
    """Drop rate per CAM bin, hit ratios, saved CAMs and per-instance feature stores."""
    _setup(cfg)
    t0 = time.perf_counter()
    q = cfg["q2_cam"]
    layers = cfg["q3"]["layers"]
    model = load_model(cfg)
    doc: dict[str, Any] = {"bins": q["bins"], "cam_layer": q["cam_layer"],
                           "ablation_layer": q["ablation_layer"], "confidence": q["confidence"],
                           "feature_bin": q["feature_bin"], "domains": {}}
    bin_rows, hit_rows = [], []
    for dom in cfg.domains:
        ds = load_domain(cfg, dom)
        if q["max_images"]:
            ds = ds.subset(range(min(len(ds), q["max_images"])))
        res = iv.run_q2_cam_bins(model, ds, q["bins"], q["confidence"], q["cam_layer"],
                                 q["ablation_layer"], q["n_samples"], q["noise_sigma"],
                                 cfg["seed"])
        masks = {}
        cam_dir = cfg.out / "q2_cam" / dom / "cams"
        if cam_dir.exists():
            shutil.rmtree(cam_dir)
        for ci in res["instances"]:
            inst = ds.images[ci.image_index].instance(ci.instance_id)
            ladder = cammod.bin_ladder(ci.cam, inst.instance_mask)
            masks[ci.instance_id] = ladder[q["feature_bin"] - 1].mask
            if q["save_cams"]:
                cammod.save_cam(ci.cam, cam_dir / f"{_file_safe(ci.instance_id)}.cbt")
        items, skipped_bg = assoc.collect_features(model, ds, res["instances"], masks, layers)
        assoc.save_feature_store(cfg.out / "features" / dom, dom, items)
        per_bin = res["per_bin"]
        valid = [(k, v) for k, v in per_bin.items() if v is not None]
        rho = None
        if len(valid) > 1 and len({v for _, v in valid}) > 1:
            rho = float(spearmanr([k for k, _ in valid], [v for _, v in valid]).statistic)
        hits = {}
        for k in q["bins"]:
            pairs = [ci.hits[k] for ci in res["instances"]]
            hits[k] = {"fg_mean": float(np.mean([p[0] for p in pairs])) if pairs else None,
                       "bg_mean": float(np.mean([p[1] for p in pairs])) if pairs else None}
        doc["domains"][dom] = {
            "per_bin": per_bin, "per_class": res["per_class"], "hit_ratio": hits,
            "spearman_bin_drop": rho, "n_instances": res["n_instances"],
            "skipped_degenerate": res["skipped_degenerate"],
            "feature_records": len(items), "skipped_no_background": skipped_bg,
            "instances": [{"instance_id": ci.instance_id, "fg_class": ci.fg_class,
                           "confidence": ci.confidence, "cam_max": ci.cam.normalization,
                           "dropped": ci.dropped, "reasons": ci.reasons}
                          for ci in res["instances"]]}
        bin_rows.append([dom, "all"] + [per_bin[k] for k in q["bins"]])
        for fg, row in sorted(res["per_class"].items()):
            bin_rows.append([dom, fg] + [row[k] for k in q["bins"]])
        for k in q["bins"]:
            if k in cammod.REPORTED_BINS:
                hit_rows.append([dom, k, hits[k]["fg_mean"], hits[k]["bg_mean"]])
    write_csv(cfg.out / "q2_cam_bins.csv", ["domain", "class"] + [f"bin_{k}" for k in q["bins"]],
              bin_rows)
    write_csv(cfg.out / "q2_cam_hits.csv", ["domain", "bin", "fg_mean", "bg_mean"], hit_rows)
    write_json(cfg.out / "q2_cam.json", doc)
    _log_timing(cfg, "q2-cam", time.perf_counter() - t0)
    return doc


# -- Q3 -----------------------------------------------------------------------

class DomainState:
    """Everything Q3 needs from one domain: drop outcomes and feature store."""

    def __init__(self, cfg: RunConfig, domain: str):
        self.domain = domain
        self.outcomes, self.n_images = load_outcomes(cfg, domain)
        store = cfg.out / "features" / domain
        if not (store / "index.json").exists():
            raise PrerequisiteError(f"feature store for {domain!r} ({store})", "q2-cam")
        self.features = assoc.load_feature_store(store)

    def partition(self, keep: set[int] | None = None) -> assoc.AssociationPartition:
        part = assoc.AssociationPartition()
        for bg, outs in sorted(self.outcomes.items()):
            outs = [o for o in outs if keep is None or o.image_index in keep]
            assoc.partition([e for o in outs for e in o.events],
                            [r for o in outs for r in o.retained],
                            self.features, bg, self.domain, into=part)
        return part

    def pairs(self, keep: set[int] | None = None) -> dict[tuple[str, str], iv.PairCount]:
        out = {}
        for bg, outs in self.outcomes.items():
            out.update(iv.aggregate_pairs(outs, bg, keep))
        return out


def _balanced(part: assoc.AssociationPartition, pair, layer: str, seed: int):
    fa = part.feature_set(pair, layer, True)
    fna = part.feature_set(pair, layer, False)
    if len(fa) == 0 or len(fna) == 0:
        return None
    idx, low = assoc.balance_sample(list(range(len(fa))), list(range(len(fna))), seed)
    return fa, fna.take(idx), low


def _supported(states: list[DomainState], parts, layer: str, min_support: int,
               min_features: int):
    counts = [s.pairs() for s in states]
    keys = sorted(set().union(*[set(c) for c in counts]))
    supported, excluded = [], {}
    for pair in keys:
        tps = [c.get(pair, iv.PairCount()).tp for c in counts]
        sizes = [(len(p.feature_set(pair, layer, True)), len(p.feature_set(pair, layer, False)))
                 for p in parts]
        if min(tps) < min_support:
            excluded[_pair_key(pair)] = f"fewer than {min_support} true positives in a domain"
        elif any(a < min_features for a, _ in sizes):
            excluded[_pair_key(pair)] = f"fewer than {min_features} associated features in a domain"
        elif any(n < min_features for _, n in sizes):
            excluded[_pair_key(pair)] = \
                f"fewer than {min_features} non-associated features in a domain"
        else:
            supported.append(pair)
    return supported, excluded


def _case_counts(labels: dict[str, dict]) -> dict:
    counts = {"C1": 0, "C2": 0, "C3": 0, "-": 0}
    for lab in labels.values():
        counts[lab["case"] if lab else "-"] += 1
    counts["n_pairs"] = len(labels)
    return counts


def _label(a, b, cfg: RunConfig, pair, force: str | None):
    if len(a) == 0:
        return None
    return stats.classify_case(a, b, cfg["alpha"], force or cfg["q3"]["force_test"],
                               pair=pair).to_json()


def cmd_q3_gradient(cfg: RunConfig, force_test: str | None = None) -> dict:
    """Association gradients per domain, with source/target case labels over trials."""
    _setup(cfg)
    t0 = time.perf_counter()
    q = cfg["q3"]
    seed = cfg["seed"]
    states = [DomainState(cfg, d) for d in cfg.domains]
    full_parts = [s.partition() for s in states]
    supported, excluded = _supported(states, full_parts, q["headline_layer"], q["min_support"],
                                     q["min_features"])
    totals = [s.pairs() for s in states]
    trial_keep = [[set(iv.trial_indices(s.n_images, t, seed, q["fraction"]).tolist())
                   for t in range(1, q["n_trials"] + 1)] for s in states]
    trial_parts = [[s.partition(keep) for keep in keeps] for s, keeps in zip(states, trial_keep)]
    trial_pairs = [[s.pairs(keep) for keep in keeps] for s, keeps in zip(states, trial_keep)]
    doc: dict[str, Any] = {"layers": q["layers"], "headline_layer": q["headline_layer"],
                           "supported": [_pair_key(p) for p in supported],
                           "excluded": excluded, "results": {}, "cases": {}}
    rows, case_rows, degenerate_log = [], [], []
    for layer in q["layers"]:
        labels = {}
        for pair in supported:
            key = _pair_key(pair)
            entry: dict[str, Any] = {"domains": {}, "trials": []}
            for d, (state, part) in enumerate(zip(states, full_parts)):
                bal = _balanced(part, pair, layer, seed * 100 + d)
                rate = totals[d][pair].drop_rate
                g = metrics.association_gradient(rate, metrics.context_mmds(bal[0], bal[1]))
                flags = (["degenerate"] if g.degenerate else []) + \
                    (["negative_denominator"] if g.negative_denominator else []) + \
                    (["low_support"] if bal[2] else [])
                if g.degenerate:
                    degenerate_log.append(f"{key} {layer} {state.domain}: |D|={abs(g.denominator):.2e}")
                entry["domains"][state.domain] = {
                    **g.mmds, "drop_rate": rate, "denominator": g.denominator,
                    "gradient": g.value, "flags": flags, "n_a": len(bal[0]), "n_na": len(bal[1])}
                rows.append([key, layer, state.domain, g.mmds["f2f"], g.mmds["f2b"],
                             g.mmds["b2f"], g.mmds["b2b"], rate, g.value, ";".join(flags)])
            s_vals, t_vals = [], []
            for t in range(q["n_trials"]):
                vals = []
                for d in range(len(states)):
                    pc = trial_pairs[d][t].get(pair)
                    bal = _balanced(trial_parts[d][t], pair, layer, seed * 100 + 10 * (t + 1) + d)
                    if pc is None or pc.tp == 0 or bal is None:
                        vals.append(None)
                        continue
                    g = metrics.association_gradient(pc.drop_rate,
                                                     metrics.context_mmds(bal[0], bal[1]))
                    vals.append(g.value)
                entry["trials"].append(vals)
                if all(v is not None for v in vals):
                    s_vals.append(vals[0])
                    t_vals.append(vals[1])
                else:
                    degenerate_log.append(f"{key} {layer} trial {t + 1}: excluded")
            entry["case"] = _label(np.array(s_vals), np.array(t_vals), cfg, pair, force_test)
            labels[key] = entry["case"]
            doc["results"].setdefault(layer, {})[key] = entry
        doc["cases"][layer] = {"counts": _case_counts(labels),
                               "labels": {k: (v["case"] if v else "-") for k, v in labels.items()}}
        c = doc["cases"][layer]["counts"]
        case_rows.append([layer, c["C1"], c["C2"], c["C3"], c["-"], c["n_pairs"]])
    head = doc["results"].get(q["headline_layer"], {})
    finite = [k for k, e in head.items()
              if all(v["gradient"] is not None for v in e["domains"].values())]
    doc["finite_fraction"] = len(finite) / len(head) if head else None
    doc["degenerate_log"] = degenerate_log
    for line in degenerate_log:
        log.info("gradient exclusion: %s", line)
    write_csv(cfg.out / "q3_gradient.csv",
              ["pair", "layer", "domain", "f2f", "f2b", "b2f", "b2b", "drop_rate", "gradient",
               "flags"], rows)
    write_csv(cfg.out / "q3_gradient_cases.csv", ["layer", "C1", "C2", "C3", "unmeasurable",
                                                  "n_pairs"], case_rows)
    write_json(cfg.out / "q3_gradient.json", doc)
    _log_timing(cfg, "q3-gradient", time.perf_counter() - t0)
    return doc


def _subsample(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    k = max(1, int(round(n * fraction)))
    return np.sort(rng.choice(n, size=k, replace=False))


def cmd_q3_crossdomain(cfg: RunConfig, force_test: str | None = None) -> dict:
    """sum_aa against sum_nana over seeded resamples, per pair and layer."""
    _setup(cfg)
    t0 = time.perf_counter()
    q = cfg["q3"]
    seed = cfg["seed"]
    states = [DomainState(cfg, d) for d in cfg.domains]
    parts = [s.partition() for s in states]
    supported, excluded = _supported(states, parts, q["headline_layer"], q["min_support"],
                                     q["min_features"])
    doc: dict[str, Any] = {"layers": q["layers"], "headline_layer": q["headline_layer"],
                           "n_resamples": q["n_resamples"], "fraction": q["fraction"],
                           "supported": [_pair_key(p) for p in supported],
                           "excluded": excluded, "results": {}, "cases": {}}
    rows, case_rows = [], []
    for layer in q["layers"]:
        labels = {}
        for pair in supported:
            key = _pair_key(pair)
            sets = [(p.feature_set(pair, layer, True), p.feature_set(pair, layer, False))
                    for p in parts]
            aa, nn, low = [], [], False
            for r in range(1, q["n_resamples"] + 1):
                rng = np.random.default_rng([seed, r, 0xC5])
                picked = []
                for d, (fa, fna) in enumerate(sets):
                    fa = fa.take(_subsample(len(fa), q["fraction"], rng))
                    fna = fna.take(_subsample(len(fna), q["fraction"], rng))
                    idx, flag = assoc.balance_sample(list(range(len(fa))), list(range(len(fna))),
                                                     seed * 10_000 + r * 10 + d)
                    low = low or flag
                    picked.append((fa, fna.take(idx)))
                s = metrics.cross_domain_sums(picked[0][0], picked[1][0], picked[0][1],
                                              picked[1][1])
                aa.append(s["sum_aa"])
                nn.append(s["sum_nana"])
            case = _label(np.array(aa), np.array(nn), cfg, pair, force_test)
            labels[key] = case
            doc["results"].setdefault(layer, {})[key] = {
                "sum_aa": aa, "sum_nana": nn, "mean_sum_aa": float(np.mean(aa)),
                "mean_sum_nana": float(np.mean(nn)), "low_support": low, "case": case,
                "sizes": {s.domain: {"n_a": len(fa), "n_na": len(fna)}
                          for s, (fa, fna) in zip(states, sets)}}
            rows.append([key, layer, float(np.mean(aa)), float(np.mean(nn)), case["case"],
                         case["test"]["p_value"], "low_support" if low else ""])
        doc["cases"][layer] = {"counts": _case_counts(labels),
                               "labels": {k: (v["case"] if v else "-") for k, v in labels.items()}}
        c = doc["cases"][layer]["counts"]
        case_rows.append([layer, c["C1"], c["C2"], c["C3"], c["-"], c["n_pairs"]])
    write_csv(cfg.out / "q3_crossdomain.csv",
              ["pair", "layer", "mean_sum_aa", "mean_sum_nana", "case", "p_value", "flags"], rows)
    write_csv(cfg.out / "q3_crossdomain_cases.csv",
              ["layer", "C1", "C2", "C3", "unmeasurable", "n_pairs"], case_rows)
    write_json(cfg.out / "q3_crossdomain.json", doc)
    _log_timing(cfg, "q3-crossdomain", time.perf_counter() - t0)
    return doc


__all__ = ["cmd_synth", "cmd_train", "cmd_eval", "cmd_q1_image", "cmd_q1_feature", "cmd_q2_cam",
           "cmd_q3_gradient", "cmd_q3_crossdomain", "NumericError", "LoadError"]
