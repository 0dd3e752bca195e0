"""Consolidated report: tables from every finished experiment, CSV and plots."""

from __future__ import annotations

import datetime as _dt
import json
import platform
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .. import __version__  # noqa: E402
from ..stats import stars, wilcoxon_signed_rank  # noqa: E402
from .commands import write_csv, write_json  # noqa: E402
from .config import PrerequisiteError  # noqa: E402

SECTIONS = ("eval", "q1_image", "q1_feature", "q2_cam", "q3_gradient", "q3_crossdomain")

_ROW = {"type": "object"}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["run_info", "config", "sections", "tables"],
    "properties": {
        "run_info": {"type": "object", "required": ["timestamp", "environment", "wall_clock"]},
        "sections": {"type": "array", "items": {"enum": list(SECTIONS)}, "minItems": 1},
        "tables": {
            "type": "object",
            "properties": {
                "map50_by_domain": {"type": "array", "items": _ROW},
                "image_space_map": {"type": "array", "items": _ROW},
                "significant_pairs": {"type": "array", "items": _ROW},
                "drop_by_bin": {"type": "array", "items": _ROW},
                "hit_ratio": {"type": "array", "items": _ROW},
                "gradient_cases": {"type": "array", "items": _ROW},
                "crossdomain_cases": {"type": "array", "items": _ROW},
            },
        },
    },
}

# Table key(s) each section contributes.
SECTION_TABLES = {
    "eval": ("map50_by_domain",),
    "q1_image": ("image_space_map",),
    "q1_feature": ("significant_pairs",),
    "q2_cam": ("drop_by_bin", "hit_ratio"),
    "q3_gradient": ("gradient_cases",),
    "q3_crossdomain": ("crossdomain_cases",),
}

PNG_META = {"Software": None}


def environment() -> dict:
    import scipy
    import torch

    return {"python": platform.python_version(), "platform": platform.platform(),
            "numpy": np.__version__, "scipy": scipy.__version__, "torch": torch.__version__,
            "ctxbias": __version__}


def _tables(docs: dict) -> dict:
    t: dict[str, list] = {}
    if "eval" in docs:
        d = docs["eval"]
        t["map50_by_domain"] = [{"set": k, "map50": v["map50"], **v["per_class"]}
                                for k, v in d["table"].items()]
    if "q1_image" in docs:
        t["image_space_map"] = [{"domain": k, "baseline": v["baseline"], "mean": v["mean"],
                                 "std": v["std"]} for k, v in docs["q1_image"]["summary"].items()]
    if "q1_feature" in docs:
        rows = []
        for dom, d in docs["q1_feature"]["domains"].items():
            for p in d["pairs"]:
                if p["significant"]:
                    rows.append({"domain": dom, "fg": p["fg"], "bg": p["bg"],
                                 "mean_drop": p["mean"], "p_value": p["test"]["p_value"]})
        t["significant_pairs"] = rows
    if "q2_cam" in docs:
        drop, hits = [], []
        for dom, d in docs["q2_cam"]["domains"].items():
            drop.append({"domain": dom, **{f"bin_{k}": v for k, v in d["per_bin"].items()}})
            for k, h in d["hit_ratio"].items():
                hits.append({"domain": dom, "bin": int(k), **h})
        t["drop_by_bin"], t["hit_ratio"] = drop, hits
    for name, key in (("q3_gradient", "gradient_cases"), ("q3_crossdomain", "crossdomain_cases")):
        if name in docs:
            t[key] = [{"layer": layer, **c["counts"]} for layer, c in docs[name]["cases"].items()]
    return t


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def _annotate(ax, x1: float, x2: float, y: float, label: str) -> None:
    ax.plot([x1, x1, x2, x2], [y, y * 1.02, y * 1.02, y], color="black", lw=1)
    ax.text((x1 + x2) / 2, y * 1.03, label, ha="center", va="bottom")


def plot_image_space(doc: dict, path: Path) -> None:
    summary = doc["summary"]
    names = list(summary)
    data = [summary[n]["trials"] for n in names]
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.boxplot(data, tick_labels=names)
    for i, n in enumerate(names, start=1):
        ax.plot([i], [summary[n]["baseline"]], marker="D", color="tab:red")
    if len(names) == 2:
        res = wilcoxon_signed_rank(data[0], data[1])
        _annotate(ax, 1, 2, max(max(v) for v in data + [[summary[n]["baseline"]]
                                                          for n in names]), stars(res.p_value))
    ax.set_ylabel("mAP@50 after background swap")
    fig.tight_layout()
    _save(fig, path)


def plot_pair_graph(dom_doc: dict, path: Path, title: str) -> None:
    """FG classes left, BG labels right; bold edges mark significant pairs."""
    pairs = dom_doc["pairs"]
    fgs = sorted({p["fg"] for p in pairs})
    bgs = sorted({p["bg"] for p in pairs})
    yf = {f: i for i, f in enumerate(reversed(fgs))}
    yb = {b: i * (max(len(fgs) - 1, 1) / max(len(bgs) - 1, 1)) for i, b in enumerate(reversed(bgs))}
    fig, ax = plt.subplots(figsize=(5, 4))
    for p in pairs:
        fg, bg = p["fg"], p["bg"]
        sig = p["significant"]
        ax.plot([0, 1], [yf[fg], yb[bg]], color="black" if sig else "0.7", lw=3.0 if sig else 0.8)
        if p["mean"] is not None:
            t = 0.7
            ax.text(t, (1 - t) * yf[fg] + t * yb[bg], f"{p['mean']:.2f}", fontsize=7,
                    fontweight="bold" if sig else "normal")
    for f, y in yf.items():
        ax.text(-0.05, y, f, ha="right", va="center")
    for b, y in yb.items():
        ax.text(1.05, y, b, ha="left", va="center")
    ax.set_xlim(-0.5, 1.5)
    ax.axis("off")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def plot_bins(doc: dict, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for dom, d in doc["domains"].items():
        ks = sorted(int(k) for k in d["per_bin"])
        ax.plot(ks, [d["per_bin"][str(k)] for k in ks], marker="o", label=dom)
    ax.set_xlabel("CAM bin")
    ax.set_ylabel("mean drop rate")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_paired_boxes(groups: list[tuple[str, list, list, float | None]], labels: tuple[str, str],
                      path: Path, ylabel: str) -> None:
    """Side-by-side boxes per pair with significance stars above each couple."""
    if not groups:
        return
    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(groups)), 3.8))
    for i, (name, a, b, p) in enumerate(groups):
        x = 3 * i
        for off, vals, color in ((1, a, "tab:blue"), (2, b, "tab:orange")):
            if vals:
                bp = ax.boxplot([vals], positions=[x + off], widths=0.7, patch_artist=True)
                bp["boxes"][0].set_facecolor(color)
        top = max([v for v in a + b] or [0.0])
        _annotate(ax, x + 1, x + 2, top if top > 0 else 1e-3, stars(p))
    ax.set_xticks([3 * i + 1.5 for i in range(len(groups))])
    ax.set_xticklabels([g[0] for g in groups], rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.plot([], [], color="tab:blue", lw=6, label=labels[0])
    ax.plot([], [], color="tab:orange", lw=6, label=labels[1])
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def _p(case) -> float | None:
    return case["test"]["p_value"] if case else None


def build_report(out: Path) -> dict:
    docs = {}
    for name in SECTIONS:
        path = out / f"{name}.json"
        if path.exists():
            docs[name] = json.loads(path.read_text())
    if not docs:
        raise PrerequisiteError("experiment outputs", "q1-image/q1-feature/q2-cam/q3-*")
    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    for stale in plots.glob("*.png"):
        stale.unlink()
    if "q1_image" in docs:
        plot_image_space(docs["q1_image"], plots / "q1_image_box.png")
    if "q1_feature" in docs:
        for dom, d in docs["q1_feature"]["domains"].items():
            plot_pair_graph(d, plots / f"q1_feature_pairs_{dom}.png", f"drop rate ({dom})")
    if "q2_cam" in docs:
        plot_bins(docs["q2_cam"], plots / "q2_cam_bins.png")
    if "q3_gradient" in docs:
        g = docs["q3_gradient"]
        head = g["results"].get(g["headline_layer"], {})
        groups = []
        for key, e in sorted(head.items()):
            vals = [tr for tr in e["trials"] if all(v is not None for v in tr)]
            groups.append((key, [v[0] for v in vals], [v[1] for v in vals], _p(e["case"])))
        plot_paired_boxes(groups, ("source", "target"), plots / "q3_gradient_box.png",
                          "association gradient")
    if "q3_crossdomain" in docs:
        c = docs["q3_crossdomain"]
        head = c["results"].get(c["headline_layer"], {})
        groups = [(k, e["sum_aa"], e["sum_nana"], _p(e["case"])) for k, e in sorted(head.items())]
        plot_paired_boxes(groups, ("sum_aa", "sum_nana"), plots / "q3_crossdomain_box.png",
                          "cross-domain MMD sum")
    tables = _tables(docs)
    wall = {}
    for log in sorted((out / "logs").glob("*.json")) if (out / "logs").exists() else []:
        wall[log.stem] = json.loads(log.read_text())["seconds"]
    config = json.loads((out / "config.json").read_text()) if (out / "config.json").exists() else {}
    report = {
        "run_info": {"timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
                     "environment": environment(), "wall_clock": wall},
        "config": config,
        "sections": list(docs),
        "tables": tables,
        "results": docs,
        "plots": sorted(p.name for p in plots.glob("*.png")),
    }
    write_json(out / "report.json", report)
    rows = []
    for tname, trows in tables.items():
        for i, row in enumerate(trows):
            for col, val in row.items():
                rows.append([tname, i, col, val])
    write_csv(out / "report.csv", ["table", "row", "column", "value"], rows)
    return report
