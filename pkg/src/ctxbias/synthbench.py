"""Synthetic multi-domain detection scenes with a planted FG-BG correlation.

Each image is a grid of rectangular background regions, each painted with one
texture label.  Every foreground object sits inside one region, and the label
of that region is drawn from the domain's association table ``P(bg | fg)``, so
the co-occurrence statistics are controlled exactly.  Optional decoys (shapes
that are *not* annotated) are painted on non-associated textures, which makes
the associated texture a causal cue for the detector rather than a mere
correlate.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import (CtxBiasError, Dataset, DomainId, ImageRecord, InstanceAnnotation,
                   LabelSpace, SchemaError, SemanticMap, mask_to_bbox)


class GenerationError(CtxBiasError):
    pass


SHAPES = ("disc", "triangle", "cross", "square")
TEXTURES = ("stripes", "dots", "flat", "checker")

DEFAULT_PALETTE = {
    "stripes": ((40, 60, 150), (200, 200, 90)),
    "dots": ((60, 130, 60), (230, 120, 40)),
    "flat": ((110, 90, 80), (110, 90, 80)),
    "checker": ((150, 50, 60), (70, 170, 180)),
}


@dataclass
class DomainSpec:
    """Rendering and association parameters of one domain.

    ``association`` maps each fg class to a distribution over bg labels.
    Classes missing from the table are placed uniformly.
    """

    association: dict[str, dict[str, float]] = field(default_factory=dict)
    brightness: float = 0.0
    palette: dict[str, tuple[tuple[int, int, int], tuple[int, int, int]]] | None = None
    texture_swap_prob: float = 0.0
    decoy_rate: float = 0.0


@dataclass
class SceneSpec:
    image_size: int = 64
    grid: int = 2
    fg_classes: tuple[str, ...] = ("disc", "triangle", "cross")
    bg_labels: tuple[str, ...] = ("stripes", "dots", "flat", "checker")
    size_range: tuple[int, int] = (14, 22)
    objects_per_image: tuple[int, int] = (1, 3)
    margin: int = 3
    noise_sigma: float = 6.0
    domains: dict[str, DomainSpec] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.fg_classes = tuple(self.fg_classes)
        self.bg_labels = tuple(self.bg_labels)
        if len(self.fg_classes) < 2 or len(self.bg_labels) < 2:
            raise SchemaError("need at least 2 fg classes and 2 bg labels")
        if len(self.domains) < 2:
            raise SchemaError("need at least 2 domains")
        for name in self.fg_classes:
            if name not in SHAPES:
                raise SchemaError(f"unknown shape {name!r}; choose from {SHAPES}")
        for name in self.bg_labels:
            if name not in TEXTURES:
                raise SchemaError(f"unknown texture {name!r}; choose from {TEXTURES}")
        for dname, dom in self.domains.items():
            for fg, row in dom.association.items():
                if fg not in self.fg_classes:
                    raise SchemaError(f"{dname}: association row for unknown class {fg!r}")
                if any(bg not in self.bg_labels for bg in row):
                    raise SchemaError(f"{dname}: association row {fg!r} names unknown labels")
                if abs(sum(row.values()) - 1.0) > 1e-9 or min(row.values()) < 0:
                    raise SchemaError(f"{dname}: association row {fg!r} must sum to 1")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi <= self.grid ** 2:
            raise SchemaError("objects_per_image must lie within [1, grid**2]")

    @property
    def label_space(self) -> LabelSpace:
        return LabelSpace(self.fg_classes, self.bg_labels)

    def association_row(self, domain: str, fg: str) -> np.ndarray:
        row = self.domains[domain].association.get(fg)
        if row is None:
            return np.full(len(self.bg_labels), 1.0 / len(self.bg_labels))
        return np.array([row.get(bg, 0.0) for bg in self.bg_labels])

    def dominant_label(self, domain: str, fg: str) -> str | None:
        """The bg label a class prefers, if any label holds the majority."""
        row = self.association_row(domain, fg)
        k = int(np.argmax(row))
        return self.bg_labels[k] if row[k] > 0.5 else None


def scene_spec_from_dict(doc: dict) -> SceneSpec:
    doc = dict(doc)
    domains = {}
    for name, d in doc.pop("domains", {}).items():
        d = dict(d)
        if d.get("palette"):
            d["palette"] = {k: tuple(tuple(c) for c in v) for k, v in d["palette"].items()}
        domains[name] = DomainSpec(**d)
    for key in ("fg_classes", "bg_labels", "size_range", "objects_per_image"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return SceneSpec(domains=domains, **doc)


# -- rendering ----------------------------------------------------------------

def shape_mask(kind: str, size: int, canvas: int, x0: int, y0: int) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    u = (xx - x0 + 0.5) / size
    v = (yy - y0 + 0.5) / size
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if kind == "disc":
        m = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif kind == "triangle":
        m = inside & (np.abs(u - 0.5) <= 0.5 * v)
    elif kind == "cross":
        arm = 1.0 / 6.0
        m = inside & ((np.abs(u - 0.5) <= arm) | (np.abs(v - 0.5) <= arm))
    elif kind == "square":
        m = inside & (u >= 0.1) & (u <= 0.9) & (v >= 0.1) & (v <= 0.9)
    else:
        raise GenerationError(f"unknown shape {kind!r}")
    return m


def texture(kind: str, h: int, w: int, colors, rng: np.random.Generator) -> np.ndarray:
    c1 = np.array(colors[0], dtype=np.float64)
    c2 = np.array(colors[1], dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    phase = rng.integers(0, 8)
    if kind == "stripes":
        sel = ((xx + yy + phase) // 3) % 2 == 0
    elif kind == "dots":
        sel = ((xx + phase) % 6 - 2.5) ** 2 + ((yy + phase) % 6 - 2.5) ** 2 <= 2.5
    elif kind == "checker":
        sel = (((xx + phase) // 4) + ((yy + phase) // 4)) % 2 == 0
    elif kind == "flat":
        sel = np.zeros((h, w), dtype=bool)
    else:
        raise GenerationError(f"unknown texture {kind!r}")
    return np.where(sel[..., None], c2, c1)


def _image_rng(seed: int, domain: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(domain.encode()), index])


def _render(spec: SceneSpec, domain: str, index: int):
    dom = spec.domains[domain]
    rng = _image_rng(spec.seed, domain, index)
    space = spec.label_space
    size = spec.image_size
    cell = size // spec.grid
    n_regions = spec.grid ** 2
    palette = dict(DEFAULT_PALETTE)
    palette.update(dom.palette or {})

    lo, hi = spec.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    classes = rng.integers(0, len(spec.fg_classes), size=n_obj)
    region_labels = [None] * n_regions
    order = rng.permutation(n_regions)
    for k in range(n_obj):
        row = spec.association_row(domain, spec.fg_classes[classes[k]])
        region_labels[order[k]] = int(rng.choice(len(spec.bg_labels), p=row))
    for r in range(n_regions):
        if region_labels[r] is None:
            region_labels[r] = int(rng.integers(0, len(spec.bg_labels)))

    pixels = np.zeros((size, size, 3), dtype=np.float64)
    labels = np.zeros((size, size), dtype=np.uint8)
    for r in range(n_regions):
        gy, gx = divmod(r, spec.grid)
        ys, xs = slice(gy * cell, (gy + 1) * cell), slice(gx * cell, (gx + 1) * cell)
        name = spec.bg_labels[region_labels[r]]
        colors = palette[name]
        if dom.texture_swap_prob and rng.random() < dom.texture_swap_prob:
            colors = palette[spec.bg_labels[int(rng.integers(0, len(spec.bg_labels)))]]
        pixels[ys, xs] = texture(name, cell, cell, colors, rng)
        labels[ys, xs] = space.bg_id(name)

    smin, smax = spec.size_range
    if smax + 2 * spec.margin > cell:
        raise GenerationError(
            f"objects up to {smax}px plus margin {spec.margin} do not fit in {cell}px regions")

    def place(kind: str, region: int) -> np.ndarray:
        s = int(rng.integers(smin, smax + 1))
        gy, gx = divmod(region, spec.grid)
        x0 = gx * cell + int(rng.integers(spec.margin, cell - spec.margin - s + 1))
        y0 = gy * cell + int(rng.integers(spec.margin, cell - spec.margin - s + 1))
        return shape_mask(kind, s, size, x0, y0)

    def paint(mask: np.ndarray) -> None:
        shade = rng.uniform(170, 245)
        tint = rng.uniform(-15, 15, size=3)
        pixels[mask] = np.clip(shade + tint, 0, 255)

    instances = []
    image_id = f"{domain}_{index:05d}"
    for k in range(n_obj):
        kind = spec.fg_classes[classes[k]]
        mask = place(kind, order[k])
        paint(mask)
        labels[mask] = space.fg_id(kind)
        instances.append(InstanceAnnotation(image_id, int(classes[k]), mask_to_bbox(mask), mask, k))

    if dom.decoy_rate > 0:
        for r in order[n_obj:]:
            if rng.random() >= dom.decoy_rate:
                continue
            here = spec.bg_labels[region_labels[r]]
            kinds = [fg for fg in spec.fg_classes
                     if spec.dominant_label(domain, fg) not in (None, here)]
            if kinds:
                paint(place(kinds[int(rng.integers(0, len(kinds)))], int(r)))

    pixels += rng.normal(0.0, spec.noise_sigma, size=pixels.shape)
    pixels += dom.brightness
    out = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    out.setflags(write=False)
    return ImageRecord(image_id, out, SemanticMap(image_id, labels), tuple(instances))


def generate(spec: SceneSpec, n_images: int, domain: DomainId | str) -> Dataset:
    """Render ``n_images`` scenes of one domain; a pure function of the scene seed."""
    name = str(domain)
    if n_images < 1:
        raise GenerationError("n_images must be >= 1")
    if name not in spec.domains:
        raise GenerationError(f"domain {name!r} not in scene spec")
    images = [_render(spec, name, i) for i in range(n_images)]
    return Dataset(spec.label_space, images, name)


def background_pool(n: int, size: int, seed: int) -> list[np.ndarray]:
    """Non-salient random backgrounds: smooth colour blobs, no textures, no shapes."""
    rng = np.random.default_rng([seed, 0xB6])
    pool = []
    for _ in range(n):
        coarse = rng.uniform(0, 255, size=(4, 4, 3)).astype(np.uint8)
        img = Image.fromarray(coarse).resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float64) + rng.normal(0, 6.0, size=(size, size, 3))
        pool.append(np.clip(np.rint(arr), 0, 255).astype(np.uint8))
    return pool


def host_label(semantic: np.ndarray, mask: np.ndarray, space: LabelSpace, ring: int = 2) -> int:
    """Majority background id in a thin ring around an instance."""
    grown = ndimage.binary_dilation(mask, iterations=ring)
    around = semantic[grown & ~mask]
    around = around[(around >= space.n_fg) & (around < space.n_labels)]
    if around.size == 0:
        raise GenerationError("instance has no background around it")
    return int(np.bincount(around).argmax())


def cooccurrence(dataset: Dataset) -> np.ndarray:
    """Counts of (fg class, host bg label), rows indexed by fg id."""
    space = dataset.label_space
    counts = np.zeros((space.n_fg, len(space.bg_labels)), dtype=np.int64)
    for img in dataset.images:
        for inst in img.instances:
            bg = host_label(img.semantic.labels, inst.instance_mask, space)
            counts[inst.class_id, bg - space.n_fg] += 1
    return counts
