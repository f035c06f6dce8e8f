"""Deterministic synthetic shape scenes and (patch, label, mask) triplets.

A scene is a canvas holding a few textured shapes on a smooth background.
A positive sample is a patch with one object centred (within
``center_tol`` pixels) at the canonical scale (within ``scale_band``); its
mask is that object's full shape. A negative sample has no object that is
both within twice the centring tolerance and within twice the scale band.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.path import Path as PolyPath

from . import formats

KINDS = ("ellipse", "rectangle", "triangle", "blob")
SPLIT_CODES = {"train": 0, "val": 1, "eval": 2}


@dataclass
class SynthConfig:
    patch: int = 64
    canvas: int = 128
    channels: int = 1
    context: int = 8
    min_objects: int = 3
    max_objects: int = 6
    kinds: tuple[str, ...] = KINDS
    canonical_size: float | None = None  # circumradius; default patch / 4
    scale_band: tuple[float, float] = (0.8, 1.2)
    scale_range: tuple[float, float] = (0.4, 1.8)
    center_tol: float | None = None  # default patch / 16
    positive_ratio: float = 0.5
    contrast: float = 0.2
    texture: float = 0.08
    noise: float = 0.03
    separation: float = 0.8
    amodal: bool = True

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.scale_band = tuple(self.scale_band)
        self.scale_range = tuple(self.scale_range)
        if self.canonical_size is None:
            self.canonical_size = self.patch / 4
        if self.center_tol is None:
            self.center_tol = self.patch / 16
        bad = [k for k in self.kinds if k not in KINDS]
        if bad:
            raise ValueError(f"unknown shape kinds {bad}")
        if not 0.0 <= self.positive_ratio <= 1.0:
            raise ValueError("positive_ratio must lie in [0, 1]")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.canvas < self.patch + 2 * self.context:
            raise ValueError("canvas must hold a patch plus its context margin")

    @property
    def wide_band(self) -> tuple[float, float]:
        lo, hi = self.scale_band
        return 1.0 - 2.0 * (1.0 - lo), 1.0 + 2.0 * (hi - 1.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ShapeObject:
    kind: str
    cy: float
    cx: float
    size: float  # circumradius in pixels
    rotation: float
    aspect: float
    intensity: float
    texture_amp: float
    texture_freq: float
    texture_angle: float
    radii: tuple[float, ...] = ()  # blob vertex radii / triangle angle offsets

    def polygon(self) -> np.ndarray | None:
        """Vertices as (x, y) rows, or None for ellipses."""
        r = self.size
        if self.kind == "ellipse":
            return None
        if self.kind == "rectangle":
            phi = math.atan(self.aspect)
            angles = np.array([phi, math.pi - phi, math.pi + phi, -phi])
            radii = np.full(4, r)
        elif self.kind == "triangle":
            angles = np.array([0.0, 2 * math.pi / 3 + self.radii[0], 4 * math.pi / 3 + self.radii[1]])
            radii = np.full(3, r)
        else:
            k = len(self.radii)
            angles = np.arange(k) * 2 * math.pi / k
            radii = r * np.asarray(self.radii)
        angles = angles + self.rotation
        return np.stack([self.cx + radii * np.cos(angles), self.cy + radii * np.sin(angles)], axis=1)

    def raster(self, height: int, width: int) -> np.ndarray:
        """Boolean mask of pixels whose centres fall inside the shape."""
        out = np.zeros((height, width), dtype=bool)
        r = self.size
        y0, y1 = max(int(math.floor(self.cy - r)) - 1, 0), min(int(math.ceil(self.cy + r)) + 1, height)
        x0, x1 = max(int(math.floor(self.cx - r)) - 1, 0), min(int(math.ceil(self.cx + r)) + 1, width)
        if y0 >= y1 or x0 >= x1:
            return out
        yy, xx = np.mgrid[y0:y1, x0:x1]
        py, px = yy + 0.5, xx + 0.5
        if self.kind == "ellipse":
            c, s = math.cos(self.rotation), math.sin(self.rotation)
            u = (px - self.cx) * c + (py - self.cy) * s
            v = -(px - self.cx) * s + (py - self.cy) * c
            inside = (u / r) ** 2 + (v / (r * self.aspect)) ** 2 <= 1.0
        else:
            pts = np.stack([px.ravel(), py.ravel()], axis=1)
            inside = PolyPath(self.polygon()).contains_points(pts).reshape(py.shape)
        out[y0:y1, x0:x1] = inside
        return out

    def shading(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        phase = (xx * math.cos(self.texture_angle) + yy * math.sin(self.texture_angle)) * self.texture_freq
        return self.intensity + self.texture_amp * np.sin(phase)


@dataclass
class Scene:
    height: int
    width: int
    objects: list[ShapeObject]
    background: dict
    seed: list[int]
    anchor: int | None = None

    def render(self, cfg: SynthConfig) -> np.ndarray:
        """Image of shape (channels, height, width) with values in [0, 1]."""
        rng = np.random.default_rng(self.seed + [7])
        yy, xx = np.mgrid[0:self.height, 0:self.width].astype(float)
        bg = self.background
        img = np.full((self.height, self.width), bg["mean"])
        for amp, fy, fx, ph in bg["waves"]:
            img += amp * np.sin(fy * yy + fx * xx + ph)
        for obj in self.objects:
            m = obj.raster(self.height, self.width)
            img[m] = obj.shading(yy[m], xx[m])
        img += rng.normal(0.0, cfg.noise, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
        return np.repeat(img[None], cfg.channels, axis=0)

    def mask(self, index: int) -> np.ndarray:
        """Full (amodal) shape of object ``index``."""
        return self.objects[index].raster(self.height, self.width)

    def visible_mask(self, index: int) -> np.ndarray:
        m = self.mask(index)
        for later in self.objects[index + 1:]:
            m &= ~later.raster(self.height, self.width)
        return m

    def gt_mask(self, index: int, cfg: SynthConfig) -> np.ndarray:
        return self.mask(index) if cfg.amodal else self.visible_mask(index)


def _seed_list(seed) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def _random_object(rng: np.random.Generator, cfg: SynthConfig, cy: float, cx: float, scale: float, intensity: float) -> ShapeObject:
    kind = str(rng.choice(cfg.kinds))
    radii: tuple[float, ...] = ()
    aspect = 1.0
    if kind == "ellipse":
        aspect = float(rng.uniform(0.55, 1.0))
    elif kind == "rectangle":
        aspect = float(rng.uniform(0.5, 1.0))
    elif kind == "triangle":
        radii = tuple(float(v) for v in rng.uniform(-0.35, 0.35, size=2))
    else:
        k = int(rng.integers(6, 10))
        r = rng.uniform(0.55, 1.0, size=k)
        radii = tuple(float(v) for v in r / r.max())
    return ShapeObject(
        kind=kind,
        cy=float(cy),
        cx=float(cx),
        size=float(cfg.canonical_size * scale),
        rotation=float(rng.uniform(0, 2 * math.pi)),
        aspect=aspect,
        intensity=float(intensity),
        texture_amp=float(rng.uniform(0.0, cfg.texture)),
        texture_freq=float(rng.uniform(0.3, 1.2)),
        texture_angle=float(rng.uniform(0, math.pi)),
        radii=radii,
    )


def _object_intensity(rng: np.random.Generator, cfg: SynthConfig, bg_mean: float) -> float:
    lo, hi = 0.1, 0.9
    for _ in range(100):
        v = float(rng.uniform(lo, hi))
        if abs(v - bg_mean) >= cfg.contrast + cfg.texture:
            return v
    return hi if bg_mean < 0.5 else lo


def _separated(cy: float, cx: float, size: float, objects: Sequence[ShapeObject], factor: float) -> bool:
    return all(math.hypot(cy - o.cy, cx - o.cx) >= factor * (size + o.size) for o in objects)


def generate_scene(cfg: SynthConfig, seed, anchor: bool = False, canonical_only: bool = False) -> Scene:
    """Random scene; fully determined by ``(cfg, seed, anchor, canonical_only)``.

    ``anchor`` places one canonical-scale object where a patch centred on
    it (plus jitter and context) fits inside the canvas. ``canonical_only``
    restricts every object to the scale band and keeps it on the canvas,
    which is what whole-image proposal evaluation uses.
    """
    seed = _seed_list(seed)
    rng = np.random.default_rng(seed)
    h = w = cfg.canvas
    bg_mean = float(rng.uniform(0.2, 0.8))
    waves = [
        (float(rng.uniform(0.0, 0.06)), float(rng.uniform(-0.15, 0.15)), float(rng.uniform(-0.15, 0.15)), float(rng.uniform(0, 2 * math.pi)))
        for _ in range(3)
    ]
    objects: list[ShapeObject] = []
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    anchor_index = None

    if anchor:
        margin = cfg.patch / 2 + cfg.context + math.ceil(cfg.center_tol)
        cy, cx = (float(rng.integers(math.ceil(margin), math.floor(h - margin) + 1)) for _ in range(2))
        scale = float(rng.uniform(*cfg.scale_band))
        objects.append(_random_object(rng, cfg, cy, cx, scale, _object_intensity(rng, cfg, bg_mean)))
        anchor_index = 0

    attempts = 0
    while len(objects) < n_obj and attempts < 200:
        attempts += 1
        if canonical_only:
            scale = float(rng.uniform(*cfg.scale_band))
            lo, hi = cfg.patch / 2, h - cfg.patch / 2
        else:
            scale = float(np.exp(rng.uniform(*np.log(cfg.scale_range))))
            lo, hi = 0, h
        cy, cx = float(rng.integers(lo, hi + 1)), float(rng.integers(lo, hi + 1))
        size = cfg.canonical_size * scale
        if canonical_only and not (size <= cy <= h - size and size <= cx <= w - size):
            continue
        if not _separated(cy, cx, size, objects, cfg.separation):
            continue
        objects.append(_random_object(rng, cfg, cy, cx, scale, _object_intensity(rng, cfg, bg_mean)))

    if anchor_index is not None:
        # put the anchor at a random depth in the draw order
        pos = int(rng.integers(0, len(objects)))
        objects.insert(pos, objects.pop(0))
        anchor_index = pos
    return Scene(h, w, objects, {"mean": bg_mean, "waves": waves}, seed, anchor_index)


@dataclass
class Sample:
    patch: np.ndarray  # (C, W, W)
    label: int  # +1 / -1
    mask: np.ndarray | None  # (W, W) uint8 0/1, positives only
    meta: dict = field(default_factory=dict)


def object_scale(obj: ShapeObject, cfg: SynthConfig) -> float:
    return obj.size / cfg.canonical_size


def is_positive_for(obj: ShapeObject, cy: float, cx: float, cfg: SynthConfig, wide: bool = False) -> bool:
    tol = cfg.center_tol * (2.0 if wide else 1.0)
    lo, hi = cfg.wide_band if wide else cfg.scale_band
    off = max(abs(obj.cy - cy), abs(obj.cx - cx))
    return off <= tol and lo <= object_scale(obj, cfg) <= hi


def crop(image: np.ndarray, y: int, x: int, size: int) -> np.ndarray:
    return image[..., y:y + size, x:x + size]


def sample_triplet(scene: Scene, cfg: SynthConfig, seed, positive: bool, image: np.ndarray | None = None, jitter: bool = True) -> Sample:
    """Cut one training triplet out of ``scene``.

    Positives centre the patch on a canonical object (the scene anchor if
    present) up to a jitter of ``center_tol``; negatives are placed so that
    no object qualifies even under the doubled tolerances.
    """
    rng = np.random.default_rng(_seed_list(seed) + [11])
    W = cfg.patch
    image = scene.render(cfg) if image is None else image
    lo_o = cfg.context
    hi_o = cfg.canvas - W - cfg.context

    if positive:
        candidates = [scene.anchor] if scene.anchor is not None else [
            i for i, o in enumerate(scene.objects) if cfg.scale_band[0] <= object_scale(o, cfg) <= cfg.scale_band[1]
        ]
        tol = int(math.floor(cfg.center_tol)) if jitter else 0
        for idx in candidates:
            obj = scene.objects[idx]
            dy, dx = (int(rng.integers(-tol, tol + 1)) for _ in range(2))
            y, x = int(round(obj.cy)) - W // 2 + dy, int(round(obj.cx)) - W // 2 + dx
            if lo_o <= y <= hi_o and lo_o <= x <= hi_o and is_positive_for(obj, y + W / 2, x + W / 2, cfg):
                mask = crop(scene.gt_mask(idx, cfg), y, x, W).astype(np.uint8)
                meta = {"y": y, "x": x, "object": idx, "kind": obj.kind, "scale": object_scale(obj, cfg), "offset": [dy, dx]}
                return Sample(crop(image, y, x, W).copy(), 1, mask, meta)
        raise ValueError("scene has no object that can serve as a centred positive")

    strategies = ("random", "offcenter", "offscale")
    for _ in range(500):
        how = strategies[int(rng.integers(0, 3))]
        y, x = int(rng.integers(lo_o, hi_o + 1)), int(rng.integers(lo_o, hi_o + 1))
        if how != "random" and scene.objects:
            obj = scene.objects[int(rng.integers(0, len(scene.objects)))]
            y0, x0 = int(round(obj.cy)) - W // 2, int(round(obj.cx)) - W // 2
            if how == "offcenter":
                reach = W // 4
                y, x = y0 + int(rng.integers(-reach, reach + 1)), x0 + int(rng.integers(-reach, reach + 1))
            else:
                y, x = y0, x0
            y, x = min(max(y, lo_o), hi_o), min(max(x, lo_o), hi_o)
        cy, cx = y + W / 2, x + W / 2
        if not any(is_positive_for(o, cy, cx, cfg, wide=True) for o in scene.objects):
            return Sample(crop(image, y, x, W).copy(), -1, None, {"y": y, "x": x, "strategy": how})
    raise ValueError("could not place a negative patch in this scene")


def label_for_index(i: int, ratio: float) -> int:
    """Evenly interleaved labels: exactly round-down(n * ratio) positives among the first n."""
    return 1 if math.floor((i + 1) * ratio) - math.floor(i * ratio) == 1 else -1


def make_sample(cfg: SynthConfig, seed: int, split: str, index: int) -> Sample:
    sample_seed = [int(seed), SPLIT_CODES[split], int(index)]
    positive = label_for_index(index, cfg.positive_ratio) == 1
    scene = generate_scene(cfg, sample_seed, anchor=positive)
    sample = sample_triplet(scene, cfg, sample_seed, positive)
    sample.meta.update({"split": split, "index": index, "seed": sample_seed})
    return sample


@dataclass
class Dataset:
    patches: np.ndarray  # (n, C, W, W)
    labels: np.ndarray  # (n,) of +1 / -1
    masks: np.ndarray  # (n, W, W) uint8; zeros for negatives
    records: list[dict]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    def subset(self, index) -> Dataset:
        index = np.asarray(index, dtype=np.intp)
        return Dataset(self.patches[index], self.labels[index], self.masks[index], [self.records[i] for i in index])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.patches, self.labels.astype(np.int8), self.masks):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build_split(cfg: SynthConfig, seed: int, split: str, n: int) -> Dataset:
    samples = [make_sample(cfg, seed, split, i) for i in range(n)]
    W = cfg.patch
    patches = np.stack([s.patch for s in samples]) if samples else np.zeros((0, cfg.channels, W, W))
    labels = np.array([s.label for s in samples], dtype=np.int64)
    masks = np.stack([s.mask if s.mask is not None else np.zeros((W, W), np.uint8) for s in samples]) if samples else np.zeros((0, W, W), np.uint8)
    return Dataset(patches, labels, masks, [s.meta for s in samples])


def make_dataset(cfg: SynthConfig, seed: int, n_train: int, n_val: int, out_dir: str | Path | None = None) -> dict[str, Dataset]:
    """Train/val splits from disjoint seed streams; optionally written to ``out_dir``.

    On disk every sample is a raw f64 patch with a JSON header plus, for
    positives, a P5 PGM mask; ``manifest.jsonl`` holds one record per sample.
    """
    if n_train < 1 or n_val < 1:
        raise ValueError("n_train and n_val must be >= 1")
    splits = {"train": build_split(cfg, seed, "train", n_train), "val": build_split(cfg, seed, "val", n_val)}
    if out_dir is not None:
        write_dataset(splits, cfg, seed, Path(out_dir))
    return splits


def write_dataset(splits: dict[str, Dataset], cfg: SynthConfig, seed: int, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for split, ds in splits.items():
        sdir = out / split
        sdir.mkdir(exist_ok=True)
        for i in range(len(ds)):
            stem = f"{i:06d}"
            patch_rel = f"{split}/{stem}.f64"
            formats.save_tensor(out / split / stem, ds.patches[i], name=f"{split}/{stem}")
            mask_rel = None
            if ds.labels[i] == 1:
                mask_rel = f"{split}/{stem}.pgm"
                formats.write_pgm(out / mask_rel, ds.masks[i])
            rec = dict(ds.records[i])
            rec.update({"label": int(ds.labels[i]), "patch": patch_rel, "mask": mask_rel})
            lines.append(json.dumps(rec, sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    (out / "dataset.json").write_text(json.dumps({"config": cfg.to_dict(), "seed": seed, "counts": {k: len(v) for k, v in splits.items()}}, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(root: str | Path) -> dict[str, Dataset]:
    root = Path(root)
    records: dict[str, list[dict]] = {}
    for line in (root / "manifest.jsonl").read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            records.setdefault(rec["split"], []).append(rec)
    out = {}
    for split, recs in records.items():
        patches = np.stack([formats.load_tensor(root / r["patch"]) for r in recs])
        W = patches.shape[-1]
        masks = np.stack([formats.read_mask(root / r["mask"]) if r["mask"] else np.zeros((W, W), np.uint8) for r in recs])
        labels = np.array([r["label"] for r in recs], dtype=np.int64)
        out[split] = Dataset(patches, labels, masks, recs)
    return out


@dataclass
class EvalImage:
    image: np.ndarray  # (C, H, W)
    gt_masks: list[np.ndarray]  # full-canvas boolean masks


def make_eval_images(cfg: SynthConfig, seed: int, n: int, min_objects: int = 2, max_objects: int = 4) -> list[EvalImage]:
    """Whole canvases whose objects are all at the canonical scale."""
    ecfg = SynthConfig(**{**cfg.to_dict(), "min_objects": min_objects, "max_objects": max_objects})
    out = []
    for i in range(n):
        scene = generate_scene(ecfg, [int(seed), SPLIT_CODES["eval"], i], canonical_only=True)
        out.append(EvalImage(scene.render(ecfg), [scene.gt_mask(k, ecfg) for k in range(len(scene.objects))]))
    return out
