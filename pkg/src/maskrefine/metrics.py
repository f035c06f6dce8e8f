"""Mask-proposal quality: IoU, binarization, recall, AR and AUC with scale buckets."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
COUNTS: tuple[int, ...] = (10, 100, 1000)
DEFAULT_BINARIZE = 0.2
REFERENCE_SIDE = 224
SMALL_AREA = 32 ** 2
LARGE_AREA = 96 ** 2


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"iou: shape mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def binarize(mask: np.ndarray, thr: float = DEFAULT_BINARIZE) -> np.ndarray:
    return np.asarray(mask) >= thr


def iou_matrix(props: Sequence[np.ndarray] | np.ndarray, gts: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape (len(props), len(gts))."""
    P = np.asarray(props, dtype=bool).reshape(len(props), -1) if len(props) else np.zeros((0, 0), bool)
    G = np.asarray(gts, dtype=bool).reshape(len(gts), -1) if len(gts) else np.zeros((0, 0), bool)
    if len(props) == 0 or len(gts) == 0:
        return np.zeros((len(props), len(gts)))
    if P.shape[1] != G.shape[1]:
        raise ValueError("proposal and ground-truth masks differ in size")
    Pf = P.astype(np.float64)
    Gf = G.astype(np.float64)
    inter = Pf @ Gf.T
    union = Pf.sum(1)[:, None] + Gf.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def match_count(ious: np.ndarray, t: float) -> int:
    """Largest number of ground truths covered one-to-one at IoU >= t."""
    hit = np.asarray(ious) >= t
    if hit.size == 0 or not hit.any():
        return 0
    rows, cols = linear_sum_assignment(hit, maximize=True)
    return int(hit[rows, cols].sum())


def _ious(proposals, gts: Sequence[np.ndarray], n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("proposal count n must be >= 1")
    if isinstance(proposals, np.ndarray) and proposals.ndim == 2 and len(gts) and proposals.shape[1] == len(gts):
        return proposals[:n]
    masks = placed_masks(proposals, np.shape(gts[0])) if len(gts) else []
    return iou_matrix(masks[:n], gts)


def placed_masks(proposals, shape: tuple[int, int], thr: float = DEFAULT_BINARIZE) -> list[np.ndarray]:
    """Binary canvas-sized masks for a ProposalSet (or pass-through for mask lists)."""
    if hasattr(proposals, "proposals"):
        return [p.to_canvas(shape, thr) for p in proposals]
    return [binarize(m, thr) if np.asarray(m).dtype != bool else np.asarray(m) for m in proposals]


def match_and_recall(proposals, gts: Sequence[np.ndarray], n: int, t: float) -> float | None:
    """Recall of the top-``n`` proposals at IoU threshold ``t``; None when there are no ground truths.

    ``proposals`` is a ProposalSet, a list of masks (already at canvas size)
    or a precomputed (proposals, gts) IoU matrix.
    """
    if len(gts) == 0:
        return None
    return match_count(_ious(proposals, gts, n), t) / len(gts)


def average_recall(proposals, gts: Sequence[np.ndarray], n: int, thresholds: Sequence[float] = THRESHOLDS) -> float | None:
    if len(gts) == 0:
        return None
    m = _ious(proposals, gts, n)
    return float(np.mean([match_count(m, t) / len(gts) for t in thresholds]))


def dense_counts(max_count: int = 1000, num: int = 16) -> tuple[int, ...]:
    return tuple(int(c) for c in np.unique(np.round(np.logspace(0, np.log10(max_count), num))))


def auc(proposals, gts: Sequence[np.ndarray], counts: Sequence[int] = COUNTS) -> float | None:
    """Mean AR over proposal counts; counts beyond the available proposals are clipped."""
    if len(gts) == 0:
        return None
    m = _ious(proposals, gts, max(counts))
    available = max(len(m), 1)
    return float(np.mean([average_recall(m, gts, min(c, available)) for c in counts]))


def area_thresholds(patch_side: int) -> tuple[float, float]:
    s = (patch_side / REFERENCE_SIDE) ** 2
    return SMALL_AREA * s, LARGE_AREA * s


def scale_of(area: float, thresholds: tuple[float, float]) -> str:
    small, large = thresholds
    if area < small:
        return "S"
    return "M" if area <= large else "L"


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """(y0, x0, y1, x1) with exclusive ends, or None for an empty mask."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


@dataclass
class ARReport:
    ar: dict[int, float]
    auc: float | None
    auc_scale: dict[str, float | None]
    recall_vs_iou: dict[int, list[float]]
    thresholds: tuple[float, ...] = THRESHOLDS
    area_thresholds: tuple[float, float] = (float(SMALL_AREA), float(LARGE_AREA))
    n_images: int = 0
    n_gts: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        label = {10: "AR10", 100: "AR100", 1000: "AR1K"}
        out: dict = {label.get(c, f"AR{c}"): v for c, v in self.ar.items()}
        out["AUC"] = self.auc
        for k in ("S", "M", "L"):
            out[f"AUC_{k}"] = self.auc_scale.get(k)
        out["recall_vs_iou"] = {str(c): r for c, r in self.recall_vs_iou.items()}
        out["thresholds"] = list(self.thresholds)
        out["area_thresholds"] = list(self.area_thresholds)
        out["n_images"] = self.n_images
        out["n_gts"] = self.n_gts
        out.update(self.extra)
        return out


def evaluate(
    results: Iterable[tuple[object, Sequence[np.ndarray]]],
    patch_side: int,
    counts: Sequence[int] = COUNTS,
    auc_counts: Sequence[int] | None = None,
    thr: float = DEFAULT_BINARIZE,
) -> ARReport:
    """Recall pooled over images: covered ground truths / all ground truths.

    ``results`` yields (proposals, gt masks) per image.
    """
    auc_counts = tuple(auc_counts or counts)
    all_counts = sorted(set(counts) | set(auc_counts))
    bounds = area_thresholds(patch_side)
    covered = {s: np.zeros((len(all_counts), len(THRESHOLDS))) for s in ("all", "S", "M", "L")}
    totals = {s: 0 for s in covered}
    n_images = 0
    for proposals, gts in results:
        n_images += 1
        if len(gts) == 0:
            continue
        shape = np.shape(gts[0])
        masks = placed_masks(proposals, shape, thr)
        m = iou_matrix(masks, gts) if masks else np.zeros((0, len(gts)))
        scales = np.array([scale_of(np.count_nonzero(g), bounds) for g in gts])
        for key in covered:
            cols = np.arange(len(gts)) if key == "all" else np.flatnonzero(scales == key)
            if len(cols) == 0:
                continue
            totals[key] += len(cols)
            sub = m[:, cols]
            for ci, c in enumerate(all_counts):
                for ti, t in enumerate(THRESHOLDS):
                    covered[key][ci, ti] += match_count(sub[:c], t)

    def ar_at(key: str, c: int) -> float | None:
        if totals[key] == 0:
            return None
        return float(covered[key][all_counts.index(c)].mean() / totals[key])

    def auc_of(key: str) -> float | None:
        if totals[key] == 0:
            return None
        return float(np.mean([ar_at(key, c) for c in auc_counts]))

    ar = {c: ar_at("all", c) for c in counts}
    rvi = {
        c: ([float(v / totals["all"]) for v in covered["all"][all_counts.index(c)]] if totals["all"] else [])
        for c in counts
    }
    return ARReport(
        ar=ar,
        auc=auc_of("all"),
        auc_scale={k: auc_of(k) for k in ("S", "M", "L")},
        recall_vs_iou=rvi,
        area_thresholds=bounds,
        n_images=n_images,
        n_gts=totals["all"],
        extra={"auc_counts": list(auc_counts)},
    )
