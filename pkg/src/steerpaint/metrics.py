"""Toy evaluation metrics and the fixed benchmark suite."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scenes import COLORS, SHAPES, Scene, generate_scene, masked_latent, render_shape

__all__ = [
    "NULL_SHAPE",
    "NULL_COLOR",
    "BENCHMARK_SEEDS",
    "BenchmarkSuite",
    "MetricReport",
    "classify_region",
    "evaluate",
    "l2_to_truth",
    "boundary_energy",
    "preference",
    "composite_reward",
    "paired_difference",
    "write_metrics_csv",
]

NULL_SHAPE = -1
NULL_COLOR = -1
OBJECT_THRESHOLD = 0.3
MAX_COLOR_DIST = 0.25  # palette neighbours (yellow/orange) sit about 0.36 apart
MIN_IOU = 0.5
BENCHMARK_SEEDS = tuple(range(90_000, 90_050))
COMPOSITE_WEIGHTS = (4.0, 1.0, 0.1)
_HALF_STEPS = (-0.5, 0.0, 0.5, 1.0)
_OFFSETS = (-0.5, 0.0, 0.5)


def classify_region(image: np.ndarray, mask: np.ndarray) -> tuple[int, int, float]:
    """Classify the object painted inside ``mask``.

    Returns ``(color id, shape id, confidence)``. Object pixels are masked pixels
    far from the mean unmasked colour; colour is the nearest palette centroid of
    their mean, shape is the best IoU against templates fitted to their bounding
    box. Colour is ``NULL_COLOR`` when no palette entry is within
    ``MAX_COLOR_DIST``; shape is ``NULL_SHAPE`` when the colour is null or the
    best IoU falls below ``MIN_IOU``.
    """
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    inside = np.asarray(mask) > 0.5
    if not inside.any():
        raise ValueError("classify_region needs a nonempty mask")
    outside = ~inside
    bg = image[outside].mean(axis=0) if outside.any() else np.full(3, 0.3)
    dist = np.linalg.norm(image - bg, axis=-1)
    obj = inside & (dist > OBJECT_THRESHOLD)
    region = image[obj] if obj.any() else image[inside]
    cdist = np.linalg.norm(COLORS - region.mean(axis=0), axis=1)
    color = int(np.argmin(cdist)) if cdist.min() <= MAX_COLOR_DIST else NULL_COLOR
    if color == NULL_COLOR or obj.sum() < 4:
        return color, NULL_SHAPE, 0.0
    ys, xs = np.nonzero(obj)
    cy, cx = (ys.min() + ys.max()) / 2.0, (xs.min() + xs.max()) / 2.0
    half = max(ys.max() - ys.min(), xs.max() - xs.min()) / 2.0
    best, best_iou = NULL_SHAPE, 0.0
    for s in range(len(SHAPES)):
        for dh in _HALF_STEPS:
            for oy in _OFFSETS:
                for ox in _OFFSETS:
                    tpl = render_shape(s, cy + oy, cx + ox, half + dh, image.shape[0])
                    iou = (tpl & obj).sum() / max((tpl | obj).sum(), 1)
                    if iou > best_iou:
                        best, best_iou = s, float(iou)
    if best_iou < MIN_IOU:
        return color, NULL_SHAPE, best_iou
    return color, best, best_iou


def l2_to_truth(a: np.ndarray, b: np.ndarray) -> float:
    """Root-mean-square pixel difference."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def boundary_energy(image: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared jump across the mask edge (the negated coherence reward)."""
    from .rewards import reward_coherence

    img = np.asarray(image, dtype=np.float64)
    return -reward_coherence(img, masked_latent(img, mask), mask).item()


def preference(image: np.ndarray) -> float:
    from .rewards import reward_preference

    return reward_preference(np.asarray(image, dtype=np.float64)).item()


def composite_reward(align: float, coherence: float, pref: float) -> float:
    """Fixed-weight composite of the three rewards (4 : 1 : 0.1, normalised)."""
    wc, wm, wq = COMPOSITE_WEIGHTS
    return (wc * align + wm * coherence + wq * pref) / (wc + wm + wq)


@dataclass
class BenchmarkSuite:
    """Fixed seeded scenes: even indices object-aligned, odd freeform."""

    seeds: tuple = BENCHMARK_SEEDS
    scenes: list = field(default_factory=list)

    def __post_init__(self):
        if not self.scenes:
            self.scenes = [
                generate_scene(s, "object_aligned" if i % 2 == 0 else "freeform")
                for i, s in enumerate(self.seeds)
            ]

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]


@dataclass
class MetricReport:
    alignment_accuracy: float
    boundary_energy: float
    preference_score: float
    l2_to_truth: float
    align_reward: float = float("nan")
    composite_reward: float = float("nan")
    per_scene: list = field(default_factory=list, repr=False)

    def as_row(self) -> dict:
        row = asdict(self)
        row.pop("per_scene")
        return row


def evaluate(outputs: Sequence[np.ndarray], scenes: Sequence[Scene], align_fn=None) -> MetricReport:
    """Score inpainted outputs against their scenes.

    ``align_fn(image, scene) -> float`` optionally supplies the learned alignment
    reward, needed for ``align_reward`` and ``composite_reward``.
    """
    if len(outputs) != len(scenes):
        raise ValueError(f"{len(outputs)} outputs for {len(scenes)} scenes")
    rows = []
    for out, sc in zip(outputs, scenes):
        color, shape, conf = classify_region(out, sc.mask)
        be = boundary_energy(out, sc.mask)
        pq = preference(out)
        row = {
            "scene": sc.seed,
            "mode": sc.mode,
            "pred_color": color,
            "pred_shape": shape,
            "confidence": conf,
            "correct": int(color == sc.color and shape == sc.shape),
            "boundary_energy": be,
            "preference": pq,
            "l2_to_truth": l2_to_truth(out, sc.image),
        }
        if align_fn is not None:
            ra = float(align_fn(out, sc))
            row["align_reward"] = ra
            row["composite_reward"] = composite_reward(ra, -be, pq)
        rows.append(row)
    col = lambda k: float(np.mean([r[k] for r in rows])) if rows and k in rows[0] else float("nan")
    return MetricReport(
        alignment_accuracy=col("correct"),
        boundary_energy=col("boundary_energy"),
        preference_score=col("preference"),
        l2_to_truth=col("l2_to_truth"),
        align_reward=col("align_reward"),
        composite_reward=col("composite_reward"),
        per_scene=rows,
    )


def paired_difference(a: MetricReport, b: MetricReport, key: str = "correct") -> dict:
    """Mean and standard error of per-scene differences a - b (same scene order)."""
    da = np.array([r[key] for r in a.per_scene], dtype=np.float64)
    db = np.array([r[key] for r in b.per_scene], dtype=np.float64)
    d = da - db
    se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else float("nan")
    return {"metric": key, "mean_diff": float(d.mean()), "stderr": se, "n": len(d)}


def write_metrics_csv(path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for r in rows:
        for k in r:
            if k not in fields:
                fields.append(k)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fields})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
