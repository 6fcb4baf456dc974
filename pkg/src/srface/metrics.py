"""Average precision, precision/recall curves and height-band difficulty subsets."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .anchors import Box

SUBSETS = ("easy", "medium", "hard")


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    n_gt: int = 0
    n_det: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "precision", "recall"])
            for t, p, r in zip(self.thresholds, self.precision, self.recall):
                w.writerow([f"{t:.6f}", f"{p:.6f}", f"{r:.6f}"])


def _iou_row(box: np.ndarray, gts: np.ndarray) -> np.ndarray:
    if gts.size == 0:
        return np.zeros(0)
    ix = np.clip(np.minimum(box[2], gts[:, 2]) - np.maximum(box[0], gts[:, 0]), 0, None)
    iy = np.clip(np.minimum(box[3], gts[:, 3]) - np.maximum(box[1], gts[:, 1]), 0, None)
    inter = ix * iy
    union = (box[2] - box[0]) * (box[3] - box[1]) + (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1]) - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under a PR staircase."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def _as_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64).reshape(-1, 4)
    return np.array([b.as_list() for b in boxes], dtype=np.float64).reshape(-1, 4)


def evaluate(
    dets_per_image: Sequence[Sequence[Box]],
    gts_per_image: Sequence,
    iou_thresh: float = 0.5,
    ignore_per_image: Optional[Sequence[np.ndarray]] = None,
) -> PRCurve:
    """Greedy score-ordered matching over a set of images.

    Each ground truth absorbs at most one detection (the best unmatched one
    by IoU). A detection that matches no counted ground truth but overlaps an
    ignored one by ``iou_thresh`` is dropped instead of becoming a false
    positive. No ground truth: AP is 1.0 without detections, else 0.0.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth cover different image counts")
    gts = [_as_array(g) for g in gts_per_image]
    if ignore_per_image is None:
        ignore = [np.zeros(len(g), dtype=bool) for g in gts]
    else:
        ignore = [np.asarray(m, dtype=bool).reshape(-1) for m in ignore_per_image]
    n_gt = int(sum((~m).sum() for m in ignore))

    flat = [(d.score, img, d) for img, ds in enumerate(dets_per_image) for d in ds]
    if any(s is None for s, _, _ in flat):
        raise ValueError("detections must carry scores")
    order = sorted(range(len(flat)), key=lambda k: -flat[k][0])
    matched = [np.zeros(len(g), dtype=bool) for g in gts]
    scores, tp = [], []
    for k in order:
        score, img, det = flat[k]
        ious = _iou_row(np.array(det.as_list()), gts[img])
        counted = ~ignore[img] & ~matched[img] & (ious >= iou_thresh)
        if counted.any():
            j = int(np.argmax(np.where(counted, ious, -1.0)))
            matched[img][j] = True
            tp.append(1)
        elif (ignore[img] & (ious >= iou_thresh)).any():
            continue
        else:
            tp.append(0)
        scores.append(score)

    tp_arr = np.array(tp, dtype=np.float64)
    ctp = np.cumsum(tp_arr)
    cfp = np.cumsum(1 - tp_arr)
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    if n_gt == 0:
        recall = np.zeros_like(ctp)
        ap = 1.0 if len(tp) == 0 else 0.0
    else:
        recall = ctp / n_gt
        ap = average_precision(recall, precision) if len(tp) else 0.0
    return PRCurve(np.array(scores, dtype=np.float64), precision, recall, ap, n_gt, len(tp))


def compute_ap(dets: Sequence[Box], gts: Sequence[Box], iou_thresh: float = 0.5) -> PRCurve:
    """Single-image convenience wrapper around :func:`evaluate`."""
    return evaluate([dets], [gts], iou_thresh)


@dataclass(frozen=True)
class HeightBands:
    """Easy: height >= easy_min; medium: >= medium_min; hard: the rest."""

    easy_min: float = 40.0
    medium_min: float = 20.0

    def __post_init__(self):
        if self.medium_min > self.easy_min:
            raise ValueError("medium_min must not exceed easy_min")

    def subset_of(self, height: float) -> str:
        if height >= self.easy_min:
            return "easy"
        if height >= self.medium_min:
            return "medium"
        return "hard"


def partition_difficulty(gts, rules: HeightBands = HeightBands()) -> Dict[str, List[int]]:
    out: Dict[str, List[int]] = {name: [] for name in SUBSETS}
    arr = _as_array(gts)
    for i, b in enumerate(arr):
        out[rules.subset_of(b[3] - b[1])].append(i)
    return out


def evaluate_subsets(
    dets_per_image: Sequence[Sequence[Box]],
    gts_per_image: Sequence,
    rules: HeightBands = HeightBands(),
    iou_thresh: float = 0.5,
) -> Dict[str, PRCurve]:
    """One PR curve per difficulty subset; other subsets' faces are ignored."""
    parts = [partition_difficulty(g, rules) for g in gts_per_image]
    out = {}
    for name in SUBSETS:
        ignore = []
        for g, p in zip(gts_per_image, parts):
            m = np.ones(len(_as_array(g)), dtype=bool)
            m[p[name]] = False
            ignore.append(m)
        out[name] = evaluate(dets_per_image, gts_per_image, iou_thresh, ignore)
    return out


def write_results(path, curves: Dict[str, PRCurve]) -> None:
    """JSON lines ``{subset, ap, n_gt, n_det}``."""
    with open(path, "w") as fh:
        for name, c in curves.items():
            fh.write(json.dumps({"subset": name, "ap": c.ap, "n_gt": c.n_gt, "n_det": c.n_det}) + "\n")


def plot_pr_curves(path, curves: Dict[str, PRCurve], title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    for name, c in curves.items():
        ax.plot(c.recall, c.precision, label=f"{name} AP={c.ap:.3f}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if title:
        ax.set_title(title)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
