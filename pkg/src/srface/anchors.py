"""Square anchors over pyramid levels, IoU, matching, box coding and NMS.

Bulk operations work on ``(N, 4)`` tensors in ``x1, y1, x2, y2`` pixel
order. :class:`Box` is the record type used at API boundaries (annotations,
detections, evaluation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
import torch

DEFAULT_ANCHOR_SIZES = (16, 32, 64, 128, 256, 512)
DEFAULT_ANCHOR_STRIDES = (4, 8, 16, 32, 64, 128)

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

# clamp on log-size deltas so decode never overflows exp()
_MAX_LOG_RATIO = math.log(1000.0 / 16)


class GeometryError(ValueError):
    """Raised for inconsistent anchor/box geometry."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    score: Optional[float] = None
    label: int = 0

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise GeometryError(f"box has negative extent: {self}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise GeometryError(f"score {self.score} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def is_detection(self) -> bool:
        return self.score is not None

    def as_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def boxes_to_tensor(boxes: Iterable[Box]) -> torch.Tensor:
    data = [b.as_list() for b in boxes]
    if not data:
        return torch.zeros((0, 4), dtype=torch.float32)
    return torch.tensor(data, dtype=torch.float32)


def tensor_to_boxes(t, scores=None, label: int = 0) -> List[Box]:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
    if scores is None:
        return [Box(*map(float, row), label=label) for row in t]
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    return [Box(*map(float, row), score=float(s), label=label) for row, s in zip(t, scores)]


@dataclass(frozen=True)
class AnchorLevel:
    stride: int
    base_size: int
    grid_h: int
    grid_w: int

    @property
    def count(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class AnchorSet:
    """Dense anchors in level order, row-major inside a level."""

    levels: List[AnchorLevel]
    boxes: torch.Tensor = field(repr=False)

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    def level_slices(self) -> List[slice]:
        out, start = [], 0
        for lvl in self.levels:
            out.append(slice(start, start + lvl.count))
            start += lvl.count
        return out

    def as_boxes(self) -> List[Box]:
        return tensor_to_boxes(self.boxes)


def generate_anchors(
    image_h: int,
    image_w: int,
    sizes: Sequence[int] = DEFAULT_ANCHOR_SIZES,
    strides: Sequence[int] = DEFAULT_ANCHOR_STRIDES,
) -> AnchorSet:
    """One square anchor of side ``sizes[k]`` per cell of level ``k``.

    Cell ``(i, j)`` on a level with stride ``s`` is centred at
    ``(s * (j + 0.5), s * (i + 0.5))``.
    """
    if len(sizes) != len(strides):
        raise GeometryError(
            f"dimension mismatch: {len(sizes)} sizes vs {len(strides)} strides"
        )
    if not sizes:
        raise GeometryError("at least one anchor level is required")
    biggest = max(strides)
    if image_h % biggest or image_w % biggest:
        raise GeometryError(
            f"image {image_h}x{image_w} is not divisible by the largest stride {biggest}"
        )
    levels, chunks = [], []
    for size, stride in zip(sizes, strides):
        gh, gw = image_h // stride, image_w // stride
        levels.append(AnchorLevel(int(stride), int(size), gh, gw))
        cy = (torch.arange(gh, dtype=torch.float32) + 0.5) * stride
        cx = (torch.arange(gw, dtype=torch.float32) + 0.5) * stride
        yy, xx = torch.meshgrid(cy, cx, indexing="ij")
        half = size / 2.0
        chunks.append(
            torch.stack([xx - half, yy - half, xx + half, yy + half], dim=-1).reshape(-1, 4)
        )
    return AnchorSet(levels=levels, boxes=torch.cat(chunks, dim=0))


def box_area(b: torch.Tensor) -> torch.Tensor:
    return (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU matrix of shape ``(len(a), len(b))``; zero-area pairs give 0."""
    a = a.reshape(-1, 4)
    b = b.reshape(-1, 4)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


@dataclass
class MatchResult:
    """Per-anchor assignment.

    ``labels`` holds POSITIVE / NEGATIVE / IGNORE, ``gt_index`` the matched
    ground truth for positives (-1 elsewhere) and ``regression_targets`` the
    encoded offsets, one row per positive anchor in anchor order.
    """

    labels: torch.Tensor
    gt_index: torch.Tensor
    regression_targets: torch.Tensor

    @property
    def positive_mask(self) -> torch.Tensor:
        return self.labels == POSITIVE

    @property
    def num_positive(self) -> int:
        return int(self.positive_mask.sum())


def match_anchors(
    anchors,
    gts,
    hi: float = 0.5,
    lo: float = 0.4,
) -> MatchResult:
    """Assign anchors to ground truth with the usual two-threshold rule.

    An anchor is positive when its best IoU is ``>= hi`` or when it is the
    best anchor of some ground truth (lowest index wins ties); negative when
    its best IoU is ``< lo``; ignored otherwise.
    """
    if lo > hi:
        raise GeometryError(f"threshold order violated: lo={lo} > hi={hi}")
    if not (0.0 <= lo and hi <= 1.0):
        raise GeometryError(f"thresholds must lie in [0, 1], got lo={lo}, hi={hi}")
    a = anchors.boxes if isinstance(anchors, AnchorSet) else torch.as_tensor(anchors)
    g = gts if isinstance(gts, torch.Tensor) else boxes_to_tensor(gts)
    g = g.to(a.dtype).reshape(-1, 4)
    n = a.shape[0]
    labels = torch.full((n,), NEGATIVE, dtype=torch.long)
    gt_index = torch.full((n,), -1, dtype=torch.long)
    if g.shape[0] == 0:
        return MatchResult(labels, gt_index, torch.zeros((0, 4), dtype=a.dtype))

    ious = box_iou(a, g)  # (n_anchor, n_gt)
    best_iou, best_gt = ious.max(dim=1)
    labels[best_iou >= lo] = IGNORE
    pos = best_iou >= hi
    gt_index[pos] = best_gt[pos]
    # Every gt gets its own best anchor; an anchor already forced for an
    # earlier gt is skipped so two gts never share one forced anchor.
    # torch.max returns the first maximal index, i.e. the lowest anchor.
    claimed = torch.zeros(n, dtype=torch.bool)
    for j in range(g.shape[0]):
        col = ious[:, j].masked_fill(claimed, -1.0)
        best, k = col.max(dim=0)
        if best > 0:
            k = int(k)
            claimed[k] = True
            pos[k] = True
            gt_index[k] = j
    labels[pos] = POSITIVE
    targets = encode_boxes(a[pos], g[gt_index[pos]])
    return MatchResult(labels, gt_index, targets)


def _centers(b: torch.Tensor):
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def encode_boxes(anchor, gt):
    """Centre offsets scaled by anchor size, then log size ratios.

    Accepts :class:`Box` pairs (returns a 4-list) or broadcastable tensors.
    """
    if isinstance(anchor, Box):
        out = encode_boxes(torch.tensor(anchor.as_list(), dtype=torch.float64),
                           torch.tensor(gt.as_list(), dtype=torch.float64))
        return out.tolist()
    ax, ay, aw, ah = _centers(anchor)
    gx, gy, gw, gh = _centers(gt)
    if bool((aw <= 0).any() | (ah <= 0).any()):
        raise GeometryError("anchor must have positive area")
    if bool((gw <= 0).any() | (gh <= 0).any()):
        raise GeometryError("cannot encode a ground-truth box with non-positive area")
    return torch.stack(
        [(gx - ax) / aw, (gy - ay) / ah, torch.log(gw / aw), torch.log(gh / ah)], dim=-1
    )


def decode_boxes(anchor, deltas):
    """Inverse of :func:`encode_boxes`."""
    if isinstance(anchor, Box):
        out = decode_boxes(torch.tensor(anchor.as_list(), dtype=torch.float64),
                           torch.as_tensor(deltas, dtype=torch.float64))
        return Box(*out.tolist())
    ax, ay, aw, ah = _centers(anchor)
    dx, dy = deltas[..., 0], deltas[..., 1]
    dw = deltas[..., 2].clamp(max=_MAX_LOG_RATIO)
    dh = deltas[..., 3].clamp(max=_MAX_LOG_RATIO)
    cx, cy = ax + dx * aw, ay + dy * ah
    w, h = aw * torch.exp(dw), ah * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def nms_indices(boxes: torch.Tensor, scores: torch.Tensor, iou_thresh: float) -> torch.Tensor:
    """Greedy suppression; returns kept indices in descending score order."""
    if boxes.shape[0] == 0:
        return torch.zeros(0, dtype=torch.long)
    order = torch.sort(scores, descending=True, stable=True).indices
    ious = box_iou(boxes, boxes)
    suppressed = torch.zeros(boxes.shape[0], dtype=torch.bool)
    keep = []
    for idx in order.tolist():
        if suppressed[idx]:
            continue
        keep.append(idx)
        suppressed |= ious[idx] > iou_thresh
    return torch.tensor(keep, dtype=torch.long)


def nms(dets: Sequence[Box], iou_thresh: float = 0.4) -> List[Box]:
    if not dets:
        return []
    if any(d.score is None for d in dets):
        raise GeometryError("nms requires scored detections")
    scores = torch.tensor([d.score for d in dets], dtype=torch.float64)
    keep = nms_indices(boxes_to_tensor(dets).double(), scores, iou_thresh)
    return [dets[i] for i in keep.tolist()]
