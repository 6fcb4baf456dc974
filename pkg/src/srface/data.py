"""Synthetic face data, paired degradation/augmentation and annotation files.

Images are ``float32`` arrays of shape ``(H, W, C)`` in ``[0, 1]``; boxes
are ``(k, 4)`` arrays of ``x1, y1, x2, y2`` pixels. A :class:`TrainSample`
carries the degraded detector input and the clean image used as the
reconstruction target.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .anchors import Box

ANNOTATION_FILE = "annotations.txt"
IMAGE_DIR = "images"


class DataError(ValueError):
    pass


class InfeasiblePlacementError(DataError):
    pass


@dataclass
class TrainSample:
    input_image: np.ndarray
    gt_boxes: np.ndarray
    sr_target: np.ndarray

    def __post_init__(self):
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float32).reshape(-1, 4)
        if self.input_image.shape != self.sr_target.shape:
            raise DataError(
                f"input {self.input_image.shape} and SR target {self.sr_target.shape} differ in shape"
            )

    @property
    def boxes(self) -> List[Box]:
        return [Box(*map(float, b)) for b in self.gt_boxes]

    @classmethod
    def clean(cls, image: np.ndarray, boxes) -> "TrainSample":
        return cls(image.copy(), boxes, image.copy())


# ----------------------------------------------------------------------------
# blur


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    if sigma < 0:
        raise DataError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ``ceil(3 sigma)``, reflect padding."""
    k = gaussian_kernel1d(sigma)
    if k.size == 1:
        return image.copy()
    r = k.size // 2
    if r >= min(image.shape[:2]):
        raise DataError(f"blur radius {r} too large for image {image.shape[:2]}")
    pad = [(r, r), (r, r)] + [(0, 0)] * (image.ndim - 2)
    src = np.pad(image.astype(np.float64), pad, mode="reflect")
    h, w = image.shape[:2]
    rows = sum(k[i] * src[i:i + h] for i in range(k.size))
    out = sum(k[i] * rows[:, i:i + w] for i in range(k.size))
    return out.astype(image.dtype)


# ----------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    blur_prob: float = 0.5
    sigma_range: Tuple[float, float] = (0.5, 2.5)
    brightness_range: Tuple[float, float] = (-0.1, 0.1)
    contrast_range: Tuple[float, float] = (0.8, 1.2)
    crop_prob: float = 0.5
    crop_scale_range: Tuple[float, float] = (0.6, 1.0)
    hflip_prob: float = 0.5
    min_box_keep: float = 0.5
    crop_retries: int = 10

    def __post_init__(self):
        for name in ("blur_prob", "crop_prob", "hflip_prob", "min_box_keep"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} must lie in [0, 1], got {v}")
        for name in ("sigma_range", "brightness_range", "contrast_range", "crop_scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise DataError(f"{name} must satisfy lo <= hi, got ({lo}, {hi})")
        if self.sigma_range[0] < 0:
            raise DataError("sigma_range must be non-negative")
        if not (0.0 < self.crop_scale_range[0] and self.crop_scale_range[1] <= 1.0):
            raise DataError("crop_scale_range must lie in (0, 1]")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(
            blur_prob=0.0, brightness_range=(0.0, 0.0), contrast_range=(1.0, 1.0),
            crop_prob=0.0, crop_scale_range=(1.0, 1.0), hflip_prob=0.0,
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def hflip_boxes(boxes: np.ndarray, width: float) -> np.ndarray:
    out = boxes.copy()
    out[:, 0] = width - boxes[:, 2]
    out[:, 2] = width - boxes[:, 0]
    return out


def _resize(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None].float()
    t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy().astype(image.dtype)


def _crop_boxes(boxes: np.ndarray, x0: int, y0: int, side: int, min_keep: float):
    if boxes.size == 0:
        return boxes, True
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    clipped = boxes.copy()
    clipped[:, [0, 2]] = np.clip(boxes[:, [0, 2]], x0, x0 + side)
    clipped[:, [1, 3]] = np.clip(boxes[:, [1, 3]], y0, y0 + side)
    kept_area = (clipped[:, 2] - clipped[:, 0]) * (clipped[:, 3] - clipped[:, 1])
    keep = kept_area >= min_keep * np.maximum(area, 1e-12)
    out = clipped[keep] - np.array([x0, y0, x0, y0], dtype=boxes.dtype)
    return out, bool(keep.any())


def random_crop(sample: TrainSample, cfg: AugmentConfig, rng: np.random.Generator) -> TrainSample:
    h, w = sample.sr_target.shape[:2]
    base = min(h, w)
    lo, hi = cfg.crop_scale_range
    for _ in range(cfg.crop_retries):
        side = int(round(rng.uniform(lo, hi) * base))
        side = max(1, min(side, base))
        x0 = int(rng.integers(0, w - side + 1))
        y0 = int(rng.integers(0, h - side + 1))
        boxes, ok = _crop_boxes(sample.gt_boxes, x0, y0, side, cfg.min_box_keep)
        if not ok:
            continue
        scale = np.array([w / side, h / side, w / side, h / side], dtype=np.float32)

        def crop(img):
            return _resize(img[y0:y0 + side, x0:x0 + side], (h, w))

        return TrainSample(crop(sample.input_image), boxes * scale, crop(sample.sr_target))
    return sample


def photometric(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    contrast = rng.uniform(*cfg.contrast_range)
    brightness = rng.uniform(*cfg.brightness_range)
    if contrast == 1.0 and brightness == 0.0:
        return image.copy()
    mean = image.mean()
    return np.clip((image - mean) * contrast + mean + brightness, 0.0, 1.0).astype(image.dtype)


def augment(sample: TrainSample, cfg: AugmentConfig, rng: np.random.Generator) -> TrainSample:
    """Shared geometric transforms, then input-only photometric jitter and blur.

    The SR target only ever sees the crop and flip, so it stays the clean
    counterpart of the degraded input.
    """
    out = sample
    if cfg.crop_prob > 0 and rng.random() < cfg.crop_prob:
        out = random_crop(out, cfg, rng)
    if cfg.hflip_prob > 0 and rng.random() < cfg.hflip_prob:
        w = out.sr_target.shape[1]
        out = TrainSample(
            out.input_image[:, ::-1].copy(), hflip_boxes(out.gt_boxes, w), out.sr_target[:, ::-1].copy()
        )
    image = photometric(out.input_image, cfg, rng)
    if cfg.blur_prob > 0 and rng.random() < cfg.blur_prob:
        image = gaussian_blur(image, rng.uniform(*cfg.sigma_range))
    if out is sample:
        return TrainSample(image, sample.gt_boxes.copy(), sample.sr_target.copy())
    return TrainSample(image, out.gt_boxes, out.sr_target)


def degrade(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random blur only; used to build degraded evaluation images."""
    if cfg.blur_prob > 0 and rng.random() < cfg.blur_prob:
        return gaussian_blur(image, rng.uniform(*cfg.sigma_range))
    return image.copy()


# ----------------------------------------------------------------------------
# synthetic faces


@dataclass(frozen=True)
class SynthConfig:
    n: int = 500
    image_size: int = 64
    faces_per_image: Tuple[int, int] = (1, 4)
    small_fraction: float = 0.5
    small_size_range: Tuple[float, float] = (8.0, 16.0)
    large_size_range: Tuple[float, float] = (16.0, 32.0)
    distractors_per_image: Tuple[int, int] = (0, 3)
    max_overlap: float = 0.1
    placement_tries: int = 100
    layout_retries: int = 20
    supersample: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise DataError("n must be >= 1")
        lo, hi = self.faces_per_image
        if lo < 0 or lo > hi:
            raise DataError(f"invalid faces_per_image range {self.faces_per_image}")
        if not 0.0 <= self.small_fraction <= 1.0:
            raise DataError("small_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


_SKIN = np.array([
    [0.96, 0.80, 0.69], [0.89, 0.67, 0.53], [0.78, 0.56, 0.42],
    [0.63, 0.43, 0.30], [0.47, 0.31, 0.20], [0.99, 0.87, 0.77],
])


def _background(rng: np.random.Generator, size: int, ss: int) -> np.ndarray:
    coarse = rng.uniform(0.1, 0.9, size=(1, 3, 5, 5)).astype(np.float32)
    t = F.interpolate(torch.from_numpy(coarse), size=(size * ss, size * ss), mode="bicubic", align_corners=False)
    bg = t[0].permute(1, 2, 0).numpy()
    bg = bg + rng.normal(0.0, 0.04, size=bg.shape).astype(np.float32)
    return np.clip(bg, 0.0, 1.0)


def _ellipse(xx, yy, cx, cy, rx, ry):
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _paint(canvas, mask, color):
    canvas[mask] = color


def _draw_face(canvas, xx, yy, box, rng):
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
    skin = np.clip(_SKIN[rng.integers(len(_SKIN))] + rng.normal(0, 0.03, 3), 0, 1)
    _paint(canvas, _ellipse(xx, yy, cx, cy, rx, ry), skin)
    # hair cap over the top third
    hair = np.clip(rng.uniform(0.0, 0.35) + rng.normal(0, 0.03, 3), 0, 1)
    cap = _ellipse(xx, yy, cx, cy - 0.05 * ry, rx * 1.02, ry * 0.98) & (yy < cy - 0.55 * ry)
    _paint(canvas, cap, hair)
    dark = np.array([0.08, 0.06, 0.06])
    for side in (-1, 1):
        _paint(canvas, _ellipse(xx, yy, cx + side * 0.38 * rx, cy - 0.12 * ry, 0.16 * rx, 0.10 * ry), dark)
    _paint(canvas, _ellipse(xx, yy, cx, cy + 0.48 * ry, 0.38 * rx, 0.09 * ry), np.array([0.45, 0.12, 0.12]))


def _draw_distractor(canvas, xx, yy, size, rng):
    s = rng.uniform(6, 0.5 * size)
    cx, cy = rng.uniform(0, size), rng.uniform(0, size)
    color = rng.uniform(0, 1, 3)
    if rng.random() < 0.5:
        mask = _ellipse(xx, yy, cx, cy, s / 2, s * rng.uniform(0.3, 0.7))
    else:
        mask = (np.abs(xx - cx) <= s / 2) & (np.abs(yy - cy) <= s * rng.uniform(0.2, 0.6))
    _paint(canvas, mask, color)


def _max_overlap(b: np.ndarray, others: List[np.ndarray]) -> float:
    """Largest intersection over the smaller box's area, so nesting counts."""
    best = 0.0
    for o in others:
        iw = max(0.0, min(b[2], o[2]) - max(b[0], o[0]))
        ih = max(0.0, min(b[3], o[3]) - max(b[1], o[1]))
        smaller = min((b[2] - b[0]) * (b[3] - b[1]), (o[2] - o[0]) * (o[3] - o[1]))
        best = max(best, iw * ih / smaller)
    return best


def _place(cfg: SynthConfig, is_small: np.ndarray, rng: np.random.Generator):
    size = cfg.image_size
    boxes = []
    for small in is_small:
        lo, hi = cfg.small_size_range if small else cfg.large_size_range
        for _ in range(cfg.placement_tries):
            h = rng.uniform(lo, hi)
            w = 0.8 * h
            x1, y1 = rng.uniform(0, size - w), rng.uniform(0, size - h)
            b = np.array([x1, y1, x1 + w, y1 + h])
            if _max_overlap(b, boxes) <= cfg.max_overlap:
                boxes.append(b)
                break
        else:
            return None
    return boxes


def render_image(cfg: SynthConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(image, boxes, is_small)`` for one synthetic scene."""
    size, ss = cfg.image_size, cfg.supersample
    n_faces = int(rng.integers(cfg.faces_per_image[0], cfg.faces_per_image[1] + 1))
    is_small = rng.random(n_faces) < cfg.small_fraction
    for _ in range(cfg.layout_retries):
        boxes = _place(cfg, is_small, rng)
        if boxes is not None:
            break
    else:
        raise InfeasiblePlacementError(
            f"could not place {n_faces} faces in a {size}px image within overlap budget {cfg.max_overlap}"
        )
    canvas = _background(rng, size, ss)
    coords = (np.arange(size * ss) + 0.5) / ss
    xx, yy = np.meshgrid(coords, coords)
    for _ in range(int(rng.integers(cfg.distractors_per_image[0], cfg.distractors_per_image[1] + 1))):
        _draw_distractor(canvas, xx, yy, size, rng)
    for b in boxes:
        _draw_face(canvas, xx, yy, b, rng)
    image = canvas.reshape(size, ss, size, ss, 3).mean(axis=(1, 3)).astype(np.float32)
    arr = np.array(boxes, dtype=np.float32).reshape(-1, 4)
    return np.clip(image, 0.0, 1.0), arr, is_small


def synth_dataset(cfg: SynthConfig = SynthConfig(), return_small: bool = False):
    """Deterministic list of clean :class:`TrainSample` scenes.

    Image ``i`` is drawn from its own stream seeded by ``(seed, i)``, so a
    prefix of a larger dataset equals the smaller one.
    """
    samples, flags = [], []
    for i in range(cfg.n):
        rng = np.random.default_rng([cfg.seed, i])
        image, boxes, small = render_image(cfg, rng)
        samples.append(TrainSample.clean(image, boxes))
        flags.append(small)
    return (samples, flags) if return_small else samples


def degraded_copy(samples: Sequence[TrainSample], cfg: AugmentConfig, seed: int) -> List[TrainSample]:
    """Evaluation set: each input independently blurred, targets untouched."""
    out = []
    for i, s in enumerate(samples):
        rng = np.random.default_rng([seed, i, 1])
        out.append(TrainSample(degrade(s.sr_target, cfg, rng), s.gt_boxes.copy(), s.sr_target.copy()))
    return out


# ----------------------------------------------------------------------------
# annotation files
#
#   file    := record*
#   record  := path "\n" count "\n" (box "\n"){count}
#   box     := x1 " " y1 " " x2 " " y2 [" " score]
#
# ASCII, "\n" line endings, coordinates "%.2f", scores "%.6f".


def format_annotations(records: Sequence[Tuple[str, np.ndarray]], scores: Optional[Sequence] = None) -> str:
    lines = []
    for i, (path, boxes) in enumerate(records):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        lines.append(str(path))
        lines.append(str(len(boxes)))
        for j, b in enumerate(boxes):
            row = " ".join(f"{v:.2f}" for v in b)
            if scores is not None:
                row += f" {float(scores[i][j]):.6f}"
            lines.append(row)
    return "".join(line + "\n" for line in lines)


def parse_annotations(text: str):
    """Inverse of :func:`format_annotations`.

    Returns ``[(path, boxes, scores_or_None)]``.
    """
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    out, i = [], 0
    while i < len(lines):
        path = lines[i]
        try:
            count = int(lines[i + 1])
        except (IndexError, ValueError) as exc:
            raise DataError(f"line {i + 2}: expected a box count after path {path!r}") from exc
        rows = lines[i + 2:i + 2 + count]
        if len(rows) != count:
            raise DataError(f"record {path!r}: expected {count} boxes, found {len(rows)}")
        vals = []
        for k, row in enumerate(rows):
            parts = row.split(" ")
            if len(parts) not in (4, 5):
                raise DataError(f"line {i + 3 + k}: expected 4 or 5 numbers, got {row!r}")
            try:
                vals.append([float(p) for p in parts])
            except ValueError as exc:
                raise DataError(f"line {i + 3 + k}: {exc}") from exc
        widths = {len(v) for v in vals}
        if len(widths) > 1:
            raise DataError(f"record {path!r}: mixed scored and unscored boxes")
        arr = np.array(vals, dtype=np.float64).reshape(-1, widths.pop() if widths else 4)
        scores = arr[:, 4].copy() if arr.shape[1] == 5 else None
        out.append((path, arr[:, :4].astype(np.float32), scores))
        i += 2 + count
    return out


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def export_dataset(samples: Sequence[TrainSample], out_dir) -> Path:
    """Write ``images/NNNNNN.png`` plus ``annotations.txt``; returns the annotation path."""
    out_dir = Path(out_dir)
    (out_dir / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        rel = f"{IMAGE_DIR}/{i:06d}.png"
        Image.fromarray(to_uint8(s.sr_target)).save(out_dir / rel)
        records.append((rel, s.gt_boxes))
    ann = out_dir / ANNOTATION_FILE
    ann.write_text(format_annotations(records), encoding="ascii")
    return ann


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_dataset(data_dir) -> List[TrainSample]:
    data_dir = Path(data_dir)
    ann = data_dir / ANNOTATION_FILE
    if not ann.exists():
        raise FileNotFoundError(f"no annotation file at {ann}")
    samples = []
    for path, boxes, _ in parse_annotations(ann.read_text(encoding="ascii")):
        image_path = data_dir / path
        if not image_path.exists():
            raise FileNotFoundError(f"annotated image missing: {image_path}")
        samples.append(TrainSample.clean(load_image(image_path), boxes))
    return samples


def load_detections(path) -> List[List[Box]]:
    recs = parse_annotations(Path(path).read_text(encoding="ascii"))
    out = []
    for _, boxes, scores in recs:
        if scores is None:
            scores = np.ones(len(boxes))
        out.append([Box(*map(float, b), score=float(s)) for b, s in zip(boxes, scores)])
    return out


def write_detections(path, names: Sequence[str], dets: Sequence[Sequence[Box]]) -> None:
    records = [(n, np.array([d.as_list() for d in ds]).reshape(-1, 4)) for n, ds in zip(names, dets)]
    scores = [[d.score for d in ds] for ds in dets]
    Path(path).write_text(format_annotations(records, scores), encoding="ascii")
