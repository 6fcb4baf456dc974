"""Toy-scale face detector: conv backbone, top-down pyramid, shared heads.

The pyramid's first level (stride 4, "OP2") feeds the optional SR branch in
training mode. In inference mode the branch is never executed, so detection
outputs and inference cost are those of the plain detector.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .anchors import AnchorSet, Box, decode_boxes, generate_anchors, nms_indices
from .sr_branch import OP2_STRIDE, FeatureMap, SRBranch, SRBranchConfig, sr_forward

CHECKPOINT_FORMAT = "srface-checkpoint"
CHECKPOINT_VERSION = 1

TRAIN = "train"
INFER = "infer"


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 6
    base_channels: int = 16
    input_size: int = 256
    fpn_channels: int = 16
    max_channels: int = 128
    growth: float = 2.0
    deep_blocks: int = 2
    expand_ratio: int = 4
    image_channels: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.input_size % (2 ** (self.levels + 1)):
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by 2**(levels+1) = {2 ** (self.levels + 1)}"
            )
        for name in ("base_channels", "fpn_channels", "max_channels", "expand_ratio", "image_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.growth < 1:
            raise ConfigError("growth must be >= 1")
        if self.deep_blocks < 0:
            raise ConfigError("deep_blocks must be >= 0")

    @property
    def strides(self) -> List[int]:
        return [OP2_STRIDE * 2 ** k for k in range(self.levels)]

    @property
    def anchor_sizes(self) -> List[int]:
        # stride = size / 4 keeps the 16 px anchors on OP2
        return [4 * s for s in self.strides]

    @property
    def widths(self) -> List[int]:
        # rounded to multiples of 8 as in the EfficientNet family
        out = []
        for k in range(self.levels):
            c = self.base_channels * self.growth ** k
            out.append(min(max(8, int(round(c / 8)) * 8), self.max_channels))
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeaturePyramid:
    maps: List[torch.Tensor]
    strides: List[int]

    @property
    def op2(self) -> FeatureMap:
        return FeatureMap(self.maps[0], self.strides[0])


@dataclass
class DetectionOutputs:
    cls_maps: List[torch.Tensor]
    reg_maps: List[torch.Tensor]
    sr_image: Optional[torch.Tensor] = None

    def flat_scores(self) -> torch.Tensor:
        """(N, A) probabilities in anchor order."""
        return torch.cat([c.flatten(1) for c in self.cls_maps], dim=1)

    def flat_deltas(self) -> torch.Tensor:
        """(N, A, 4) regression deltas in anchor order."""
        return torch.cat([r.permute(0, 2, 3, 1).reshape(r.shape[0], -1, 4) for r in self.reg_maps], dim=1)


class InvertedBottleneck(nn.Module):
    """1x1 expand -> depthwise 3x3 -> 1x1 project, residual when shapes allow."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1, expand: int = 4):
        super().__init__()
        hidden = c_in * expand
        self.expand = nn.Conv2d(c_in, hidden, 1)
        self.dw = nn.Conv2d(hidden, hidden, 3, stride=stride, padding=1, groups=hidden)
        self.project = nn.Conv2d(hidden, c_out, 1)
        self.act = nn.SiLU()
        self.residual = stride == 1 and c_in == c_out
        if self.residual:
            # residual blocks start as identity
            nn.init.zeros_(self.project.weight)
            nn.init.zeros_(self.project.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.project(self.act(self.dw(self.act(self.expand(x)))))
        return x + y if self.residual else y


class Backbone(nn.Module):
    """Stem to stride 2, then one stride-2 stage per pyramid level."""

    def __init__(self, cfg: PyramidConfig):
        super().__init__()
        w = cfg.widths
        self.stem = nn.Sequential(nn.Conv2d(cfg.image_channels, cfg.base_channels, 3, 2, 1), nn.SiLU())
        stages = []
        c_prev = cfg.base_channels
        for k, c in enumerate(w):
            blocks = [InvertedBottleneck(c_prev, c, 2, cfg.expand_ratio)]
            if k == cfg.levels - 1:
                blocks += [InvertedBottleneck(c, c, 1, cfg.expand_ratio) for _ in range(cfg.deep_blocks)]
            stages.append(nn.Sequential(*blocks))
            c_prev = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class TopDownPyramid(nn.Module):
    def __init__(self, widths: Sequence[int], out_channels: int):
        super().__init__()
        self.lateral = nn.ModuleList([nn.Conv2d(c, out_channels, 1) for c in widths])
        self.smooth = nn.ModuleList([nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in widths])

    def forward(self, feats: List[torch.Tensor]) -> List[torch.Tensor]:
        laterals = [lat(f) for lat, f in zip(self.lateral, feats)]
        for k in range(len(laterals) - 2, -1, -1):
            laterals[k] = laterals[k] + F.interpolate(laterals[k + 1], scale_factor=2.0, mode="nearest")
        return [sm(x) for sm, x in zip(self.smooth, laterals)]


class DetectionHead(nn.Module):
    """Two shared 3x3 convs, then per-anchor score and 4 box deltas."""

    def __init__(self, channels: int, prior: float = 0.01):
        super().__init__()
        self.tower = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.SiLU(),
        )
        self.cls = nn.Conv2d(channels, 1, 3, padding=1)
        self.reg = nn.Conv2d(channels, 4, 3, padding=1)
        self.prob = nn.Sigmoid()
        nn.init.constant_(self.cls.bias, -math.log((1 - prior) / prior))
        nn.init.normal_(self.reg.weight, std=0.01)
        nn.init.zeros_(self.reg.bias)

    def forward(self, x: torch.Tensor):
        t = self.tower(x)
        return self.prob(self.cls(t)), self.reg(t)


class SRFaceNet(nn.Module):
    """Detector with an optional training-only SR branch at OP2."""

    def __init__(self, cfg: PyramidConfig = PyramidConfig(), sr_cfg: Optional[SRBranchConfig] = None):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.pyramid = TopDownPyramid(cfg.widths, cfg.fpn_channels)
        self.head = DetectionHead(cfg.fpn_channels)
        self.sr_cfg = sr_cfg
        if sr_cfg is not None:
            if sr_cfg.channels != cfg.fpn_channels:
                raise ConfigError(
                    f"SR branch width {sr_cfg.channels} must equal OP2 width {cfg.fpn_channels}"
                )
            self.sr_branch = SRBranch(sr_cfg)
        else:
            self.sr_branch = None
        self._anchors: dict = {}

    @property
    def has_sr_branch(self) -> bool:
        return self.sr_branch is not None

    def detection_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("sr_branch."):
                yield name, p

    def anchors(self) -> AnchorSet:
        key = self.cfg.input_size
        if key not in self._anchors:
            s = self.cfg.input_size
            self._anchors[key] = generate_anchors(s, s, self.cfg.anchor_sizes, self.cfg.strides)
        return self._anchors[key]

    def backbone_forward(self, image: torch.Tensor) -> FeaturePyramid:
        return backbone_forward(self, image)

    def heads_forward(self, pyr: FeaturePyramid) -> DetectionOutputs:
        cls_maps, reg_maps = [], []
        for f in pyr.maps:
            c, r = self.head(f)
            cls_maps.append(c)
            reg_maps.append(r)
        return DetectionOutputs(cls_maps, reg_maps)

    def forward(self, image: torch.Tensor, mode: str = INFER) -> DetectionOutputs:
        return model_forward(self, image, mode)


def backbone_forward(model: SRFaceNet, image: torch.Tensor) -> FeaturePyramid:
    cfg = model.cfg
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.shape[-2:] != (cfg.input_size, cfg.input_size):
        raise ConfigError(
            f"size mismatch: image {tuple(image.shape[-2:])} vs configured input {cfg.input_size}"
        )
    feats = model.backbone(image * 2.0 - 1.0)
    return FeaturePyramid(model.pyramid(feats), cfg.strides)


def model_forward(model: SRFaceNet, image: torch.Tensor, mode: str = INFER) -> DetectionOutputs:
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be '{TRAIN}' or '{INFER}', got {mode!r}")
    pyr = backbone_forward(model, image)
    out = model.heads_forward(pyr)
    if mode == TRAIN and model.sr_branch is not None:
        out.sr_image = sr_forward(pyr.op2, model.sr_branch)
    return out


def build_model(
    cfg: PyramidConfig = PyramidConfig(),
    sr_cfg: Optional[SRBranchConfig] = None,
    seed: int = 0,
) -> SRFaceNet:
    """Seeded construction; detection weights do not depend on ``sr_cfg``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SRFaceNet(cfg, None)
        if sr_cfg is not None:
            if sr_cfg.channels != cfg.fpn_channels:
                raise ConfigError(
                    f"SR branch width {sr_cfg.channels} must equal OP2 width {cfg.fpn_channels}"
                )
            torch.manual_seed(seed + 7919)
            model.sr_branch = SRBranch(sr_cfg)
            model.sr_cfg = sr_cfg
    return model


def with_input_size(model: SRFaceNet, size: int) -> SRFaceNet:
    """Same weights, different configured input size."""
    cfg = PyramidConfig(**{**model.cfg.to_dict(), "input_size": size})
    clone = SRFaceNet(cfg, model.sr_cfg)
    clone.load_state_dict(model.state_dict())
    return clone


def strip_sr_branch(model: SRFaceNet) -> SRFaceNet:
    """Detector-only copy sharing no state with ``model``."""
    clone = SRFaceNet(model.cfg, None)
    clone.load_state_dict({k: v for k, v in model.state_dict().items() if not k.startswith("sr_branch.")})
    return clone


@torch.no_grad()
def detect(
    model: SRFaceNet,
    image: torch.Tensor,
    score_thresh: float = 0.05,
    nms_thresh: float = 0.4,
    pre_nms_top_k: int = 1000,
    max_detections: int = 300,
) -> List[List[Box]]:
    """Decode, threshold, suppress and clip; one list of boxes per image."""
    batched = image.dim() == 4
    if not batched:
        image = image.unsqueeze(0)
    out = model_forward(model, image, INFER)
    scores = out.flat_scores()
    deltas = out.flat_deltas()
    anchors = model.anchors().boxes
    size = float(model.cfg.input_size)
    results = []
    for n in range(image.shape[0]):
        s = scores[n]
        keep = torch.nonzero(s > score_thresh).flatten()
        if keep.numel() > pre_nms_top_k:
            keep = keep[torch.topk(s[keep], pre_nms_top_k).indices]
        boxes = decode_boxes(anchors[keep], deltas[n, keep]).clamp(0.0, size)
        kept_scores = s[keep]
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, kept_scores = boxes[valid], kept_scores[valid]
        idx = nms_indices(boxes, kept_scores, nms_thresh)[:max_detections]
        results.append(
            [Box(*map(float, boxes[i].tolist()), score=float(kept_scores[i])) for i in idx.tolist()]
        )
    return results if batched else results[0]


def save_checkpoint(path, model: SRFaceNet, optimizer_state=None, epoch: int = 0, **extra) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "pyramid": model.cfg.to_dict(),
        "sr_branch": model.sr_cfg.to_dict() if model.sr_cfg is not None else None,
        "weights": model.state_dict(),
        "optimizer": optimizer_state,
        "epoch": int(epoch),
        "extra": extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


_REQUIRED = ("format", "version", "pyramid", "sr_branch", "weights", "optimizer", "epoch", "extra")


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an srface checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    missing = [k for k in _REQUIRED if k not in payload]
    if missing:
        raise CheckpointError(f"{path}: checkpoint missing fields {missing}")
    return payload


def model_from_checkpoint(payload: dict) -> SRFaceNet:
    try:
        cfg = PyramidConfig(**payload["pyramid"])
        sr = SRBranchConfig(**payload["sr_branch"]) if payload["sr_branch"] else None
        model = SRFaceNet(cfg, sr)
        model.load_state_dict(payload["weights"])
    except (TypeError, RuntimeError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint fields do not describe a valid model: {exc}") from exc
    return model
