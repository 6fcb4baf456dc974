"""Training loop: AdamW, plateau learning-rate decay, checkpoints and logs."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .anchors import match_anchors
from .data import AugmentConfig, TrainSample, augment
from .detector import (
    TRAIN,
    SRFaceNet,
    detect,
    load_checkpoint,
    model_forward,
    model_from_checkpoint,
    save_checkpoint,
)
from .losses import FocalParams, LossReport, combine, focal_loss, smooth_l1, sr_l1, total_loss

log = logging.getLogger(__name__)

WORKERS_ENV = "SRFACE_NUM_WORKERS"
LAST_CHECKPOINT = "last.pt"
BEST_CHECKPOINT = "best.pt"
TRAIN_LOG = "train_log.jsonl"


class TrainConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    lr_floor: float = 1e-8
    plateau_patience: int = 3
    lr_factor: float = 0.1
    min_rel_improvement: float = 1e-4
    batch_size: int = 4
    epochs: int = 30
    phi: float = 0.1
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 10.0
    match_hi: float = 0.5
    match_lo: float = 0.4
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_floor <= self.lr0:
            raise TrainConfigError(f"need 0 < lr_floor <= lr0, got {self.lr_floor}, {self.lr0}")
        if not 0 < self.lr_factor < 1:
            raise TrainConfigError(f"lr_factor must lie in (0, 1), got {self.lr_factor}")
        if self.plateau_patience < 1:
            raise TrainConfigError("plateau_patience must be >= 1")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise TrainConfigError("epochs must be >= 0")
        if self.phi < 0:
            raise TrainConfigError(f"phi must be >= 0, got {self.phi}")
        if self.match_lo > self.match_hi:
            raise TrainConfigError("match_lo must not exceed match_hi")

    @property
    def focal(self) -> FocalParams:
        return FocalParams(self.focal_alpha, self.focal_gamma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class EpochRecord:
    epoch: int
    loss: LossReport
    lr: float
    wall_time: float

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, **self.loss.as_dict(), "lr": self.lr, "wall_time": self.wall_time}


@dataclass
class FitResult:
    model: SRFaceNet
    records: List[EpochRecord]
    best_checkpoint: Optional[Path] = None
    last_checkpoint: Optional[Path] = None


# ----------------------------------------------------------------------------
# schedule


def _improved(loss: float, best: float, rel: float) -> bool:
    return loss < best - rel * abs(best)


def plateau_events(history: Sequence[float], cfg: TrainConfig) -> List[bool]:
    """Replay the stall counter; entry ``i`` says whether epoch ``i`` triggers a decay."""
    events = []
    best, bad = math.inf, 0
    for i, loss in enumerate(history):
        if i == 0 or _improved(loss, best, cfg.min_rel_improvement):
            best, bad = loss, 0
            events.append(False)
            continue
        bad += 1
        if bad >= cfg.plateau_patience:
            bad = 0
            events.append(True)
        else:
            events.append(False)
    return events


def lr_schedule_step(history: Sequence[float], current_lr: float, cfg: TrainConfig) -> float:
    """Learning rate after the latest epoch in ``history``.

    Decays by ``lr_factor`` once the monitored loss has failed to improve by
    ``min_rel_improvement`` (relative) for ``plateau_patience`` consecutive
    epochs, never going below ``lr_floor``.
    """
    if not history:
        raise ValueError("history must be non-empty")
    if not plateau_events(history, cfg)[-1]:
        return current_lr
    new = current_lr * cfg.lr_factor
    # repeated float multiplication lands a hair above the floor
    if new <= cfg.lr_floor * (1 + 1e-6):
        return cfg.lr_floor
    return new


# ----------------------------------------------------------------------------
# one step


def make_optimizer(model: SRFaceNet, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.lr0, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay
    )


def collate(batch: Sequence[TrainSample]):
    x = torch.from_numpy(np.stack([s.input_image for s in batch])).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(np.stack([s.sr_target for s in batch])).permute(0, 3, 1, 2).contiguous()
    return x.float(), y.float()


def batch_losses(model: SRFaceNet, batch: Sequence[TrainSample], cfg: TrainConfig):
    """Forward in train mode; returns ``(l_focal, l_smooth, l_sr)`` tensors."""
    x, target = collate(batch)
    out = model_forward(model, x, TRAIN)
    scores = out.flat_scores()
    deltas = out.flat_deltas()
    anchors = model.anchors()
    labels, pred_rows, target_rows = [], [], []
    for n, sample in enumerate(batch):
        m = match_anchors(anchors, torch.from_numpy(sample.gt_boxes), cfg.match_hi, cfg.match_lo)
        labels.append(m.labels)
        pred_rows.append(deltas[n][m.positive_mask])
        target_rows.append(m.regression_targets)
    labels = torch.stack(labels)
    n_pos = int((labels == 1).sum())
    l_focal = focal_loss(scores, labels, cfg.focal)
    l_smooth = smooth_l1(torch.cat(pred_rows), torch.cat(target_rows), n_pos)
    if out.sr_image is not None:
        l_sr = sr_l1(out.sr_image, target)
    else:
        l_sr = torch.zeros((), dtype=scores.dtype)
    return l_focal, l_smooth, l_sr


def train_step(batch: Sequence[TrainSample], model: SRFaceNet, optimizer, cfg: TrainConfig) -> LossReport:
    if not batch:
        raise ValueError("empty batch")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    l_focal, l_smooth, l_sr = batch_losses(model, batch, cfg)
    loss = combine(l_focal, l_smooth, l_sr, cfg.phi)
    if not torch.isfinite(loss):
        optimizer.zero_grad(set_to_none=True)
        raise NonFiniteLossError(
            f"non-finite loss (focal={l_focal.item()}, smooth={l_smooth.item()}, sr={l_sr.item()}); step skipped"
        )
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return total_loss(l_focal.item(), l_smooth.item(), l_sr.item(), cfg.phi)


# ----------------------------------------------------------------------------
# epochs


def num_workers() -> int:
    try:
        return max(0, int(os.environ.get(WORKERS_ENV, "0")))
    except ValueError:
        return 0


def _augmented(dataset, indices, aug: AugmentConfig, seed: int, epoch: int, pool):
    def one(i):
        return augment(dataset[i], aug, np.random.default_rng([seed, epoch, int(i)]))

    if pool is None:
        return [one(i) for i in indices]
    return list(pool.map(one, indices))


def _mean_report(reports: Sequence[LossReport], phi: float) -> LossReport:
    f = float(np.mean([r.l_focal for r in reports]))
    s = float(np.mean([r.l_smooth for r in reports]))
    r_ = float(np.mean([r.l_sr for r in reports]))
    return total_loss(f, s, r_, phi)


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def fit(
    dataset: Sequence[TrainSample],
    cfg: TrainConfig,
    model: Optional[SRFaceNet] = None,
    aug: AugmentConfig = AugmentConfig(),
    out_dir=None,
    resume=None,
    stop_after: Optional[int] = None,
) -> FitResult:
    """Train for ``cfg.epochs`` epochs, checkpointing into ``out_dir``.

    Every random choice is drawn from streams keyed by ``(seed, epoch, ...)``,
    so resuming from a checkpoint continues bit-for-bit. ``stop_after``
    interrupts after that many epochs in total (used to exercise resume).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    records: List[EpochRecord] = []
    history: List[float] = []
    start = 0
    best = math.inf
    lr = cfg.lr0

    if resume is not None:
        payload = load_checkpoint(resume)
        model = model_from_checkpoint(payload)
        optimizer = make_optimizer(model, cfg)
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        extra = payload["extra"]
        start = payload["epoch"]
        history = list(extra.get("history", []))
        records = [
            EpochRecord(r["epoch"], LossReport(r["l_focal"], r["l_smooth"], r["l_sr"], r["phi"], r["l_ef"]),
                        r["lr"], r["wall_time"])
            for r in extra.get("records", [])
        ]
        best = extra.get("best", math.inf)
        lr = extra.get("lr", cfg.lr0)
    else:
        if model is None:
            raise ValueError("fit needs a model or a checkpoint to resume from")
        optimizer = make_optimizer(model, cfg)
    _set_lr(optimizer, lr)

    def checkpoint(name, epoch):
        if out_dir is None:
            return None
        path = out_dir / name
        save_checkpoint(
            path, model, optimizer.state_dict(), epoch,
            history=history, records=[r.as_dict() for r in records], best=best, lr=lr,
            train_config=cfg.to_dict(),
        )
        return path

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    last_path = out_dir / LAST_CHECKPOINT if out_dir is not None else None
    best_path = out_dir / BEST_CHECKPOINT if out_dir is not None else None
    if resume is None:
        checkpoint(LAST_CHECKPOINT, 0)
        checkpoint(BEST_CHECKPOINT, 0)
        if out_dir is not None:
            (out_dir / TRAIN_LOG).write_text("")

    workers = num_workers()
    pool = ThreadPoolExecutor(workers) if workers > 0 else None
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    try:
        for epoch in range(start, end):
            t0 = time.perf_counter()
            perm = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
            reports = []
            for k in range(0, len(perm), cfg.batch_size):
                batch = _augmented(dataset, perm[k:k + cfg.batch_size], aug, cfg.seed, epoch, pool)
                reports.append(train_step(batch, model, optimizer, cfg))
            mean = _mean_report(reports, cfg.phi)
            rec = EpochRecord(epoch, mean, lr, time.perf_counter() - t0)
            records.append(rec)
            history.append(mean.l_ef)
            lr = lr_schedule_step(history, lr, cfg)
            _set_lr(optimizer, lr)
            log.info("epoch %d loss %.5f lr %.1e", epoch, mean.l_ef, rec.lr)
            if out_dir is not None:
                with open(out_dir / TRAIN_LOG, "a") as fh:
                    fh.write(json.dumps(rec.as_dict()) + "\n")
            if mean.l_ef < best:
                best = mean.l_ef
                checkpoint(BEST_CHECKPOINT, epoch + 1)
            checkpoint(LAST_CHECKPOINT, epoch + 1)
    finally:
        if pool is not None:
            pool.shutdown()
    return FitResult(model, records, best_path, last_path)


def predict(model: SRFaceNet, images: Sequence[np.ndarray], score_thresh: float = 0.05,
            nms_thresh: float = 0.4, batch_size: int = 32):
    """Detections for a list of ``(H, W, C)`` images."""
    model.eval()
    out = []
    for k in range(0, len(images), batch_size):
        x = torch.from_numpy(np.stack(images[k:k + batch_size])).permute(0, 3, 1, 2).float()
        out.extend(detect(model, x, score_thresh, nms_thresh))
    return out
