"""Train-and-evaluate trials and the SR-loss weight sweep."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import ExperimentConfig
from .data import TrainSample, degraded_copy, synth_dataset
from .detector import build_model
from .engine import fit, predict
from .metrics import SUBSETS, PRCurve, evaluate_subsets

log = logging.getLogger(__name__)


@dataclass
class TrialResult:
    phi: float
    seed: int
    sr_enabled: bool
    ap: Dict[str, float] = field(default_factory=dict)
    final_loss: Optional[float] = None
    status: str = "ok"
    error: str = ""

    def as_dict(self) -> dict:
        return {
            "phi": self.phi, "seed": self.seed, "sr_enabled": self.sr_enabled,
            **{f"ap_{k}": self.ap.get(k) for k in SUBSETS},
            "final_loss": self.final_loss, "status": self.status, "error": self.error,
        }


def validation_set(cfg: ExperimentConfig) -> List[TrainSample]:
    """Held-out synthetic scenes, blurred like training inputs when configured."""
    synth = dataclasses.replace(cfg.synth, n=cfg.eval.val_n, seed=cfg.eval.val_seed)
    clean = synth_dataset(synth)
    if cfg.eval.degrade_val:
        return degraded_copy(clean, cfg.augment, seed=cfg.eval.val_seed)
    return clean


def evaluate_model(model, samples: Sequence[TrainSample], cfg: ExperimentConfig) -> Dict[str, PRCurve]:
    dets = predict(model, [s.input_image for s in samples], cfg.eval.score_thresh, cfg.eval.nms_thresh)
    return evaluate_subsets(dets, [s.gt_boxes for s in samples], cfg.eval.bands, cfg.eval.iou_thresh)


def run_trial(
    train: Sequence[TrainSample],
    val: Sequence[TrainSample],
    cfg: ExperimentConfig,
    phi: Optional[float] = None,
    seed: Optional[int] = None,
    sr_enabled: Optional[bool] = None,
    out_dir=None,
) -> TrialResult:
    phi = cfg.train.phi if phi is None else phi
    seed = cfg.train.seed if seed is None else seed
    sr_enabled = cfg.sr_enabled if sr_enabled is None else sr_enabled
    tcfg = dataclasses.replace(cfg.train, phi=phi, seed=seed)
    model = build_model(cfg.pyramid, cfg.sr if sr_enabled else None, seed)
    result = fit(train, tcfg, model, cfg.augment, out_dir=out_dir)
    curves = evaluate_model(result.model, val, cfg)
    final = result.records[-1].loss.l_ef if result.records else None
    return TrialResult(phi, seed, sr_enabled, {k: c.ap for k, c in curves.items()}, final)


def sweep_phi(
    cfg: ExperimentConfig,
    values: Sequence[float],
    seeds: Sequence[int] = (0,),
    train: Optional[Sequence[TrainSample]] = None,
    val: Optional[Sequence[TrainSample]] = None,
) -> List[TrialResult]:
    """One trial per ``(phi, seed)``; a failing trial is recorded, not raised."""
    if len(values) < 2:
        raise ValueError("a sweep needs at least two phi values")
    train = synth_dataset(cfg.synth) if train is None else train
    val = validation_set(cfg) if val is None else val
    rows = []
    for phi in sorted(values):
        for seed in seeds:
            try:
                row = run_trial(train, val, cfg, phi=phi, seed=seed)
            except Exception as exc:  # isolate one failed trial from the rest of the sweep
                log.exception("trial phi=%s seed=%s failed", phi, seed)
                row = TrialResult(phi, seed, cfg.sr_enabled, status="failed", error=f"{type(exc).__name__}: {exc}")
            log.info("phi=%s seed=%s %s", phi, seed, row.ap)
            rows.append(row)
    return rows


def write_sweep(rows: Sequence[TrialResult], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0].as_dict()) if rows else []
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r.as_dict())
    with open(out_dir / "sweep.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r.as_dict()) + "\n")
    plot_sweep(rows, out_dir / "sweep.png")


def plot_sweep(rows: Sequence[TrialResult], path) -> None:
    """Mean AP per subset against phi; the phi=0 mean is drawn dotted."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r.status == "ok"]
    phis = sorted({r.phi for r in ok})
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in SUBSETS:
        means = [sum(r.ap[name] for r in ok if r.phi == p) / max(1, sum(r.phi == p for r in ok)) for p in phis]
        line, = ax.plot(phis, means, marker="o", label=name)
        if 0.0 in phis:
            ax.axhline(means[phis.index(0.0)], linestyle=":", color=line.get_color())
    ax.set_xlabel("phi")
    ax.set_ylabel("AP")
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
