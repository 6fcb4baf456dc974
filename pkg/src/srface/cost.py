"""Parameter, MAC and throughput accounting.

MAC rules (one multiply-accumulate per weight use, biases excluded):

* ``Conv2d``: ``kh * kw * (C_in / groups) * C_out * H_out * W_out``
* ``Linear``: ``in_features * out_features`` per output row
* activations, pooling, ``PixelShuffle`` and ``Upsample``: 0

Functional ops outside modules (residual additions, interpolation) are not
counted. Any other leaf module raises :class:`UnsupportedLayerError`.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import List

import torch
import torch.nn as nn

from .detector import INFER, TRAIN, SRFaceNet, model_forward, with_input_size

_ZERO_MAC = (
    nn.ReLU, nn.SiLU, nn.Sigmoid, nn.Identity, nn.PixelShuffle,
    nn.AdaptiveAvgPool2d, nn.Upsample, nn.Dropout,
)


class UnsupportedLayerError(TypeError):
    pass


@dataclass
class FPSResult:
    input_size: int
    runs: int
    mean_fps: float
    std_fps: float
    mean_ms: float


@dataclass
class CostReport:
    input_size: int
    params_infer: int
    params_train: int
    macs_infer: int
    macs_train: int
    fps: float
    fps_std: float
    runs: int

    @property
    def branch_macs(self) -> int:
        return self.macs_train - self.macs_infer

    @property
    def branch_params(self) -> int:
        return self.params_train - self.params_infer

    def as_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "params_infer": self.params_infer,
            "params_train": self.params_train,
            "branch_params": self.branch_params,
            "macs_infer": self.macs_infer,
            "macs_train": self.macs_train,
            "branch_macs": self.branch_macs,
            "fps": self.fps,
            "fps_std": self.fps_std,
            "runs": self.runs,
        }


def count_params(model: nn.Module, mode: str = TRAIN) -> int:
    """Learnable scalars; ``mode='infer'`` leaves out the SR branch."""
    if isinstance(model, SRFaceNet) and mode == INFER:
        return sum(p.numel() for _, p in model.detection_parameters())
    return sum(p.numel() for p in model.parameters())


def layer_macs(module: nn.Module, inputs, output) -> int:
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        n, c_out, h, w = output.shape
        return n * kh * kw * (module.in_channels // module.groups) * c_out * h * w
    if isinstance(module, nn.Linear):
        return output.numel() // module.out_features * module.in_features * module.out_features
    if isinstance(module, _ZERO_MAC):
        return 0
    raise UnsupportedLayerError(f"no MAC rule for layer kind {type(module).__name__}")


def count_macs(model: nn.Module, input_size: int, mode: str = INFER, in_channels: int = 3) -> int:
    """MACs of a single-image forward at ``input_size x input_size``."""
    if isinstance(model, SRFaceNet) and model.cfg.input_size != input_size:
        model = with_input_size(model, input_size)
    total = 0

    def hook(mod, inp, out):
        nonlocal total
        total += layer_macs(mod, inp, out)

    leaves = [m for m in model.modules() if not list(m.children())]
    handles = [m.register_forward_hook(hook) for m in leaves]
    x = torch.zeros(1, in_channels, input_size, input_size)
    try:
        with torch.no_grad():
            if isinstance(model, SRFaceNet):
                model_forward(model, x, mode)
            else:
                model(x)
    finally:
        for h in handles:
            h.remove()
    return int(total)


def measure_fps(model: SRFaceNet, input_size: int, runs: int = 1000, warmup: int = 10, seed: int = 0) -> FPSResult:
    """Mean inference-mode throughput over ``runs`` timed single-image forwards.

    Timing assumes exclusive use of the CPU; concurrent workloads skew it.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if model.cfg.input_size != input_size:
        model = with_input_size(model, input_size)
    model.eval()
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, model.cfg.image_channels, input_size, input_size, generator=g)
    times: List[float] = []
    with torch.inference_mode():
        for _ in range(warmup):
            model_forward(model, x, INFER)
        for _ in range(runs):
            t0 = time.perf_counter()
            model_forward(model, x, INFER)
            times.append(time.perf_counter() - t0)
    mean_t = sum(times) / len(times)
    fps = [1.0 / t for t in times]
    std = statistics.pstdev(fps) if len(fps) > 1 else 0.0
    return FPSResult(input_size, runs, 1.0 / mean_t, std, 1000.0 * mean_t)


def cost_report(model: SRFaceNet, input_size: int, runs: int = 1000, warmup: int = 10) -> CostReport:
    fps = measure_fps(model, input_size, runs, warmup)
    return CostReport(
        input_size=input_size,
        params_infer=count_params(model, INFER),
        params_train=count_params(model, TRAIN),
        macs_infer=count_macs(model, input_size, INFER),
        macs_train=count_macs(model, input_size, TRAIN),
        fps=fps.mean_fps,
        fps_std=fps.std_fps,
        runs=runs,
    )
