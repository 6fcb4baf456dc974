import numpy as np
import pytest
import torch

from srface.detector import PyramidConfig, build_model
from srface.sr_branch import SRBranchConfig

torch.set_num_threads(1)

TINY_PYRAMID = PyramidConfig(
    levels=3, base_channels=8, input_size=64, fpn_channels=8,
    max_channels=32, growth=2.0, deep_blocks=1,
)
TINY_SR = SRBranchConfig(channels=8, reduction=4)


@pytest.fixture
def tiny_model():
    return build_model(TINY_PYRAMID, TINY_SR, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_boxes(rng, n, size=64.0, min_side=2.0, max_side=30.0):
    xy = rng.uniform(0, size - max_side, size=(n, 2))
    wh = rng.uniform(min_side, max_side, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call":
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL", props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, status, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {num}: {status}  {detail}")
