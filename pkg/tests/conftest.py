import logging
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from facecloak.backends.toy import random_toy_backend
from facecloak.core import ImagePlane
from facecloak.optimizer import OptimizerConfig


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("facecloak").setLevel(logging.WARNING)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=16, w=16) -> ImagePlane:
    return ImagePlane(rng.random((h, w, 3)))


@pytest.fixture(scope="session")
def small_backend():
    """Untrained 16x16 toy backend (float32)."""
    return random_toy_backend((16, 16), seed=3)


@pytest.fixture(scope="session")
def small_backend64():
    return random_toy_backend((16, 16), seed=3).as_float64()


@pytest.fixture(scope="session")
def rig():
    """Seeded desk rig: 40 x 10 procedural corpus at 64 px, toy backend trained to the accuracy gate."""
    from facecloak.rig import DeskRig, RigConfig

    torch.set_num_threads(1)
    return DeskRig.build(RigConfig())


@pytest.fixture(scope="session")
def default_cloaks(rig):
    cfg = OptimizerConfig()
    return cfg, rig.generate_cloaks(cfg)


@pytest.fixture(scope="session")
def default_report(rig, default_cloaks):
    cfg, cloaks = default_cloaks
    return rig.evaluate(cloaks, cfg)


@pytest.fixture(scope="session")
def zero_report(rig):
    return rig.evaluate(rig.zero_cloaks())


# -- acceptance reporting ---------------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
