import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gatedcil.autodiff import set_precision  # noqa: E402
from gatedcil.config import preset  # noqa: E402


@pytest.fixture(autouse=True)
def float64_default():
    set_precision("float64")
    yield
    set_precision("float64")


def toy_config(**overrides):
    """A few-second configuration: 6 classes, 8x8 images, D=8, 3 tasks."""
    base = {
        "model": {"image_size": 8, "patch_size": 4, "embed_dim": 8, "depth": 1, "heads": 2, "mlp_ratio": 2.0},
        "train": {"epochs": 2, "batch_size": 8, "holdout_fraction": 0.0},
        "data": {"num_classes": 6, "per_class": 12, "test_per_class": 6},
        "split": {"num_tasks": 3},
        "distill": {"epochs": 3, "batch_size": 8},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            base.setdefault(key, {}).update(value)
        else:
            base[key] = value
    return preset("tiny10", **base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail), filled in by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
