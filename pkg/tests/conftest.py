import numpy as np
import pytest

from jale.core import default_hls_ladder
from jale.forest import SPEED_FEATURES, ForestParams, ModelScope, TrainingSet, train_forest

NAMES = {0: "ultrafast", 1: "superfast", 2: "veryfast", 3: "faster", 4: "fast", 5: "medium"}


def constant_model(value, scope=None):
    """Single-leaf forest predicting ``value`` everywhere."""
    data = TrainingSet(np.zeros((2, len(SPEED_FEATURES))), np.full(2, float(value)), SPEED_FEATURES)
    return train_forest(data, ForestParams(n_estimators=1, bootstrap=False), scope=scope)


def constant_models(cfg, speed_of, vmaf_of=lambda p: 80.0):
    """Speed models keyed (threads, preset) and quality models keyed preset."""
    speed = {
        (n, p): constant_model(speed_of(n, p), ModelScope("speed", p, n)) for n in cfg.threads for p in cfg.presets
    }
    quality = {p: constant_model(vmaf_of(p), ModelScope("quality", p)) for p in cfg.presets}
    return speed, quality


@pytest.fixture
def hls():
    return default_hls_ladder()


# acceptance verdicts, filled by tests/test_acceptance.py and echoed after the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abc")), k)):
        terminalreporter.write_line(ACCEPTANCE[key])
