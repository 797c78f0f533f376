import numpy as np
import pytest

from forec.dataset import make_dataset
from forec.netmodel import NetworkConfig, build


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset(train_count=32, val_count=8, height=32, width=32, num_object_classes=3, seed=5)


@pytest.fixture
def nets():
    return build(NetworkConfig(num_classes=4, base_width=4, latent_width=5), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        verdict, title, detail = RESULTS[number]
        terminalreporter.write_line(f"[{verdict}] {number:2d}. {title}" + (f" :: {detail}" if detail else ""))
