import numpy as np
import pytest

from dpnet.config import Config
from dpnet.datasynth import load_dataset, synth_dataset

TINY_MODEL = {
    "model.shared_channels": 4,
    "model.enh_channels": 4,
    "model.det_stem_channels": 4,
    "model.det_stage_channels": (4, 4, 4),
    "model.fpn_channels": 4,
    "model.head_channels": 4,
    "model.head_convs": 1,
    "model.num_classes": 1,
    "model.anchor_sizes": (4.0, 8.0, 16.0),
}

SMALL_RUN = {
    "data.image_size": 64,
    "data.train_count": 6,
    "data.val_count": 2,
    "data.test_count": 2,
    "model.det_stage_channels": (8, 8, 8),
    "model.fpn_channels": 8,
    "model.head_channels": 8,
    "trainer.epochs": 2,
}


@pytest.fixture
def tiny_cfg():
    return Config().replace(**TINY_MODEL)


@pytest.fixture(scope="session")
def small_cfg():
    return Config().replace(**SMALL_RUN)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory, small_cfg):
    root = tmp_path_factory.mktemp("small_data")
    synth_dataset(small_cfg.data, root)
    return root


@pytest.fixture(scope="session")
def small_dataset(small_data):
    return load_dataset(small_data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one pass/fail line per acceptance criterion; the lines are echoed in the terminal summary."""

    def record(tag: str, title: str, passed: bool, detail: str, table: tuple[str, ...] = ()) -> bool:
        lines = [f"{tag} {'PASS' if passed else 'FAIL'}  {title}: {detail}", *(f"    {row}" for row in table)]
        ACCEPTANCE_LINES.extend(lines)
        print("\n".join(lines), flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
