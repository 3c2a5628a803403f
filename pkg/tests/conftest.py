import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from s2neck.data import DatasetManifest, generate_dataset, load_dataset  # noqa: E402


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """24 train / 8 val images at 128x128 with the default scale mix."""
    path = tmp_path_factory.mktemp("tiny")
    generate_dataset(DatasetManifest(n_train=24, n_val=8, seed=11), path)
    return path


@pytest.fixture(scope="session")
def tiny_train(tiny_data_dir):
    return load_dataset(tiny_data_dir, "train")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
