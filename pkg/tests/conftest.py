import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hcdlab import tensor as T  # noqa: E402

T.set_debug(True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_desk(tmp_path_factory):
    """Small blobs dataset + teacher for quick training tests."""
    from hcdlab.harness.desk import prepare

    work = tmp_path_factory.mktemp("tiny")
    cfg = prepare(work, kind="blobs", n_train=96, n_test=40, k=4, image=(1, 16, 16), d=12)
    return cfg


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.REPORT):
        terminalreporter.write_line(mod.REPORT[number])
