import os

import numpy as np
import pytest
import torch
from hypothesis import settings

from helpers import ACCEPTANCE

torch.set_num_threads(1)
os.environ.pop("ODFATLAS_THREADS", None)

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
