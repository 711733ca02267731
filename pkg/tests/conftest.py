import numpy as np
import pytest

from ppshare.features import FeatureDataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dataset(rng, N=6, H=2, W=2, D=3, K=2):
    labels = np.arange(N) % K
    patches = rng.normal(size=(N, H * W, D)).astype(np.float32)
    return FeatureDataset(patches, labels, K, H, W)


ACCEPTANCE = {}


def record_acceptance(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
