import numpy as np
import pytest

from domainbank.model import DomainBankModel, ImageBatch, micro_arch
from domainbank.autodiff import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro():
    """Two-domain 8x8 single-channel model, float32."""
    return DomainBankModel(micro_arch(), 2, seed=0)


@pytest.fixture
def micro64():
    return DomainBankModel(micro_arch(), 2, seed=0).astype(np.float64)


def image_batch(domain, n=2, size=8, channels=1, seed=0, dtype=np.float32):
    r = np.random.default_rng([seed, domain])
    return ImageBatch(Tensor(r.uniform(-1, 1, (n, channels, size, size)).astype(dtype)), domain)


@pytest.fixture
def batches():
    return [image_batch(0), image_batch(1)]


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
