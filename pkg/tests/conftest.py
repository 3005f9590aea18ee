import sys

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_antisymmetric(rng, shape_prefix, K, scale=2.0):
    """Random additive LLR tensor built from per-class scores."""
    s = rng.normal(scale=scale, size=tuple(shape_prefix) + (K,))
    return s[..., :, None] - s[..., None, :]


def random_labels(rng, M, K):
    """Labels covering every class when M >= K."""
    y = rng.integers(0, K, size=M)
    if M >= K:
        y[:K] = np.arange(K)
    return y


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
