import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from helpers import make_model

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def pytest_collection_modifyitems(items):
    # the finite-difference oracle is the ground truth everything else leans on,
    # so its own tests run before anything that trusts it
    items.sort(key=lambda item: 0 if item.module.__name__.endswith("test_oracle") else 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def dense_net():
    return make_model(["dense 3 5 relu", "dense 5 4 relu", "dense 4 3"], (3,), seed=7)


@pytest.fixture
def conv_net():
    return make_model(
        ["conv 2 3 k3 s1 p1 relu", "avgpool 2", "conv 3 4 k3 s2 p1 relu", "flatten", "dense 4 3"],
        (2, 4, 4),
        seed=3,
    )


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
