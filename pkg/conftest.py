# File: conftest.py
import os

import pytest

from src.checks import TINY_GEOMETRY, tiny_model


def pytest_collection_modifyitems(config, items):
    if os.environ.get("VACE_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set VACE_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def geometry():
    return TINY_GEOMETRY


@pytest.fixture
def adapter_cfg():
    return tiny_model("adapter")


@pytest.fixture
def fullft_cfg():
    return tiny_model("fullft")
