import os
import sys

import numpy as np
import pytest

# Put the project root (config.py) and Product/ on the path, like the app modules do
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
for path in (ROOT, os.path.join(ROOT, "Product")):
    if path not in sys.path:
        sys.path.insert(0, path)

from trainer import build_config  # noqa: E402


def pytest_collection_modifyitems(config, items):
    if os.environ.get("ICF_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="end-to-end run; set ICF_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def small_config(**overrides):
    """A fast config: tiny pool and hidden layers, no periodic checkpoints"""
    fields = {
        "preset": "mazebase-small",
        "steps": 5,
        "n_pool": 8,
        "model": {"hidden": 8},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(fields.get(key), dict):
            fields[key] = {**fields[key], **value}
        else:
            fields[key] = value
    return build_config(None, fields)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
