import os

import numpy as np
import pytest

from semfuse.labels import LabelSet

SCENES_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "src",
                          "semfuse", "scenes")


def scene_path(name: str) -> str:
    return os.path.abspath(os.path.join(SCENES_DIR, name + ".json"))


@pytest.fixture(scope="session")
def labelset() -> LabelSet:
    return LabelSet.default()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)
