from __future__ import annotations

from typing import Iterator, List

import numpy as np
import pytest

from placedrop.config import PLACEDROP_DEFAULT_DTYPE
from placedrop.domains import Dataset, generate_dataset


@pytest.fixture
def float64() -> Iterator[np.dtype]:
    """Create new tensors in double precision for the duration of a test"""
    with PLACEDROP_DEFAULT_DTYPE.scoped(np.float64) as dtype:
        yield dtype


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_datasets() -> List[Dataset]:
    """Four 16x16 domains with three images per class"""
    return generate_dataset(seed=0, per_class=3, size=16)
