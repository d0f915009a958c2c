import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from odmixer.ingestion import build_dataset, desk_spec, generate_synthetic


@pytest.fixture(scope="session")
def desk_dataset():
    """The default synthetic scenario, ingested once per test session."""
    spec = desk_spec(seed=0)
    records = generate_synthetic(spec)
    dataset, report = build_dataset(records, spec.schedule)
    assert report.accepted == len(records)
    return dataset


@pytest.fixture(scope="session")
def tiny_dataset():
    """A small, fast dataset: 6 stations, 16 days, 12 intervals per day."""
    spec = desk_spec(n=6, days=16, intervals_per_day=12, seed=3)
    records = generate_synthetic(spec)
    dataset, _ = build_dataset(records, spec.schedule)
    return dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
