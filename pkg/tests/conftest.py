import pytest

from benchmark import train_benchmark_probe


@pytest.fixture(scope="session")
def benchmark_probe():
    """The study probe: trained once on the reference task, frozen thereafter."""
    return train_benchmark_probe()
