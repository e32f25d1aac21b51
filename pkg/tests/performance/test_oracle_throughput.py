import pytest
import torch
from flowscope.data import gen_gaussian
from flowscope.model import VelocityMLP
from flowscope.oracle import oracle_velocity, top1_weight


@pytest.fixture(scope="module")
def data():
    """Unit-Gaussian training set of moderate size."""
    return gen_gaussian(1400, 256, seed=0)


@pytest.fixture(scope="module")
def model():
    """Untrained velocity model of the default width."""
    return VelocityMLP(dim=256).eval()


def test_single_query(benchmark, data):
    """Oracle velocity of one query."""
    xt = torch.randn(256, dtype=torch.float64)

    velocity = benchmark(oracle_velocity, xt, 0.3, data)
    assert velocity.shape == (256,)
    assert torch.isfinite(velocity).all()

    mean = benchmark.stats.stats.mean
    stddev = benchmark.stats.stats.stddev
    maximum = benchmark.stats.stats.max

    assert mean < 0.05, f"Mean time is {mean}, which is too high"
    assert stddev < 0.05, f"Standard deviation is {stddev}, which is too high"
    assert maximum < 0.2, f"Max time is {maximum}, which is too high"


@pytest.mark.parametrize("batch_size", [16, 64, 256, 1024])
def test_batch_top1(benchmark, data, batch_size):
    """Top-1 posterior weight of a batch of queries."""
    xt = torch.randn(batch_size, 256, dtype=torch.float64)

    top = benchmark(top1_weight, xt, 0.5, data)
    assert top.shape == (batch_size,)
    assert ((top > 0) & (top <= 1 + 1e-12)).all()

    mean = benchmark.stats.stats.mean
    scale_factor = max(int(batch_size / 64), 1)  # for larger batch sizes, we allow more time

    assert mean < 0.1 * scale_factor, f"Mean time is {mean}, which is too high"


@pytest.mark.parametrize("batch_size", [1, 64, 512])
def test_model_inference(benchmark, model, batch_size):
    """Forward pass of the velocity model."""
    xt = torch.randn(batch_size, 256)

    with torch.no_grad():
        velocity = benchmark(model, xt, 0.5)
    assert velocity.shape == (batch_size, 256)

    mean = benchmark.stats.stats.mean
    assert mean < 0.05 * max(int(batch_size / 64), 1), f"Mean time is {mean}, which is too high"
