import pytest
from flowscope.data import gen_ring
from flowscope.model import VelocityMLP
from flowscope.train import TrainConfig, train


@pytest.fixture(scope="session")
def toy_data():
    """Eight well-separated clusters on a circle of radius 2."""
    return gen_ring(8, radius=2.0, spread=0.1, n_per_class=100, seed=0)


@pytest.fixture(scope="session")
def toy_model(toy_data):
    """Class-conditional MLP trained with the CFM objective on the toy ring."""
    model = VelocityMLP(dim=2, hidden=128, time_dim=64, class_dim=32, num_classes=toy_data.num_classes)
    config = TrainConfig(steps=3000, batch_size=256, learning_rate=1e-3, seed=0, log_every=1000)
    model, _ = train(model, toy_data, config)
    return model
