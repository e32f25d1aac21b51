import pytest
import torch
from flowscope.errors import FormatError, InvalidInputError
from flowscope.model import (
    VelocityBatch,
    VelocityField,
    VelocityMLP,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    time_features,
)


def randomize_output_layer(model, seed=0):
    """Give the zero-initialised output layer random weights."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        layer = model.net[-1]
        layer.weight.copy_(0.1 * torch.randn(layer.weight.shape, generator=generator))
        layer.bias.copy_(0.1 * torch.randn(layer.bias.shape, generator=generator))
    return model


@pytest.fixture
def model():
    """Small conditional model with a non-trivial output layer."""
    return randomize_output_layer(VelocityMLP(dim=3, hidden=16, time_dim=8, class_dim=4, num_classes=2))


class TestVelocityMLP:
    """Test the velocity model."""

    def test_initial_field_is_zero(self):
        """The zero-initialised output layer makes the initial field vanish."""
        model = VelocityMLP(dim=4, hidden=8, time_dim=8, class_dim=4)
        out = model(torch.randn(5, 4), 0.3)
        assert torch.equal(out, torch.zeros(5, 4))

    @pytest.mark.parametrize("batch_size", [1, 7])
    def test_output_shape(self, model, batch_size):
        """Output has the shape of the input."""
        xt = torch.randn(batch_size, 3)
        assert model(xt, torch.rand(batch_size), 1).shape == (batch_size, 3)
        assert model(xt[0], 0.5).shape == (3,)

    def test_null_class(self, model):
        """None and -1 both select the null class row."""
        xt = torch.randn(4, 3)
        assert model.null_class == 2
        assert torch.equal(model(xt, 0.4, None), model(xt, 0.4, -1))
        assert torch.equal(model(xt, 0.4, None), model(xt, 0.4, torch.tensor([-1, -1, -1, -1])))
        assert not torch.equal(model(xt, 0.4, None), model(xt, 0.4, 0))

    def test_per_row_classes(self, model):
        """A class tensor conditions each row separately."""
        xt = torch.randn(2, 3)
        mixed = model(xt, 0.4, torch.tensor([0, 1]))
        assert torch.allclose(mixed[0], model(xt[0], 0.4, 0))
        assert torch.allclose(mixed[1], model(xt[1], 0.4, 1))

    def test_unknown_class(self, model):
        """Class ids beyond the model's classes are rejected."""
        with pytest.raises(InvalidInputError, match="Unknown class"):
            model(torch.randn(2, 3), 0.5, 2)

    def test_wrong_dimension(self, model):
        """Inputs must have the model dimension."""
        with pytest.raises(InvalidInputError):
            model(torch.randn(2, 4), 0.5)

    @pytest.mark.parametrize("time_dim", [0, 7])
    def test_invalid_time_dim(self, time_dim):
        """Time features need a positive even size."""
        with pytest.raises(InvalidInputError):
            VelocityMLP(dim=2, time_dim=time_dim)

    def test_time_features(self):
        """Sinusoidal features lie in [-1, 1] and start as (0..., 1...) at t=0."""
        features = time_features(torch.tensor([0.0, 0.5]), 6)
        assert features.shape == (2, 6)
        assert torch.equal(features[0], torch.tensor([0.0, 0.0, 0.0, 1.0, 1.0, 1.0]))
        assert features.abs().max() <= 1.0

    def test_is_velocity_field(self, model):
        """The model satisfies the velocity field protocol."""
        model.tag = "model"
        assert isinstance(model, VelocityField)


class TestLossAndGrad:
    """Test the loss/gradient helper."""

    def test_zero_model_loss(self):
        """With a zero field the loss is the mean squared target."""
        model = VelocityMLP(dim=2, hidden=8, time_dim=4, class_dim=2).double()
        target = torch.tensor([[1.0, 2.0], [3.0, -1.0]], dtype=torch.float64)
        batch = VelocityBatch(torch.zeros(2, 2), torch.tensor([0.1, 0.9]), torch.tensor([-1, -1]), target)
        loss, grads = loss_and_grad(model, batch)
        assert loss == pytest.approx(15.0 / 4)
        assert set(grads) == {name for name, _ in model.named_parameters()}
        assert grads["net.0.weight"].abs().max().item() == 0.0
        assert grads["net.4.bias"].abs().max().item() > 0.0

    def test_empty_batch(self, model):
        """A loss over zero rows is undefined."""
        empty = torch.zeros(0, 3)
        with pytest.raises(InvalidInputError, match="empty"):
            loss_and_grad(model, VelocityBatch(empty, torch.zeros(0), torch.zeros(0, dtype=torch.long), empty))

    def test_non_finite_target(self, model):
        """Targets must be finite."""
        batch = VelocityBatch(torch.zeros(1, 3), torch.zeros(1), torch.tensor([0]), torch.full((1, 3), float("inf")))
        with pytest.raises(InvalidInputError, match="finite"):
            loss_and_grad(model, batch)

    def test_null_class_receives_gradient(self, model):
        """Rows without a class train the null-class embedding and leave the others alone."""
        generator = torch.Generator().manual_seed(3)
        xt, target = torch.randn(8, 3, generator=generator), torch.randn(8, 3, generator=generator)
        batch = VelocityBatch(xt, torch.rand(8, generator=generator), torch.full((8,), -1), target)
        _, grads = loss_and_grad(model, batch)
        embedding_grad = grads["class_embedding.weight"]
        assert embedding_grad[model.null_class].abs().max().item() > 0.0
        assert embedding_grad[: model.null_class].abs().max().item() == 0.0


class TestCheckpoint:
    """Test the binary checkpoint container."""

    def test_round_trip(self, model, tmp_path):
        """A reloaded model predicts exactly what the saved one did."""
        path = tmp_path / "model.fsmd"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        xt = torch.randn(6, 3)
        assert loaded.num_classes == 2
        assert loaded.hidden == 16
        assert torch.equal(loaded(xt, 0.7, 1), model.eval()(xt, 0.7, 1))

    def test_float64_load(self, model, tmp_path):
        """Checkpoints can be loaded in double precision."""
        path = tmp_path / "model.fsmd"
        save_checkpoint(model, path)
        assert load_checkpoint(path, dtype=torch.float64).dtype == torch.float64

    def test_truncated(self, model, tmp_path):
        """A cut-off parameter block is reported."""
        path = tmp_path / "model.fsmd"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(FormatError, match="Truncated parameter"):
            load_checkpoint(path)

    def test_trailing_bytes(self, model, tmp_path):
        """Extra bytes after the last parameter are rejected."""
        path = tmp_path / "model.fsmd"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        """Files without the checkpoint magic are rejected."""
        path = tmp_path / "model.fsmd"
        path.write_bytes(b"NOPE" + bytes(60))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)
