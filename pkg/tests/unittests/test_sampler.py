import csv

import pytest
import torch
from flowscope.data import Dataset, class_subset, gen_gaussian, gen_ring, nearest_neighbor_batch
from flowscope.errors import DivergenceError, InvalidInputError
from flowscope.model import VelocityMLP
from flowscope.oracle import oracle_velocity
from flowscope.sampler import (
    GuidanceConfig,
    GuidedField,
    MixedConfig,
    ModelField,
    OracleField,
    ResumeConfig,
    euler_sample,
    guided_velocity,
    intermediate_prediction,
    intermediate_predictions,
    mixed_sample,
    predictions_to_csv,
    resume_sample,
    stagewise_sample,
    trajectory_to_csv,
)
from flowscope.schedule import shifted_grid, uniform_grid

from unittests.test_model import randomize_output_layer


class ConstantField:
    """Velocity field that ignores its inputs."""

    tag = "constant"

    def __init__(self, value):
        self.value = torch.as_tensor(value, dtype=torch.float64)
        self.dim = self.value.numel()

    def __call__(self, xt, t, class_id=None):  # noqa: D105
        return self.value.expand_as(torch.as_tensor(xt)).clone()


class TwoLevelModel:
    """Returns 2 for a conditional query and 1 for the null class."""

    def __call__(self, xt, t, class_id=None):  # noqa: D105
        return torch.full_like(xt, 1.0 if class_id is None else 2.0)


class BlowUpField:
    """Finite before t=0.5, infinite from then on."""

    tag = "blow-up"
    dim = 2

    def __call__(self, xt, t, class_id=None):  # noqa: D105
        return torch.full_like(xt, float("inf") if t >= 0.5 else 1.0)


@pytest.fixture(scope="module")
def ring():
    """Labeled toy dataset."""
    return gen_ring(4, radius=2.0, spread=0.1, n_per_class=10, seed=0)


@pytest.fixture(scope="module")
def model_field():
    """Untrained conditional model with a random output layer."""
    torch.manual_seed(0)
    model = VelocityMLP(dim=2, hidden=16, time_dim=8, class_dim=4, num_classes=4)
    return ModelField(randomize_output_layer(model, seed=4))


class TestEuler:
    """Test plain Euler integration."""

    def test_constant_field(self):
        """A constant field moves x0 by exactly that constant."""
        field = ConstantField([1.0, -2.0, 0.5])
        x0 = torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64)
        trajectory = euler_sample(field, uniform_grid(8), x0)
        assert torch.allclose(trajectory.terminal, x0 + field.value, atol=1e-12)
        assert len(trajectory) == 9
        assert trajectory.field_tags == ("constant",) * 8
        assert trajectory.times[-1].item() == 1.0

    def test_single_point_oracle_reaches_data(self):
        """The oracle of a one-point dataset transports any prior draw onto that point."""
        data = gen_gaussian(1, 4, seed=1)
        x0 = torch.randn(4, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        trajectory = euler_sample(OracleField(data), uniform_grid(500), x0)
        target = data.points[0]
        assert (trajectory.terminal - target).norm().item() <= 1e-2 * target.norm().item()

    def test_batched_prior(self, ring):
        """A batch of priors integrates like its rows one at a time."""
        field = OracleField(ring)
        x0 = torch.randn(3, 2, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
        batched = euler_sample(field, shifted_grid(20, 0.5), x0, class_id=1)
        assert batched.batched
        assert batched.states.shape == (21, 3, 2)
        for b, single in enumerate(batched.split()):
            expected = euler_sample(field, shifted_grid(20, 0.5), x0[b], class_id=1)
            assert torch.allclose(single.states, expected.states, atol=1e-10)

    def test_divergence(self):
        """A non-finite state reports the failing step and its time."""
        with pytest.raises(DivergenceError) as excinfo:
            euler_sample(BlowUpField(), uniform_grid(4), torch.zeros(2))
        assert excinfo.value.step == 3
        assert excinfo.value.t == 0.5

    def test_prior_checks(self):
        """Priors must be finite and match the field dimension."""
        field = ConstantField([1.0, 1.0])
        with pytest.raises(InvalidInputError, match="dimension"):
            euler_sample(field, uniform_grid(4), torch.zeros(3))
        with pytest.raises(InvalidInputError, match="finite"):
            euler_sample(field, uniform_grid(4), torch.tensor([0.0, float("nan")]))


class TestFields:
    """Test the oracle and model velocity fields."""

    def test_oracle_field_classes(self, ring):
        """Class ids restrict the oracle to that class; None uses every point."""
        field = OracleField(ring)
        xt = torch.tensor([0.3, -0.2], dtype=torch.float64)
        assert torch.allclose(field(xt, 0.4, 2), oracle_velocity(xt, 0.4, class_subset(ring, 2)))
        assert torch.allclose(field(xt, 0.4), oracle_velocity(xt, 0.4, ring))
        assert torch.allclose(field(xt, 0.4, -1), oracle_velocity(xt, 0.4, ring))

    def test_oracle_field_unconditional(self, ring):
        """An unconditional oracle ignores the class id."""
        field = OracleField(ring, class_conditional=False)
        xt = torch.tensor([0.3, -0.2], dtype=torch.float64)
        assert torch.equal(field(xt, 0.4, 2), field(xt, 0.4))

    def test_model_field(self, model_field):
        """Model predictions come back in float64 without a graph."""
        out = model_field(torch.zeros(2, 2), 0.5, 1)
        assert out.dtype == torch.float64
        assert not out.requires_grad


class TestGuidance:
    """Test classifier-free guidance."""

    def test_formula(self):
        """Inside the interval the blend is v_u + w * (v_c - v_u)."""
        guidance = GuidanceConfig(scale=1.5, interval=(0.2, 0.8))
        out = guided_velocity(TwoLevelModel(), torch.zeros(3), 0.5, 0, guidance)
        assert torch.equal(out, torch.full((3,), 2.5))

    @pytest.mark.parametrize("t", [0.0, 0.1, 0.9, 1.0])
    def test_outside_interval(self, t):
        """Outside the interval the conditional prediction is returned unchanged."""
        guidance = GuidanceConfig(scale=3.0, interval=(0.2, 0.8))
        assert torch.equal(guided_velocity(TwoLevelModel(), torch.zeros(2), t, 0, guidance), torch.full((2,), 2.0))

    def test_interval_is_closed(self):
        """Both interval ends are inside."""
        guidance = GuidanceConfig(scale=3.0, interval=(0.2, 0.8))
        assert guidance.active(0.2) and guidance.active(0.8)

    def test_per_row_times(self):
        """Tensor times switch guidance row by row."""
        guidance = GuidanceConfig(scale=1.5, interval=(0.2, 0.8))
        out = guided_velocity(TwoLevelModel(), torch.zeros(3, 2), torch.tensor([0.1, 0.5, 0.9]), 0, guidance)
        assert out[:, 0].tolist() == [2.0, 2.5, 2.0]

    def test_neutral_guidance(self, model_field):
        """Scale 1 or a disabled config reproduces the conditional field bitwise."""
        xt = torch.randn(4, 2, generator=torch.Generator().manual_seed(0))
        expected = model_field(xt, 0.5, 1)
        for guidance in (GuidanceConfig(scale=1.0), GuidanceConfig(scale=4.0, enabled=False)):
            assert torch.equal(GuidedField(model_field.model, guidance)(xt, 0.5, 1), expected)

    def test_needs_class(self):
        """Enabled guidance needs a class to guide towards."""
        with pytest.raises(InvalidInputError, match="class"):
            guided_velocity(TwoLevelModel(), torch.zeros(2), 0.5, None, GuidanceConfig(scale=2.0))

    def test_needs_conditional_model(self):
        """Unconditional models cannot be guided."""
        model = VelocityMLP(dim=2, hidden=8, time_dim=4, class_dim=2)
        with pytest.raises(InvalidInputError, match="class-conditional"):
            GuidedField(model, GuidanceConfig(scale=2.0))

    @pytest.mark.parametrize(("scale", "interval"), [(-1.0, (0.0, 1.0)), (1.0, (0.6, 0.4)), (1.0, (0.0, 1.2))])
    def test_invalid_config(self, scale, interval):
        """Negative scales and malformed intervals are rejected."""
        with pytest.raises(InvalidInputError):
            GuidanceConfig(scale=scale, interval=interval)


class TestMixedAndResume:
    """Test oracle/model switching, resumed sampling and stage-wise sampling."""

    def test_switch_at_zero_is_model(self, ring, model_field):
        """t_switch=0 never uses the oracle."""
        grid = uniform_grid(10)
        x0 = torch.randn(2, dtype=torch.float64)
        mixed = mixed_sample(OracleField(ring), model_field, MixedConfig(0.0, grid, class_id=1), x0)
        plain = euler_sample(model_field, grid, x0, class_id=1)
        assert set(mixed.field_tags) == {"model"}
        assert torch.equal(mixed.states, plain.states)

    def test_switch_at_one_is_oracle(self, ring, model_field):
        """t_switch=1 uses the oracle for every step."""
        grid = uniform_grid(10)
        x0 = torch.randn(2, dtype=torch.float64)
        oracle = OracleField(ring)
        mixed = mixed_sample(oracle, model_field, MixedConfig(1.0, grid, class_id=1), x0)
        assert set(mixed.field_tags) == {"oracle"}
        assert torch.equal(mixed.states, euler_sample(oracle, grid, x0, class_id=1).states)

    def test_switch_inside(self, ring, model_field):
        """Steps whose left endpoint is below t_switch use the oracle."""
        mixed = mixed_sample(OracleField(ring), model_field, MixedConfig(0.3, uniform_grid(10)), torch.zeros(2))
        assert mixed.field_tags == ("oracle",) * 3 + ("model",) * 7

    def test_resume_at_one(self, ring):
        """Resuming at t=1 returns the reference unchanged."""
        reference = torch.tensor([1.0, -1.0], dtype=torch.float64)
        trajectory = resume_sample(OracleField(ring), ResumeConfig(1.0, reference), uniform_grid(10))
        assert len(trajectory) == 1
        assert torch.equal(trajectory.terminal, reference)

    def test_resume_at_zero(self, ring):
        """Resuming at t=0 is plain sampling from the same prior draw."""
        field = OracleField(ring)
        grid = uniform_grid(10)
        trajectory = resume_sample(field, ResumeConfig(0.0, torch.ones(2), seed=9), grid)
        x0 = torch.randn(2, generator=torch.Generator().manual_seed(9), dtype=torch.float64)
        assert torch.equal(trajectory.states, euler_sample(field, grid, x0).states)

    def test_resume_times(self, ring):
        """The resumed path starts at t_resume and continues on the grid."""
        trajectory = resume_sample(OracleField(ring), ResumeConfig(0.35, torch.ones(2)), uniform_grid(10))
        assert trajectory.times.tolist() == [0.35, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]

    def test_stagewise(self, ring, model_field):
        """Stage 1 runs below the split, stage 2 above it."""
        trajectory = stagewise_sample(OracleField(ring), model_field, 0.4, 3, 5, torch.zeros(2))
        assert trajectory.field_tags == ("oracle",) * 3 + ("model",) * 5
        assert len(trajectory) == 9

    @pytest.mark.slow
    def test_resume_keeps_structure(self, toy_data, toy_model):
        """Resuming from a partly noised reference stays closer to it than sampling from scratch."""
        field = ModelField(toy_model)
        reference = gen_ring(8, radius=2.0, spread=0.1, n_per_class=1, seed=123).points[2]
        grid = uniform_grid(50)
        distances = {}
        for t_resume in (0.0, 0.3):
            terminals = torch.stack(
                [resume_sample(field, ResumeConfig(t_resume, reference, seed=s), grid).terminal for s in range(40)]
            )
            distances[t_resume] = (terminals - reference).norm(dim=1).mean().item()
        assert distances[0.3] < distances[0.0]


class TestPredictions:
    """Test one-jump predictions of the final state."""

    def test_identity(self):
        """x_t + (1 - t) v."""
        out = intermediate_prediction(torch.tensor([1.0, 2.0]), 0.75, torch.tensor([4.0, -4.0]))
        assert out.tolist() == [2.0, 1.0]

    def test_at_one(self):
        """At t=1 the prediction is the state itself."""
        xt = torch.tensor([0.5, 0.25], dtype=torch.float64)
        assert torch.equal(intermediate_prediction(xt, 1.0, torch.ones(2)), xt)

    def test_single_point_oracle(self):
        """With one data point every intermediate prediction is that point."""
        data = gen_gaussian(1, 3, seed=0)
        field = OracleField(data)
        trajectory = euler_sample(field, uniform_grid(10), torch.zeros(3))
        predictions = intermediate_predictions(field, trajectory)
        assert predictions.shape == (10, 3)
        assert torch.allclose(predictions, data.points[0].expand(10, 3), atol=1e-9)

    def test_constant_field(self):
        """Along a straight path every prediction equals the terminal state."""
        field = ConstantField([1.0, 2.0])
        trajectory = euler_sample(field, uniform_grid(5), torch.zeros(2))
        predictions = intermediate_predictions(field, trajectory)
        assert torch.allclose(predictions, trajectory.terminal.expand(5, 2))

    def test_non_finite(self):
        """Non-finite inputs are rejected."""
        with pytest.raises(InvalidInputError):
            intermediate_prediction(torch.zeros(2), 0.5, torch.tensor([1.0, float("nan")]))


class TestCsv:
    """Test trajectory and prediction output."""

    def test_trajectory_csv(self, ring, tmp_path):
        """One row per state, tagged with the field that produced it."""
        field = OracleField(ring)
        trajectory = euler_sample(field, uniform_grid(4), torch.zeros(2, 2))
        path = tmp_path / "trajectory.csv"
        trajectory_to_csv([trajectory], path)
        with open(path) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["trajectory", "step", "t", "field_tag", "dim_0", "dim_1"]
        assert len(rows) == 1 + 2 * 5
        assert rows[1][:4] == ["0", "0", "0", "start"]
        assert rows[2][3] == "oracle"
        assert rows[-1][:3] == ["1", "4", "1"]

    def test_terminal_only(self, tmp_path):
        """Terminal-only output keeps the final state of each trajectory."""
        field = ConstantField([1.0])
        trajectories = [euler_sample(field, uniform_grid(4), torch.zeros(1)) for _ in range(3)]
        path = tmp_path / "terminal.csv"
        trajectory_to_csv(trajectories, path, terminal_only=True)
        rows = path.read_text().splitlines()
        assert rows[1:] == [f"{i},4,1,constant,1" for i in range(3)]

    def test_predictions_csv(self, tmp_path):
        """One prediction row per non-terminal state."""
        field = ConstantField([1.0, 2.0])
        trajectory = euler_sample(field, uniform_grid(4), torch.zeros(2))
        path = tmp_path / "predictions.csv"
        predictions_to_csv(trajectory, intermediate_predictions(field, trajectory), path)
        rows = path.read_text().splitlines()
        assert rows[0] == "trajectory,step,t,dim_0,dim_1"
        assert rows[1:] == [f"0,{k},{k / 4:g},1,2" for k in range(4)]

    def test_empty(self, tmp_path):
        """Nothing to write is an error."""
        with pytest.raises(InvalidInputError):
            trajectory_to_csv([], tmp_path / "empty.csv")


def test_nearest_neighbor_of_oracle_samples(ring):
    """Oracle samples at many steps land on training points."""
    x0 = torch.randn(5, 2, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    trajectory = euler_sample(OracleField(ring), uniform_grid(200), x0)
    _, distances = nearest_neighbor_batch(ring, trajectory.terminal)
    assert distances.max().item() < 0.05 * ring.rms_norm


def test_oracle_terminal_is_stable_under_grid_refinement():
    """Ten times more Euler steps barely move the oracle terminals."""
    data = Dataset(torch.tensor([[3.0, 0.0], [-3.0, 0.0], [0.0, 3.0], [0.0, -3.0]], dtype=torch.float64))
    x0 = torch.tensor([[1.0, 0.2], [-0.8, -0.1], [0.1, 1.2], [-0.2, -0.9]], dtype=torch.float64)
    coarse = euler_sample(OracleField(data), uniform_grid(100), x0).terminal
    fine = euler_sample(OracleField(data), uniform_grid(1000), x0).terminal
    relative = (coarse - fine).norm(dim=1) / fine.norm(dim=1)
    assert relative.max().item() < 0.02


@pytest.mark.slow
def test_oracle_retrieves_training_points_in_moderate_dimension():
    """With enough steps every oracle sample lands next to a training point."""
    data = gen_gaussian(1400, 64, seed=0)
    x0 = torch.randn(50, 64, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    trajectory = euler_sample(OracleField(data), uniform_grid(500), x0)
    _, distances = nearest_neighbor_batch(data, trajectory.terminal)
    assert distances.max().item() <= 0.05 * data.rms_norm
