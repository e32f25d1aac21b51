import pytest
import torch
from flowscope.errors import FormatError, InvalidInputError
from flowscope.schedule import (
    GridKind,
    Schedule,
    TimeGrid,
    fraction_below,
    grid_from_csv,
    grid_to_csv,
    schedule_eval,
    shift_time,
    shifted_grid,
    stagewise_grid,
    uniform_grid,
)
from hypothesis import given, settings
from hypothesis import strategies as st


class TestSchedule:
    """Test the rectified schedule and its oracle coefficients."""

    def test_coefficients_midpoint(self):
        """A_t = 1/(1-t) and B_t = -1/(1-t) for the rectified path."""
        a, b = Schedule().coefficients(0.5)
        assert a == pytest.approx(2.0)
        assert b == pytest.approx(-2.0)

    def test_coefficients_at_zero(self):
        """At t=0 the oracle reduces to mean(x1) - x0."""
        a, b = Schedule().coefficients(0.0)
        assert a == 1.0
        assert b == -1.0

    def test_clamp_near_one(self):
        """Times past 1 - eps are evaluated at 1 - eps and stay finite."""
        schedule = Schedule(eps_clamp=1e-3)
        assert schedule.coefficients(1.0) == schedule.coefficients(schedule.t_max)
        a, b = schedule.coefficients(torch.tensor([0.9995, 1.0], dtype=torch.float64))
        assert torch.isfinite(a).all() and torch.isfinite(b).all()
        assert a[0] == a[1]

    @pytest.mark.parametrize("eps", [0.0, -1e-3, 0.1, 0.5])
    def test_invalid_eps(self, eps):
        """eps_clamp outside (0, 0.1) is rejected."""
        with pytest.raises(InvalidInputError, match="eps_clamp"):
            Schedule(eps_clamp=eps)

    @pytest.mark.parametrize("t", [-0.1, 1.5, float("nan"), float("inf")])
    def test_schedule_eval_rejects_bad_time(self, t):
        """Times must be finite and inside [0, 1]."""
        with pytest.raises(InvalidInputError):
            schedule_eval(Schedule(), t)

    def test_schedule_eval_fields(self):
        """The evaluated quantities are consistent with alpha=t, sigma=1-t."""
        values = schedule_eval(Schedule(), 0.25)
        assert values.alpha == 0.25
        assert values.sigma == 0.75
        assert values.alpha_dot == 1.0
        assert values.sigma_dot == -1.0
        assert values.coeff_a == pytest.approx(1.0 + 0.25 / 0.75)


class TestTimeGrid:
    """Test grid construction and validation."""

    def test_uniform(self):
        """Uniform grid holds left endpoints i/n."""
        grid = uniform_grid(4)
        assert grid.times.tolist() == [0.0, 0.25, 0.5, 0.75]
        assert grid.with_terminal().tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
        assert grid.construction is GridKind.UNIFORM
        assert len(grid) == 4

    def test_shift_identity(self):
        """A shift factor of 1 leaves the uniform grid unchanged."""
        assert torch.equal(shifted_grid(50, 1.0).times, uniform_grid(50).times)

    def test_stagewise(self):
        """Stage-wise grid concatenates two uniform pieces at the split."""
        grid = stagewise_grid(2, 2, 0.5)
        assert grid.times.tolist() == [0.0, 0.25, 0.5, 0.75]
        assert grid.params == {"n1": 2, "n2": 2, "t_split": 0.5}

    @pytest.mark.parametrize(
        "times",
        [[0.0], [0.1, 0.5], [0.0, 0.5, 0.5], [0.0, 0.7, 0.3], [0.0, 1.2], [0.0, float("nan")]],
    )
    def test_invalid_grids(self, times):
        """Grids must start at 0, increase strictly, stay in [0, 1] and hold 2+ times."""
        with pytest.raises(InvalidInputError):
            TimeGrid(torch.tensor(times, dtype=torch.float64))

    @pytest.mark.parametrize("n", [0, 1, 2.5])
    def test_invalid_step_count(self, n):
        """Step counts below 2 are rejected."""
        with pytest.raises(InvalidInputError):
            uniform_grid(n)

    @pytest.mark.parametrize("s", [0.0, -1.0, float("nan")])
    def test_invalid_shift(self, s):
        """Shift factors must be positive."""
        with pytest.raises(InvalidInputError):
            shifted_grid(10, s)

    @pytest.mark.parametrize("t_split", [0.0, 1.0])
    def test_invalid_split(self, t_split):
        """The split time must lie strictly inside (0, 1)."""
        with pytest.raises(InvalidInputError):
            stagewise_grid(5, 5, t_split)

    @pytest.mark.parametrize(
        ("s", "percent"),
        [(4.0, 6), (2.0, 12), (1.0, 20), (0.7, 28), (0.5, 34), (0.3, 46), (0.1, 72)],
    )
    def test_fraction_below_threshold(self, s, percent):
        """Share of a 50-step shifted grid spent below t=0.2."""
        assert round(100 * fraction_below(shifted_grid(50, s), 0.2)) == percent

    def test_small_shift_concentrates_early(self):
        """Smaller shift factors spend more steps at small t."""
        fractions = [fraction_below(shifted_grid(50, s), 0.2) for s in (4.0, 1.0, 0.1)]
        assert fractions == sorted(fractions)

    def test_csv(self, tmp_path):
        """Grids survive a CSV write and read with 17 significant digits."""
        grid = shifted_grid(7, 0.3)
        path = tmp_path / "grid.csv"
        grid_to_csv(grid, path)
        loaded = grid_from_csv(path)
        assert torch.equal(loaded.times, grid.times)
        assert loaded.construction is GridKind.CUSTOM

    def test_csv_bad_row(self, tmp_path):
        """Unparseable lines report their row number."""
        path = tmp_path / "grid.csv"
        path.write_text("0\n0.5\nhalf\n")
        with pytest.raises(FormatError, match="row 3"):
            grid_from_csv(path)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(min_value=2, max_value=500), s=st.floats(min_value=0.05, max_value=20.0))
def test_shifted_grid_is_valid(n, s):
    """Every shifted grid is a valid grid starting at 0 and ending below 1."""
    grid = shifted_grid(n, s)
    assert grid.times[0].item() == 0.0
    assert grid.times[-1].item() < 1.0
    assert len(grid) == n


@given(s=st.floats(min_value=0.01, max_value=100.0))
def test_shift_fixes_endpoints(s):
    """The shift mapping fixes t=0 and t=1."""
    assert shift_time(0.0, s) == 0.0
    assert shift_time(1.0, s) == pytest.approx(1.0, abs=1e-15)
