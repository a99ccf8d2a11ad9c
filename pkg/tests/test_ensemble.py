import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posterior_stacking import (
    DimensionError,
    ParameterError,
    PosteriorEnsemble,
    SimplexWeights,
    SimulationTable,
    compute_intervals,
    compute_moments,
    compute_ranks,
    validate,
)


def make_pair(k=2, n=5, s=4, d=1, d_y=1, seed=0, log_q=False):
    rng = np.random.default_rng(seed)
    table = SimulationTable(
        theta=rng.standard_normal((n, d)), y=rng.standard_normal((n, d_y))
    )
    ensemble = PosteriorEnsemble(
        draws=rng.standard_normal((k, n, s, d)),
        log_q_at_theta=rng.standard_normal((k, n)) if log_q else None,
    )
    return table, ensemble


class TestSimulationTable:
    def test_default_split_is_validation(self):
        table, _ = make_pair()
        assert np.all(table.split == "validation")
        assert table.indices("validation").size == table.n_sims
        assert table.indices("test").size == 0

    def test_rejects_unknown_split_label(self):
        with pytest.raises(ParameterError):
            SimulationTable(
                theta=np.zeros((2, 1)), y=np.zeros((2, 1)),
                split=["validation", "holdout"],
            )

    def test_rejects_row_mismatch(self):
        with pytest.raises(DimensionError):
            SimulationTable(theta=np.zeros((3, 1)), y=np.zeros((2, 1)))


class TestSimplexWeights:
    def test_renormalizes(self):
        w = SimplexWeights([2.0, 2.0])
        assert np.allclose(w.w, [0.5, 0.5])

    def test_rejects_negative(self):
        with pytest.raises(ParameterError):
            SimplexWeights([0.5, -0.5])

    @given(st.lists(st.floats(min_value=1e-6, max_value=1e6), min_size=1,
                    max_size=8))
    def test_sum_is_one(self, values):
        assert abs(SimplexWeights(values).w.sum() - 1.0) < 1e-10


class TestComputeRanks:
    def test_half_below(self):
        # S=4 draws {0.1, 0.2, 0.3, 0.4} around theta = 0.25
        table = SimulationTable(theta=[[0.25]], y=[[0.0]])
        draws = np.array([0.1, 0.2, 0.3, 0.4]).reshape(1, 1, 4, 1)
        ranks = compute_ranks(table, PosteriorEnsemble(draws=draws))
        assert ranks.ranks[0, 0, 0] == 0.5

    def test_theta_below_all_draws(self):
        table = SimulationTable(theta=[[-5.0]], y=[[0.0]])
        draws = np.array([0.1, 0.2, 0.3, 0.4]).reshape(1, 1, 4, 1)
        ranks = compute_ranks(table, PosteriorEnsemble(draws=draws))
        assert ranks.ranks[0, 0, 0] == 0.0

    def test_tie_counts_as_below(self):
        # non-strict comparison: a draw equal to theta inflates the rank
        table = SimulationTable(theta=[[0.3]], y=[[0.0]])
        values = np.array([0.1, 0.2, 0.3, 0.4])
        draws = values.reshape(1, 1, 4, 1)
        ranks = compute_ranks(table, PosteriorEnsemble(draws=draws))
        brute = sum(v <= 0.3 for v in values) / 4.0
        assert brute == 0.75
        assert ranks.ranks[0, 0, 0] == brute

    def test_shape_mismatch_raises(self):
        table, _ = make_pair(n=5)
        _, other = make_pair(n=6, seed=1)
        with pytest.raises(DimensionError):
            compute_ranks(table, other)

    def test_matches_brute_force_counting(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            k, n, s, d = rng.integers(1, 4), rng.integers(1, 5), rng.integers(2, 9), rng.integers(1, 3)
            theta = rng.standard_normal((n, d))
            draws = rng.standard_normal((k, n, s, d))
            table = SimulationTable(theta=theta, y=np.zeros((n, 1)))
            ranks = compute_ranks(table, PosteriorEnsemble(draws=draws))
            ki, ni, ji = rng.integers(k), rng.integers(n), rng.integers(d)
            brute = np.sum(draws[ki, ni, :, ji] <= theta[ni, ji]) / s
            assert ranks.ranks[ki, ni, ji] == brute

    def test_ranks_on_exact_grid(self):
        _, ensemble = make_pair(k=3, n=20, s=7, seed=2)
        table, _ = make_pair(k=3, n=20, s=7, seed=3)
        ranks = compute_ranks(table, ensemble)
        grid = np.arange(ensemble.n_draws + 1) / ensemble.n_draws
        assert np.isin(ranks.ranks, grid).all()


class TestComputeMoments:
    def test_symmetric_two_point(self):
        draws = np.array([-1.0, 1.0]).reshape(1, 1, 2, 1)
        summary = compute_moments(PosteriorEnsemble(draws=draws))
        assert summary.means[0, 0, 0] == 0.0
        assert summary.covariances[0, 0, 0, 0] == 1.0

    def test_degenerate_draws_get_ridge(self):
        draws = np.zeros((1, 1, 3, 1))
        summary = compute_moments(PosteriorEnsemble(draws=draws))
        assert summary.means[0, 0, 0] == 0.0
        assert summary.covariances[0, 0, 0, 0] == pytest.approx(1e-8)

    def test_divisor_is_s(self):
        draws = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 4, 1)
        summary = compute_moments(PosteriorEnsemble(draws=draws))
        assert summary.means[0, 0, 0] == 2.5
        assert summary.covariances[0, 0, 0, 0] == 1.25

    def test_matches_pooled_computation(self):
        rng = np.random.default_rng(7)
        draws = rng.standard_normal((2, 3, 50, 2))
        summary = compute_moments(PosteriorEnsemble(draws=draws))
        for k in range(2):
            for n in range(3):
                cell = draws[k, n]
                assert np.allclose(summary.means[k, n], cell.mean(axis=0),
                                   atol=1e-12)
                direct = np.cov(cell.T, bias=True)
                assert np.allclose(summary.covariances[k, n], direct,
                                   atol=1e-12)


class TestComputeIntervals:
    def test_interpolated_order_statistics(self):
        draws = np.array([1.0, 2.0, 3.0, 4.0, 5.0]).reshape(1, 1, 5, 1)
        table = compute_intervals(PosteriorEnsemble(draws=draws), alpha=0.5)
        assert table.lo[0, 0, 0] == 2.0
        assert table.hi[0, 0, 0] == 4.0

    def test_extreme_alpha_warns_and_clamps(self):
        draws = np.array([1.0, 3.0]).reshape(1, 1, 2, 1)
        with pytest.warns(UserWarning):
            table = compute_intervals(PosteriorEnsemble(draws=draws),
                                      alpha=1e-12)
        assert table.lo[0, 0, 0] == pytest.approx(1.0, abs=1e-10)
        assert table.hi[0, 0, 0] == pytest.approx(3.0, abs=1e-10)

    def test_constant_draws(self):
        draws = np.full((1, 1, 10, 1), 2.5)
        table = compute_intervals(PosteriorEnsemble(draws=draws), alpha=0.2)
        assert table.lo[0, 0, 0] == table.hi[0, 0, 0] == 2.5

    def test_alpha_out_of_range(self):
        _, ensemble = make_pair()
        with pytest.raises(ParameterError):
            compute_intervals(ensemble, alpha=1.5)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_nested_intervals(self, seed):
        rng = np.random.default_rng(seed)
        draws = rng.standard_normal((2, 4, 30, 2))
        ensemble = PosteriorEnsemble(draws=draws)
        wide = compute_intervals(ensemble, alpha=0.1)
        narrow = compute_intervals(ensemble, alpha=0.5)
        assert np.all(wide.lo <= narrow.lo + 1e-12)
        assert np.all(narrow.hi <= wide.hi + 1e-12)


class TestValidate:
    def test_valid_inputs_give_empty_report(self):
        table, ensemble = make_pair(log_q=True)
        report = validate(table, ensemble)
        assert report.ok
        assert str(report) == "no issues found"

    def test_nan_draw_named_with_coordinates(self):
        table, ensemble = make_pair()
        draws = ensemble.draws.copy()
        draws[1, 3, 2, 0] = np.nan
        report = validate(table, PosteriorEnsemble(draws=draws))
        assert not report.ok
        assert any("k=1" in issue and "n=3" in issue and "s=2" in issue
                   for issue in report.issues)

    def test_missing_log_q_is_not_a_violation(self):
        table, ensemble = make_pair(log_q=False)
        assert validate(table, ensemble).ok

    def test_dimension_mismatch_reported(self):
        table, _ = make_pair(d=1)
        _, ensemble = make_pair(d=2, seed=5)
        report = validate(table, ensemble)
        assert any("dimension mismatch" in issue for issue in report.issues)
