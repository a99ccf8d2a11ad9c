import json

import numpy as np
import pytest

from posterior_stacking import (
    AffineAggregator,
    CapacityError,
    EvaluationError,
    HybridSpec,
    ParameterError,
    SimplexWeights,
    baseline_comparison,
    compute_intervals,
    evaluate,
    fit_intervals,
    fit_mixture,
    generate,
    qmc_sample_mixture,
    rank_histogram,
    scenario_from_name,
)
from posterior_stacking.io import save_report


class TestQmcSampleMixture:
    def test_exact_floor_allocation(self):
        pools = np.arange(20, dtype=float).reshape(2, 10)
        out = qmc_sample_mixture(SimplexWeights([0.6, 0.4]), pools, 10, seed=0)
        assert (out < 10).sum() == 6
        assert (out >= 10).sum() == 4

    def test_no_repeats_within_pool(self):
        pools = np.arange(20, dtype=float).reshape(2, 10)
        for seed in range(20):
            out = qmc_sample_mixture(SimplexWeights([0.5, 0.5]), pools, 10,
                                     seed=seed)
            assert len(np.unique(out)) == 10

    def test_equal_residuals_split_leftover(self):
        pools = np.arange(30, dtype=float).reshape(3, 10)
        counts = np.zeros(3)
        reps = 3000
        for seed in range(reps):
            out = qmc_sample_mixture(
                SimplexWeights([1 / 3, 1 / 3, 1 / 3]), pools, 10, seed=seed
            )
            counts += [
                ((out >= 10 * k) & (out < 10 * (k + 1))).sum() for k in range(3)
            ]
        counts /= reps
        # floors give (3, 3, 3); the leftover draw is split evenly, so each
        # inference averages 10/3
        assert np.allclose(counts, 10 / 3, atol=0.05)

    def test_vertex_weights(self):
        pools = np.arange(20, dtype=float).reshape(2, 10)
        out = qmc_sample_mixture(SimplexWeights([1.0, 0.0]), pools, 5, seed=3)
        assert np.all(out < 10)

    def test_capacity_error(self):
        pools = np.zeros((2, 4))
        with pytest.raises(CapacityError):
            qmc_sample_mixture(SimplexWeights([0.5, 0.5]), pools, 5)

    def test_unbiased_allocation(self):
        pools = np.arange(20, dtype=float).reshape(2, 10)
        w = SimplexWeights([0.55, 0.45])
        counts = [
            (qmc_sample_mixture(w, pools, 10, seed=seed) < 10).sum()
            for seed in range(2000)
        ]
        counts = np.asarray(counts, dtype=float)
        se = counts.std(ddof=1) / np.sqrt(counts.size)
        assert abs(counts.mean() - 5.5) < 3 * se + 1e-9

    def test_variance_below_multinomial(self):
        pools = np.arange(20, dtype=float).reshape(2, 10)
        w = SimplexWeights([0.55, 0.45])
        counts = np.asarray([
            (qmc_sample_mixture(w, pools, 10, seed=seed) < 10).sum()
            for seed in range(2000)
        ], dtype=float)
        multinomial_var = 10 * 0.55 * 0.45
        assert counts.var(ddof=1) < multinomial_var


class TestRankHistogram:
    def test_uniform_grid_equal_counts(self):
        ranks = np.arange(1, 101) / 100.0
        counts = rank_histogram(ranks, bins=10)
        assert np.all(counts == 10)

    def test_all_zero_ranks_in_first_bin(self):
        counts = rank_histogram(np.zeros(7), bins=5)
        assert counts[0] == 7
        assert counts.sum() == 7

    def test_right_closed_bins(self):
        counts = rank_histogram(np.array([0.2]), bins=5)
        assert counts[0] == 1  # 0.2 falls in (0.0, 0.2]

    def test_multinomial_concentration(self):
        rng = np.random.default_rng(0)
        n, b = 100_000, 20
        counts = rank_histogram(rng.uniform(size=n), bins=b)
        assert counts.sum() == n
        assert np.max(np.abs(counts - n / b)) < 4 * np.sqrt(n / b)

    def test_two_dimensional_input(self):
        rng = np.random.default_rng(1)
        counts = rank_histogram(rng.uniform(size=(50, 3)), bins=4)
        assert counts.shape == (3, 4)
        assert np.all(counts.sum(axis=1) == 50)

    def test_too_few_bins(self):
        with pytest.raises(ParameterError):
            rank_histogram(np.array([0.5]), bins=1)


@pytest.fixture(scope="module")
def quartet():
    scenario = scenario_from_name(
        "equal-kl-quartet", 4000, 60, seed=19, split_fractions=(0, 0.6, 0.4)
    )
    table, ensemble = generate(scenario)
    return scenario, table, ensemble


class TestEvaluate:
    def test_raw_inference_report(self, quartet):
        _, table, ensemble = quartet
        report = evaluate(0, table, ensemble, alpha=0.1)
        assert report.n_test == table.indices("test").size
        assert report.rank_histogram.sum() == report.n_test
        assert report.expected_log_pred_density is not None
        assert report.coverage_error_avg is not None

    def test_no_test_rows_raises(self):
        scenario = scenario_from_name("biased-pair", 100, 10, seed=0,
                                      split_fractions=(0, 1.0, 0))
        table, ensemble = generate(scenario)
        with pytest.raises(EvaluationError):
            evaluate(0, table, ensemble)

    def test_mixture_report_complete(self, quartet):
        _, table, ensemble = quartet
        fit = fit_mixture(table, ensemble, HybridSpec.log_score())
        report = evaluate(fit, table, ensemble, alpha=0.1, seed=5)
        assert report.expected_log_pred_density is not None
        assert report.moment_error is not None
        assert report.rank_cvm_total is not None
        assert report.coverage_error_avg is not None
        assert not report.absent

    def test_interval_fit_marks_absent(self, quartet):
        _, table, ensemble = quartet
        itable = compute_intervals(ensemble, 0.1)
        fit = fit_intervals(table, itable)
        report = evaluate(fit, table, ensemble)
        assert report.coverage_error_avg is not None
        assert "moment_error" in report.absent
        assert report.moment_error is None

    def test_sample_fit_density_absent(self, quartet):
        _, table, ensemble = quartet
        agg = AffineAggregator.single(4, 1, 2)
        report = evaluate(agg, table, ensemble)
        assert report.expected_log_pred_density is None
        assert "expected_log_pred_density" in report.absent
        assert report.rank_cvm_total is not None

    def test_zero_width_intervals_coverage(self, quartet):
        # aggregating with W = 0 gives point-mass draws, coverage 0
        _, table, ensemble = quartet
        agg = AffineAggregator(w0=np.array([100.0]), w=np.zeros((4, 1, 1)))
        report = evaluate(agg, table, ensemble, alpha=0.1)
        assert report.coverage_error_avg == pytest.approx(0.9)

    def test_report_deterministic_bytes(self, quartet, tmp_path):
        _, table, ensemble = quartet
        fit = fit_mixture(table, ensemble, HybridSpec.log_score())
        paths = []
        for i in range(2):
            report = evaluate(fit, table, ensemble, alpha=0.1, seed=9)
            path = tmp_path / f"report_{i}.json"
            save_report(report, str(path), config={"seed": 9})
            paths.append(path.read_bytes())
        assert paths[0] == paths[1]

    def test_comparison_harness_runs_all_columns(self, quartet):
        _, table, ensemble = quartet
        fit = fit_mixture(table, ensemble, HybridSpec.log_score())
        reports = baseline_comparison(fit, table, ensemble)
        assert set(reports) == {"best", "uniform", "stacked"}
        for rep in reports.values():
            assert rep.n_test == table.indices("test").size
