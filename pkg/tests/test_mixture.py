import numpy as np
import pytest

from posterior_stacking import (
    ConfigurationError,
    FitOptions,
    HybridSpec,
    PosteriorEnsemble,
    SimplexWeights,
    SimulationTable,
    compute_moments,
    compute_ranks,
    fit_local_mixture,
    fit_mixture,
    generate,
    log_score,
    mixed_ranks,
    mixture_moments,
    qmc_sample_mixture,
    scenario_from_name,
)
from posterior_stacking.mixture import LocalWeightModel


def all_validation(n):
    return np.full(n, "validation", dtype="<U10")


class TestFitMixture:
    def test_identical_inferences_stay_uniform(self):
        rng = np.random.default_rng(0)
        n, s = 200, 30
        theta = rng.standard_normal((n, 1))
        y = rng.standard_normal((n, 1))
        draws = rng.standard_normal((1, n, s, 1))
        log_q = rng.standard_normal((1, n))
        table = SimulationTable(theta=theta, y=y)
        ensemble = PosteriorEnsemble(
            draws=np.concatenate([draws, draws]),
            log_q_at_theta=np.concatenate([log_q, log_q]),
        )
        fit = fit_mixture(table, ensemble, HybridSpec.log_score())
        assert np.allclose(fit.weights.w, [0.5, 0.5], atol=1e-9)
        single = log_score(SimplexWeights([1.0]), log_q)
        assert fit.loss_trace[-1] == pytest.approx(single, abs=1e-12)

    def test_two_component_consistency(self):
        # the truth is an equal mixture of the two inferences
        scenario = scenario_from_name(
            "bimodal-pair", 10_000, 100, seed=11, split_fractions=(0, 1.0, 0)
        )
        table, ensemble = generate(scenario)
        fit = fit_mixture(table, ensemble, HybridSpec.log_score())
        assert np.allclose(fit.weights.w, [0.5, 0.5], atol=0.05)

    def test_missing_log_q_raises(self):
        scenario = scenario_from_name("biased-pair", 50, 10, seed=0)
        table, ensemble = generate(scenario)
        stripped = PosteriorEnsemble(draws=ensemble.draws)
        with pytest.raises(ConfigurationError, match="log_q"):
            fit_mixture(table, stripped, HybridSpec.log_score())

    def test_single_inference_rejected(self):
        rng = np.random.default_rng(3)
        table = SimulationTable(
            theta=rng.standard_normal((20, 1)), y=rng.standard_normal((20, 1))
        )
        ensemble = PosteriorEnsemble(draws=rng.standard_normal((1, 20, 5, 1)))
        with pytest.raises(ConfigurationError):
            fit_mixture(table, ensemble, HybridSpec.rank_distance())

    def test_vertex_dominance_under_log_score(self):
        # one inference strictly dominates row-wise by a wide margin
        rng = np.random.default_rng(5)
        n = 300
        table = SimulationTable(
            theta=rng.standard_normal((n, 1)), y=rng.standard_normal((n, 1))
        )
        log_q = np.stack([np.full(n, -6.0), rng.uniform(-0.5, 0.5, n)])
        ensemble = PosteriorEnsemble(
            draws=rng.standard_normal((2, n, 5, 1)), log_q_at_theta=log_q
        )
        fit = fit_mixture(table, ensemble, HybridSpec.log_score())
        assert fit.weights.w[1] >= 1 - 1e-3

    def test_loss_trace_non_increasing(self):
        scenario = scenario_from_name("equal-kl-quartet", 500, 40, seed=2,
                                      split_fractions=(0, 1.0, 0))
        table, ensemble = generate(scenario)
        fit = fit_mixture(table, ensemble, HybridSpec.hybrid(100.0))
        assert np.all(np.diff(fit.loss_trace) <= 0)
        assert np.all(np.isfinite(fit.loss_trace))

    def test_iterates_stay_on_simplex(self):
        scenario = scenario_from_name("bimodal-pair", 300, 20, seed=4,
                                      split_fractions=(0, 1.0, 0))
        table, ensemble = generate(scenario)
        fit = fit_mixture(
            table, ensemble, HybridSpec.log_score(),
            FitOptions(keep_iterates=True),
        )
        for w in fit.diagnostics["iterates"]:
            assert np.all(w >= 0)
            assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_rank_objective_runs_without_log_q(self):
        scenario = scenario_from_name("biased-pair", 2000, 50, seed=6,
                                      split_fractions=(0, 1.0, 0))
        table, ensemble = generate(scenario)
        stripped = PosteriorEnsemble(draws=ensemble.draws)
        fit = fit_mixture(table, stripped, HybridSpec.rank_distance())
        # symmetric biased pair: rank calibration wants balanced weights
        assert np.allclose(fit.weights.w, [0.5, 0.5], atol=0.1)

    def test_holdout_loss_beats_random_weights(self):
        # fitted weights dominate 50 random simplex points within noise
        scenario = scenario_from_name(
            "equal-kl-quartet", 20_000, 50, seed=8, split_fractions=(0, 0.5, 0.5)
        )
        table, ensemble = generate(scenario)
        fit = fit_mixture(table, ensemble, HybridSpec.log_score())
        test_rows = table.indices("test")
        log_q_test = ensemble.log_q_at_theta[:, test_rows]

        def holdout(w):
            shift = log_q_test.max(axis=0)
            mix = w @ np.exp(log_q_test - shift)
            return -(np.log(mix) + shift)

        fitted_scores = holdout(fit.weights.w)
        rng = np.random.default_rng(9)
        for _ in range(50):
            random_scores = holdout(rng.dirichlet(np.ones(4)))
            diff = random_scores - fitted_scores
            se = diff.std(ddof=1) / np.sqrt(diff.size)
            assert diff.mean() >= -3 * se


class TestMixedRanks:
    def test_direct_linear_combination(self):
        ranks = np.array([[[0.2]], [[0.6]]])
        table = _rank_table(ranks, n_draws=5)
        out = mixed_ranks(SimplexWeights([0.5, 0.5]), table)
        assert out[0, 0] == pytest.approx(0.4)

    def test_vertex_weight_passthrough(self):
        rng = np.random.default_rng(1)
        ranks = rng.uniform(size=(3, 10, 2))
        table = _rank_table(ranks, n_draws=4)
        out = mixed_ranks(SimplexWeights([1.0, 0.0, 0.0]), table)
        assert np.allclose(out, ranks[0])

    def test_uniform_average(self):
        ranks = np.array([0.0, 1 / 3, 2 / 3, 1.0]).reshape(4, 1, 1)
        table = _rank_table(ranks, n_draws=3)
        out = mixed_ranks(SimplexWeights.uniform(4), table)
        assert out[0, 0] == pytest.approx(0.5)

    def test_matches_rank_of_pooled_mixture_draws(self):
        # linear mixing of ranks agrees with ranking theta within a large
        # pooled sample drawn from the weighted mixture
        scenario = scenario_from_name("equal-kl-quartet", 20, 10_000, seed=3,
                                      split_fractions=(0, 1.0, 0))
        table, ensemble = generate(scenario)
        rank_table = compute_ranks(table, ensemble)
        w = SimplexWeights([0.4, 0.3, 0.2, 0.1])
        mixed = mixed_ranks(w, rank_table)
        s = ensemble.n_draws
        rng = np.random.default_rng(0)
        for n in range(0, 20, 5):
            pooled = qmc_sample_mixture(w, ensemble.draws[:, n], s, rng=rng)
            brute = np.mean(pooled[:, 0] <= table.theta[n, 0])
            assert mixed[n, 0] == pytest.approx(brute, abs=3 * 2 / np.sqrt(s))


def _rank_table(ranks, n_draws):
    from posterior_stacking.ensemble import RankTable

    return RankTable(ranks=np.asarray(ranks, dtype=float), n_draws=n_draws)


class TestMixtureMoments:
    def test_symmetric_pair(self):
        # oracle: covariance of the equally weighted pooled draws
        means = np.array([[[-1.0]], [[1.0]]])
        covs = np.ones((2, 1, 1, 1))
        summary = _moment_summary(means, covs)
        mu, v = mixture_moments(SimplexWeights([0.5, 0.5]), summary)
        assert mu[0, 0] == pytest.approx(0.0)
        assert v[0, 0, 0] == pytest.approx(2.0)

    def test_single_inference_passthrough(self):
        rng = np.random.default_rng(2)
        means = rng.standard_normal((1, 4, 2))
        covs = np.stack([[np.eye(2)] * 4])
        summary = _moment_summary(means, covs)
        mu, v = mixture_moments(SimplexWeights([1.0]), summary)
        assert np.allclose(mu, means[0])
        assert np.allclose(v, covs[0])

    def test_equal_means_drop_spread_term(self):
        means = np.tile(np.array([[0.7]]), (3, 1))[:, :, None]
        covs = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1)
        summary = _moment_summary(means, covs)
        w = SimplexWeights([0.2, 0.3, 0.5])
        _, v = mixture_moments(w, summary)
        assert v[0, 0, 0] == pytest.approx(0.2 * 1 + 0.3 * 2 + 0.5 * 3)

    def test_matches_pooled_sample_covariance(self):
        # law of total variance against a large weighted pooled sample
        scenario = scenario_from_name("equal-kl-quartet", 3, 100, seed=5,
                                      split_fractions=(0, 1.0, 0))
        table, ensemble = generate(scenario)
        summary = compute_moments(ensemble)
        w = np.array([0.1, 0.2, 0.3, 0.4])
        mu, v = mixture_moments(SimplexWeights(w), summary)
        rng = np.random.default_rng(7)
        n_pool = 1_000_000
        counts = rng.multinomial(n_pool, w)
        for n in range(3):
            parts = [
                ensemble.draws[k, n, rng.integers(0, 100, counts[k]), 0]
                for k in range(4)
            ]
            pooled = np.concatenate(parts)
            assert v[n, 0, 0] == pytest.approx(pooled.var(), rel=0.02)

    def test_under_confidence_preserved(self):
        # inflated component variances keep the mixture variance inflated
        scenario = _inflated_scenario()
        table, ensemble = generate(scenario)
        summary = compute_moments(ensemble)
        true_var = 1.0
        assert np.all(summary.covariances[..., 0, 0] >= true_var)
        rng = np.random.default_rng(13)
        for _ in range(100):
            w = SimplexWeights(rng.dirichlet(np.ones(3)))
            _, v = mixture_moments(w, summary)
            assert np.all(v[:, 0, 0] >= true_var)


def _inflated_scenario():
    from posterior_stacking import GaussianComponent, GaussianScenario

    return GaussianScenario(
        truth=(GaussianComponent(0.0, 1.0),),
        inferences=(
            GaussianComponent(0.3, 1.5),
            GaussianComponent(-0.5, 1.8),
            GaussianComponent(0.0, 2.2),
        ),
        n_sims=500,
        n_draws=200,
        seed=21,
        split_fractions=(0, 1.0, 0),
    )


def _moment_summary(means, covs):
    from posterior_stacking.ensemble import MomentSummary

    return MomentSummary(
        means=np.asarray(means, dtype=float),
        covariances=np.asarray(covs, dtype=float),
    )


class TestLocalMixture:
    def test_frozen_coefficients_reproduce_global_fit(self):
        scenario = scenario_from_name("bimodal-pair", 2000, 50, seed=1,
                                      split_fractions=(0, 1.0, 0))
        table, ensemble = generate(scenario)
        opts = FitOptions(freeze_coefficients=True, local_ridge=0.0)
        local = fit_local_mixture(table, ensemble, HybridSpec.log_score(), opts)
        global_fit = fit_mixture(table, ensemble, HybridSpec.log_score())
        assert np.all(local.weights.b == 0.0) or np.allclose(
            local.weights.b, 0.0, atol=1e-12
        )
        assert local.loss_trace[-1] == pytest.approx(
            global_fit.loss_trace[-1], abs=1e-8
        )

    def test_hand_set_parameters_match_softmax(self):
        model = LocalWeightModel(
            a=np.array([0.3]), b=np.array([[2.0]]),
            center=np.zeros(1), scale=np.ones(1),
        )
        y = np.array([[0.5]])
        logits = np.array([0.0, 0.3 + 2.0 * 0.5])
        expected = np.exp(logits) / np.exp(logits).sum()
        assert np.allclose(model.weights_for(y)[0], expected)

    def test_regime_scenario_beats_global_on_holdout(self):
        # inference 1 is exact for y < 0, inference 2 for y > 0
        rng = np.random.default_rng(42)
        n, s = 6000, 40
        y = rng.standard_normal(n)
        center = y + np.where(y < 0, -1.0, 1.0)
        theta = center + rng.standard_normal(n)
        offsets = np.array([-1.0, 1.0])
        draws = (
            y[None, :, None]
            + offsets[:, None, None]
            + rng.standard_normal((2, n, s))
        )
        log_q = (
            -0.5 * np.log(2 * np.pi)
            - 0.5 * (theta[None, :] - y[None, :] - offsets[:, None]) ** 2
        )
        split = np.full(n, "validation", dtype="<U10")
        split[n // 2 :] = "test"
        table = SimulationTable(theta=theta[:, None], y=y[:, None], split=split)
        ensemble = PosteriorEnsemble(draws=draws[..., None], log_q_at_theta=log_q)

        local = fit_local_mixture(table, ensemble, HybridSpec.log_score())
        global_fit = fit_mixture(table, ensemble, HybridSpec.log_score())
        test_rows = table.indices("test")

        def holdout_loss(weights):
            log_q_t = log_q[:, test_rows]
            if isinstance(weights, LocalWeightModel):
                row_w = weights.weights_for(y[test_rows, None])
            else:
                row_w = np.broadcast_to(weights.w, (test_rows.size, 2))
            mix = np.einsum("km,mk->m", np.exp(log_q_t), row_w)
            return -np.mean(np.log(mix))

        assert holdout_loss(local.weights) <= holdout_loss(global_fit.weights)

    def test_moment_objective_rejected(self):
        scenario = scenario_from_name("bimodal-pair", 100, 10, seed=0)
        table, ensemble = generate(scenario)
        with pytest.raises(ConfigurationError):
            fit_local_mixture(table, ensemble, HybridSpec.moment())
