"""Sampling from stacked posteriors and holdout evaluation reports."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .ensemble import (
    PosteriorEnsemble,
    SimplexWeights,
    SimulationTable,
    compute_intervals,
    compute_moments,
    compute_ranks,
)
from .errors import CapacityError, DimensionError, EvaluationError, ParameterError
from .intervals import IntervalFit, coverage_error, stacked_intervals
from .mixture import LocalWeightModel, MixtureFit, mixed_ranks, mixture_moments
from .samples import AffineAggregator, SampleFit, aggregate_draws
from .scores import moment_scores_batch, rank_cvm_distance

DEFAULT_BINS = 20


def qmc_sample_mixture(weights, pools, s_out: int, seed: int = 0,
                       rng: np.random.Generator = None) -> np.ndarray:
    """Draw ``s_out`` samples from a weighted mixture of per-inference pools.

    Each inference contributes floor(s_out * w_k) draws sampled without
    replacement from its pool; the leftover draws go to distinct inferences
    sampled without replacement with probability proportional to the
    fractional remainders w_k - floor(s_out * w_k) / s_out.

    ``pools`` is a (K, S, d) array (or (K, S) for scalar draws).
    """
    w = weights.w if isinstance(weights, SimplexWeights) else SimplexWeights(weights).w
    pools = np.asarray(pools, dtype=float)
    squeeze = pools.ndim == 2
    if squeeze:
        pools = pools[:, :, None]
    if pools.ndim != 3 or pools.shape[0] != w.size:
        raise DimensionError(
            f"pools must be (K={w.size}, S, d), got {pools.shape}"
        )
    s_pool = pools.shape[1]
    if s_out > s_pool:
        raise CapacityError(
            f"requested {s_out} draws but pools hold only {s_pool}"
        )
    if rng is None:
        rng = np.random.default_rng(seed)

    counts = np.floor(s_out * w).astype(int)
    leftover = s_out - int(counts.sum())
    if leftover > 0:
        residual = w - counts / float(s_out)
        residual = np.maximum(residual, 0.0)
        total = residual.sum()
        if total <= 0.0:
            warnings.warn(
                "all residual probabilities vanished; assigning leftover "
                "draws uniformly",
                stacklevel=2,
            )
            residual = np.ones_like(w)
            total = residual.sum()
        extra = rng.choice(
            w.size, size=leftover, replace=False, p=residual / total
        )
        counts[extra] += 1
    out = np.empty((s_out, pools.shape[2]))
    pos = 0
    for k in range(w.size):
        if counts[k] == 0:
            continue
        idx = rng.choice(s_pool, size=counts[k], replace=False)
        out[pos : pos + counts[k]] = pools[k, idx]
        pos += counts[k]
    return out[:, 0] if squeeze else out


def rank_histogram(ranks, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Equal-width right-closed bin counts of ranks on [0, 1].

    Accepts (N,) or (N, d) ranks; returns (bins,) or (d, bins) integer
    counts summing to N per dimension.
    """
    if bins < 2:
        raise ParameterError(f"need at least 2 bins, got {bins}")
    r = np.asarray(ranks, dtype=float)
    one_dim = r.ndim == 1
    if one_dim:
        r = r[:, None]
    idx = np.clip(np.ceil(r * bins).astype(int) - 1, 0, bins - 1)
    counts = np.stack(
        [np.bincount(idx[:, j], minlength=bins) for j in range(r.shape[1])]
    )
    return counts[0] if one_dim else counts


@dataclass
class EvaluationReport:
    """Holdout metrics for a fit or a raw inference; inapplicable metrics
    are None with the reason recorded in ``absent``."""

    target: str
    n_test: int
    alpha: float
    bins: int
    seed: int
    expected_log_pred_density: float = None
    coverage_error_per_dim: np.ndarray = None
    coverage_error_avg: float = None
    moment_error: float = None
    rank_cvm_per_dim: np.ndarray = None
    rank_cvm_total: float = None
    rank_histogram: np.ndarray = None
    absent: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def listify(x):
            return None if x is None else np.asarray(x).tolist()

        return {
            "target": self.target,
            "n_test": self.n_test,
            "alpha": self.alpha,
            "bins": self.bins,
            "seed": self.seed,
            "expected_log_pred_density": self.expected_log_pred_density,
            "coverage_error_per_dim": listify(self.coverage_error_per_dim),
            "coverage_error_avg": self.coverage_error_avg,
            "moment_error": self.moment_error,
            "rank_cvm_per_dim": listify(self.rank_cvm_per_dim),
            "rank_cvm_total": self.rank_cvm_total,
            "rank_histogram": listify(self.rank_histogram),
            "absent": dict(sorted(self.absent.items())),
        }


def _empirical_intervals(draws: np.ndarray, alpha: float):
    """(lo, hi) central-interval endpoints of (M, S, d) draws."""
    qs = np.quantile(draws, [alpha / 2.0, 1.0 - alpha / 2.0], axis=1)
    return qs[0], qs[1]


def _draws_ranks(draws: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return (draws <= theta[:, None, :]).mean(axis=1)


def _draws_moments(draws: np.ndarray):
    from .ensemble import COV_RIDGE_REL

    mu = draws.mean(axis=1)
    centered = draws - mu[:, None, :]
    cov = np.einsum("msa,msb->mab", centered, centered) / draws.shape[1]
    d = draws.shape[2]
    trace = np.trace(cov, axis1=-2, axis2=-1)
    ridge = COV_RIDGE_REL * (1.0 + trace / d)
    if d == 1:
        cov = np.maximum(cov, ridge[:, None, None])
    else:
        val, vec = np.linalg.eigh(cov)
        val = np.maximum(val, ridge[:, None])
        cov = np.einsum("mab,mb,mcb->mac", vec, val, vec)
    return mu, cov


def evaluate(target, table: SimulationTable, ensemble: PosteriorEnsemble,
             alpha: float = 0.1, bins: int = DEFAULT_BINS,
             seed: int = 0) -> EvaluationReport:
    """Holdout evaluation on the test-labeled rows.

    ``target`` may be an inference index, a MixtureFit, an IntervalFit, an
    AffineAggregator, or a SampleFit. The seed drives only the pooled
    mixture draws behind the coverage metric of mixture-form fits.
    """
    rows = table.indices("test")
    if rows.size == 0:
        raise EvaluationError("no test-labeled rows to evaluate on")
    theta = table.theta[rows]
    report = EvaluationReport(
        target=_target_name(target), n_test=int(rows.size), alpha=float(alpha),
        bins=int(bins), seed=int(seed),
    )

    if isinstance(target, SampleFit):
        target = target.aggregator

    if isinstance(target, (int, np.integer)):
        k = int(target)
        ranks = compute_ranks(table, ensemble).ranks[k][rows]
        _fill_rank_metrics(report, ranks, bins)
        itab = compute_intervals(ensemble, alpha)
        lo, hi = itab.lo[k][rows], itab.hi[k][rows]
        per_dim, avg = coverage_error(lo, hi, theta, alpha)
        report.coverage_error_per_dim, report.coverage_error_avg = per_dim, avg
        moments = compute_moments(ensemble)
        report.moment_error = float(
            np.mean(moment_scores_batch(
                moments.means[k][rows], moments.covariances[k][rows], theta
            ))
        )
        if ensemble.log_q_at_theta is not None:
            report.expected_log_pred_density = float(
                np.mean(ensemble.log_q_at_theta[k][rows])
            )
        else:
            report.absent["expected_log_pred_density"] = "no log_q_at_theta stream"
        return report

    if isinstance(target, MixtureFit):
        weights = target.weights
        rank_table = compute_ranks(table, ensemble)
        mixed = mixed_ranks(weights, rank_table, y=table.y, subset=rows)
        _fill_rank_metrics(report, mixed, bins)
        moments = compute_moments(ensemble)
        mu_star, v_star = mixture_moments(weights, moments, y=table.y, subset=rows)
        report.moment_error = float(
            np.mean(moment_scores_batch(mu_star, v_star, theta))
        )
        if ensemble.log_q_at_theta is not None:
            log_q = ensemble.log_q_at_theta[:, rows]
            if isinstance(weights, LocalWeightModel):
                row_w = weights.weights_for(table.y[rows])
            else:
                row_w = np.broadcast_to(weights.w, (rows.size, weights.w.size))
            shift = log_q.max(axis=0)
            mix = np.einsum("km,mk->m", np.exp(log_q - shift[None]), row_w)
            report.expected_log_pred_density = float(np.mean(np.log(mix) + shift))
        else:
            report.absent["expected_log_pred_density"] = "no log_q_at_theta stream"
        pooled = _pooled_mixture_draws(weights, ensemble, table, rows, seed)
        lo, hi = _empirical_intervals(pooled, alpha)
        per_dim, avg = coverage_error(lo, hi, theta, alpha)
        report.coverage_error_per_dim, report.coverage_error_avg = per_dim, avg
        return report

    if isinstance(target, IntervalFit):
        itab = compute_intervals(ensemble, target.alpha)
        lo, hi = stacked_intervals(target, itab, subset=rows)
        per_dim, avg = coverage_error(lo, hi, theta, target.alpha)
        report.alpha = target.alpha
        report.coverage_error_per_dim, report.coverage_error_avg = per_dim, avg
        reason = "interval fits define endpoints only"
        report.absent["expected_log_pred_density"] = reason
        report.absent["moment_error"] = reason
        report.absent["rank_cvm"] = reason
        return report

    if isinstance(target, AffineAggregator):
        draws = aggregate_draws(target, ensemble, subset=rows)
        ranks = _draws_ranks(draws, theta)
        _fill_rank_metrics(report, ranks, bins)
        lo, hi = _empirical_intervals(draws, alpha)
        per_dim, avg = coverage_error(lo, hi, theta, alpha)
        report.coverage_error_per_dim, report.coverage_error_avg = per_dim, avg
        mu, cov = _draws_moments(draws)
        report.moment_error = float(np.mean(moment_scores_batch(mu, cov, theta)))
        report.absent["expected_log_pred_density"] = (
            "sample aggregation has no tractable density"
        )
        return report

    raise ParameterError(f"cannot evaluate target of type {type(target).__name__}")


def _target_name(target) -> str:
    if isinstance(target, (int, np.integer)):
        return f"inference-{int(target)}"
    if isinstance(target, MixtureFit):
        return "local-mixture" if target.is_local else "mixture"
    if isinstance(target, IntervalFit):
        return "interval"
    if isinstance(target, (AffineAggregator, SampleFit)):
        return "sample"
    return type(target).__name__


def _fill_rank_metrics(report, ranks, bins):
    per_dim = np.array(
        [rank_cvm_distance(ranks[:, j]) for j in range(ranks.shape[1])]
    )
    report.rank_cvm_per_dim = per_dim
    report.rank_cvm_total = float(per_dim.sum())
    report.rank_histogram = rank_histogram(ranks, bins)


def _pooled_mixture_draws(weights, ensemble, table, rows, seed):
    """Per-row QMC pooled draws from the weighted mixture, (M, S, d)."""
    rng = np.random.default_rng(seed)
    s = ensemble.n_draws
    if isinstance(weights, LocalWeightModel):
        row_w = weights.weights_for(table.y[rows])
    else:
        row_w = np.broadcast_to(weights.w, (rows.size, weights.w.size))
    out = np.empty((rows.size, s, ensemble.d))
    for i, n in enumerate(rows):
        out[i] = qmc_sample_mixture(
            SimplexWeights(row_w[i]), ensemble.draws[:, n], s, rng=rng
        )
    return out


def baseline_comparison(fit, table, ensemble, alpha: float = 0.1,
                        bins: int = DEFAULT_BINS, seed: int = 0) -> dict:
    """Reports for the best single inference, the uniform mixture, and the
    given fit, on the shared test rows.

    The best single inference is selected on validation rows: by mean log
    density when available, otherwise by summed rank distance.
    """
    val_rows = table.indices("validation")
    if val_rows.size == 0:
        raise EvaluationError("no validation rows to select the best inference")
    k = ensemble.n_inferences
    if ensemble.log_q_at_theta is not None:
        score = [-float(np.mean(ensemble.log_q_at_theta[i][val_rows]))
                 for i in range(k)]
    else:
        rank_table = compute_ranks(table, ensemble)
        score = [
            sum(
                rank_cvm_distance(rank_table.ranks[i][val_rows][:, j])
                for j in range(ensemble.d)
            )
            for i in range(k)
        ]
    best = int(np.argmin(score))
    uniform = MixtureFit(
        weights=SimplexWeights.uniform(k), objective=None,
        loss_trace=np.zeros(1), converged=True, n_iter=0,
    )
    return {
        "best": evaluate(best, table, ensemble, alpha=alpha, bins=bins, seed=seed),
        "uniform": evaluate(uniform, table, ensemble, alpha=alpha, bins=bins,
                            seed=seed),
        "stacked": evaluate(fit, table, ensemble, alpha=alpha, bins=bins,
                            seed=seed),
    }
