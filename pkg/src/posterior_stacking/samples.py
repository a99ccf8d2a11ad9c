"""Affine sample aggregation fit by minimax discriminative calibration.

The aggregated draw for row n is theta*_ns = w0 + sum_k W_k theta_kns. A
weighted logistic discriminator tries to tell (theta_n, y_n) pairs from
(theta*_ns, y_n) pairs; the aggregation map is optimized to make that as
hard as possible. At perfect calibration no classifier beats chance and the
balanced log utility approaches -log 2.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .ensemble import PosteriorEnsemble, SimulationTable
from .errors import (
    ConfigurationError,
    DimensionError,
    EvaluationError,
    NumericalError,
)

LOG2 = float(np.log(2.0))


def class_weights(s: int):
    """Per-example weights (positive, negative) balancing 1 true pair
    against S aggregated pairs; C = (S+1)^2 / (2S)."""
    c = (s + 1) ** 2 / (2.0 * s)
    return c * s / (s + 1.0), c / (s + 1.0)


@dataclass(frozen=True)
class AffineAggregator:
    """Affine map from K paired draws to one aggregated draw."""

    w0: np.ndarray  # (d,)
    w: np.ndarray   # (K, d, d)

    def __post_init__(self):
        w0 = np.atleast_1d(np.asarray(self.w0, dtype=float))
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:  # scalar maps for d = 1
            w = w.reshape(-1, 1, 1)
        if w.ndim != 3 or w.shape[1] != w.shape[2] or w.shape[1] != w0.size:
            raise DimensionError(
                f"w must be (K, d, d) with d={w0.size}, got {w.shape}"
            )
        if not (np.all(np.isfinite(w0)) and np.all(np.isfinite(w))):
            raise NumericalError("aggregator entries must be finite")
        object.__setattr__(self, "w0", w0)
        object.__setattr__(self, "w", w)

    @property
    def k(self) -> int:
        return self.w.shape[0]

    @property
    def d(self) -> int:
        return self.w0.size

    @classmethod
    def uniform(cls, k: int, d: int) -> "AffineAggregator":
        return cls(w0=np.zeros(d), w=np.stack([np.eye(d) / k] * k))

    @classmethod
    def single(cls, k: int, d: int, index: int, w0=None) -> "AffineAggregator":
        w = np.zeros((k, d, d))
        w[index] = np.eye(d)
        return cls(w0=np.zeros(d) if w0 is None else w0, w=w)


def aggregate_draws(agg: AffineAggregator, ensemble: PosteriorEnsemble,
                    subset=None) -> np.ndarray:
    """Aggregated draws, combining equal draw indices s across inferences.

    Returns (M, S, d).
    """
    draws = ensemble.draws if subset is None else ensemble.draws[:, subset, :, :]
    if agg.k != draws.shape[0] or agg.d != draws.shape[3]:
        raise DimensionError(
            f"aggregator is (K={agg.k}, d={agg.d}) but draws are "
            f"(K={draws.shape[0]}, d={draws.shape[3]})"
        )
    out = np.einsum("kab,knsb->nsa", agg.w, draws)
    return out + agg.w0[None, None, :]


def build_classification_set(table: SimulationTable, aggregated: np.ndarray,
                             subset=None):
    """Label one positive (theta_n, y_n) and S negatives (theta*_ns, y_n)
    per row.

    Returns (features (M(S+1), d+d_y), labels, weights); the per-class
    weights make the total positive and negative mass equal.
    """
    rows = np.arange(table.n_sims) if subset is None else np.asarray(subset)
    theta = table.theta[rows]
    y = table.y[rows]
    m, s = aggregated.shape[0], aggregated.shape[1]
    if m != rows.size:
        raise DimensionError(
            f"aggregated draws cover {m} rows but subset has {rows.size}"
        )
    pos_w, neg_w = class_weights(s)
    pos_feat = np.concatenate([theta, y], axis=1)
    neg_feat = np.concatenate(
        [aggregated.reshape(m * s, -1), np.repeat(y, s, axis=0)], axis=1
    )
    features = np.concatenate([pos_feat, neg_feat], axis=0)
    labels = np.concatenate([np.ones(m), np.zeros(m * s)])
    weights = np.concatenate([np.full(m, pos_w), np.full(m * s, neg_w)])
    return features, labels, weights


class Discriminator:
    """Weighted logistic regression on standardized features plus a fixed,
    seeded random cosine-feature expansion.

    The feature map (standardization constants, projection directions,
    phases) is frozen at construction from reference features, so utilities
    are comparable across refits.
    """

    def __init__(self, reference_features: np.ndarray, m_features: int = 64,
                 seed: int = 0, l2: float = 1e-6):
        ref = np.asarray(reference_features, dtype=float)
        self.center = ref.mean(axis=0)
        scale = ref.std(axis=0)
        self.scale = np.where(scale > 1e-12, scale, 1.0)
        self.m_features = int(m_features)
        self.l2 = float(l2)
        rng = np.random.default_rng(seed)
        base = ref.shape[1]
        if self.m_features > 0:
            self.omega = rng.standard_normal((self.m_features, base))
            self.phase = rng.uniform(0.0, 2.0 * np.pi, self.m_features)
        else:
            self.omega = np.zeros((0, base))
            self.phase = np.zeros(0)
        self.beta = None
        self.utility_trace = None

    def transform(self, features: np.ndarray) -> np.ndarray:
        x = (np.asarray(features, dtype=float) - self.center) / self.scale
        cols = [np.ones((x.shape[0], 1)), x]
        if self.m_features > 0:
            cols.append(np.cos(x @ self.omega.T + self.phase))
        return np.concatenate(cols, axis=1)

    def fit(self, features, labels, weights, beta0=None, max_iter=60,
            tol=1e-10):
        """Newton ascent of the weighted log-likelihood; monotone by line
        search. Returns self."""
        x = self.transform(features)
        z = np.asarray(labels, dtype=float)
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        beta = np.zeros(x.shape[1]) if beta0 is None else beta0.copy()
        util = self._utility(x, z, w, beta, total)
        trace = [util]
        for _ in range(max_iter):
            p = expit(x @ beta)
            grad = x.T @ (w * (z - p)) - self.l2 * total * beta
            hess_w = w * p * (1.0 - p) + 1e-12
            hess = (x * hess_w[:, None]).T @ x + self.l2 * total * np.eye(x.shape[1])
            try:
                direction = np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"discriminator Hessian solve failed: {exc}")
            step = 1.0
            improved = False
            for _ in range(40):
                cand = beta + step * direction
                cand_util = self._utility(x, z, w, cand, total)
                if np.isfinite(cand_util) and cand_util > util:
                    beta, new_util = cand, cand_util
                    improved = True
                    break
                step *= 0.5
            if not improved:
                break
            gain = new_util - util
            util = new_util
            trace.append(util)
            if gain < tol:
                break
        self.beta = beta
        self.utility_trace = np.asarray(trace)
        return self

    @staticmethod
    def _utility(x, z, w, beta, total):
        g = x @ beta
        # weighted mean of log f(z | x) with log-sigmoid evaluated stably
        ll = np.where(z > 0.5, -np.logaddexp(0.0, -g), -np.logaddexp(0.0, g))
        return float((w * ll).sum() / total)

    def predict_proba(self, features) -> np.ndarray:
        if self.beta is None:
            raise ConfigurationError("discriminator is not fitted")
        return expit(self.transform(features) @ self.beta)

    def utility(self, features, labels, weights) -> float:
        """Weighted mean log-likelihood; -log 2 when classes are
        indistinguishable."""
        if self.beta is None:
            raise ConfigurationError("discriminator is not fitted")
        x = self.transform(features)
        z = np.asarray(labels, dtype=float)
        w = np.asarray(weights, dtype=float)
        return self._utility(x, z, w, self.beta, w.sum())

    def balanced_accuracy(self, features, labels) -> float:
        p = self.predict_proba(features)
        z = np.asarray(labels) > 0.5
        tpr = float(np.mean(p[z] > 0.5)) if z.any() else np.nan
        tnr = float(np.mean(p[~z] <= 0.5)) if (~z).any() else np.nan
        return 0.5 * (tpr + tnr)


@dataclass(frozen=True)
class SampleFitOptions:
    outer_steps: int = 200
    outer_step: float = 0.05
    tol_utility: float = 0.01
    patience: int = 10
    m_features: int = 64
    l2: float = 1e-6
    seed: int = 0
    fit_split: str = "validation"
    init: object = "auto"   # "auto", "uniform", or an AffineAggregator


@dataclass
class SampleFit:
    aggregator: AffineAggregator
    utility_trace: np.ndarray
    converged: bool
    n_outer: int
    diagnostics: dict = field(default_factory=dict)


def first_moment_fit(table: SimulationTable, ensemble: PosteriorEnsemble,
                     subset=None) -> AffineAggregator:
    """Least-squares fit of the aggregated mean to theta (min-norm solution).

    Cheap first-moment-only variant, usable standalone or as an
    initialization for the minimax fit.
    """
    rows = np.arange(table.n_sims) if subset is None else np.asarray(subset)
    mu = ensemble.draws[:, rows].mean(axis=2)            # (K, M, d)
    k, m, d = mu.shape
    design = np.concatenate(
        [np.ones((m, 1)), np.moveaxis(mu, 0, 1).reshape(m, k * d)], axis=1
    )
    coef, *_ = np.linalg.lstsq(design, table.theta[rows], rcond=None)
    w0 = coef[0]
    w = coef[1:].reshape(k, d, d).transpose(0, 2, 1)
    return AffineAggregator(w0=w0, w=w)


def fit_sample_stacking(table: SimulationTable, ensemble: PosteriorEnsemble,
                        options: SampleFitOptions = None) -> SampleFit:
    """Minimax fit of the affine aggregation map.

    Alternates a full inner discriminator fit (convex, Newton, warm-started)
    with a backtracked gradient step on (w0, W) against the inner utility.
    The discriminator's feature map is frozen from the positive examples, so
    inner utilities are comparable across outer steps. Stops early once the
    utility sits within ``tol_utility`` of -log 2 for ``patience``
    consecutive outer states.

    The starting point is chosen among deterministic candidates (uniform
    averaging, the first-moment least-squares pre-fit, and each single
    inference with a mean-matched intercept) by their inner utility, unless
    ``options.init`` provides one explicitly.
    """
    opts = options or SampleFitOptions()
    rows = table.indices(opts.fit_split)
    if rows.size == 0:
        raise ConfigurationError("no rows with the requested split label")
    k, d = ensemble.n_inferences, ensemble.d
    draws = ensemble.draws[:, rows]                      # (K, M, S, d)
    theta, y = table.theta[rows], table.y[rows]
    m, s = rows.size, ensemble.n_draws
    pos_w, neg_w = class_weights(s)

    pos_feat = np.concatenate([theta, y], axis=1)
    labels = np.concatenate([np.ones(m), np.zeros(m * s)])
    weights = np.concatenate([np.full(m, pos_w), np.full(m * s, neg_w)])
    total_weight = weights.sum()
    y_rep = np.repeat(y, s, axis=0)

    disc = Discriminator(pos_feat, m_features=opts.m_features, seed=opts.seed,
                         l2=opts.l2)

    def features_for(agg):
        stacked = np.einsum("kab,kmsb->msa", agg.w, draws) + agg.w0
        neg_feat = np.concatenate([stacked.reshape(m * s, d), y_rep], axis=1)
        return np.concatenate([pos_feat, neg_feat], axis=0)

    def inner_solve(agg, beta0=None):
        feats = features_for(agg)
        disc.fit(feats, labels, weights, beta0=beta0)
        return disc.utility(feats, labels, weights), feats

    candidates = _initial_candidates(opts.init, table, ensemble, rows, k, d, theta,
                                     draws)
    best_agg, best_util, best_name = None, np.inf, None
    for name, agg in candidates:
        util, _ = inner_solve(agg)
        if util < best_util:
            best_agg, best_util, best_name = agg, util, name
    agg, util = best_agg, best_util
    util, feats = inner_solve(agg)
    beta = disc.beta

    trace = [util]
    calm = 1 if abs(util + LOG2) < opts.tol_utility else 0
    converged = calm >= opts.patience
    n_outer = 0
    for n_outer in range(1, opts.outer_steps + 1):
        if calm >= opts.patience:
            converged = True
            break
        grad_w0, grad_w = _aggregator_gradient(
            disc, beta, feats, labels, weights, total_weight, draws, m, s, d
        )
        step = opts.outer_step
        accepted = False
        for _ in range(25):
            cand = AffineAggregator(
                w0=agg.w0 - step * grad_w0, w=agg.w - step * grad_w
            )
            cand_util, cand_feats = inner_solve(cand, beta0=beta)
            if np.isfinite(cand_util) and cand_util < util:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        agg, util, feats, beta = cand, cand_util, cand_feats, disc.beta
        trace.append(util)
        calm = calm + 1 if abs(util + LOG2) < opts.tol_utility else 0
    if calm >= opts.patience:
        converged = True

    final_acc = disc.balanced_accuracy(feats, labels)
    return SampleFit(
        aggregator=agg,
        utility_trace=np.asarray(trace),
        converged=converged,
        n_outer=n_outer,
        diagnostics={
            "init": best_name,
            "final_utility": float(util),
            "balanced_accuracy_fit": float(final_acc),
            "m_features": opts.m_features,
            "second_moment_blind": opts.m_features == 0,
            "fit_rows": int(m),
        },
    )


def _initial_candidates(init, table, ensemble, rows, k, d, theta, draws):
    if isinstance(init, AffineAggregator):
        return [("explicit", init)]
    if init == "uniform":
        return [("uniform", AffineAggregator.uniform(k, d))]
    if init != "auto":
        raise ConfigurationError(f"unknown init {init!r}")
    candidates = [
        ("uniform", AffineAggregator.uniform(k, d)),
        ("first-moment", first_moment_fit(table, ensemble, subset=rows)),
    ]
    mu = draws.mean(axis=2)                              # (K, M, d)
    for idx in range(k):
        w0 = (theta - mu[idx]).mean(axis=0)
        candidates.append(
            (f"single-{idx}", AffineAggregator.single(k, d, idx, w0=w0))
        )
    return candidates


def _aggregator_gradient(disc, beta, feats, labels, weights, total_weight,
                         draws, m, s, d):
    """Envelope gradient of the inner utility in (w0, W) through the
    negative examples' aggregated draws."""
    x = disc.transform(feats)
    p = expit(x @ beta)
    neg = slice(m, None)
    # d utility / d g for negatives: weight * (-p) / total
    dg = (weights[neg] * (-p[neg])) / total_weight      # (M*S,)
    # d g / d theta*: linear block plus cosine features
    base_dim = disc.center.size
    beta_lin = beta[1 : 1 + base_dim][:d]               # theta comes first
    dtheta = np.tile(beta_lin / disc.scale[:d], (m * s, 1))
    if disc.m_features > 0:
        x_std = (feats[neg] - disc.center) / disc.scale
        sin_part = np.sin(x_std @ disc.omega.T + disc.phase)
        beta_rff = beta[1 + base_dim :]
        proj = disc.omega[:, :d] / disc.scale[None, :d]
        dtheta = dtheta - (sin_part * beta_rff[None, :]) @ proj
    grad_theta = (dg[:, None] * dtheta).reshape(m, s, d)
    grad_w0 = grad_theta.sum(axis=(0, 1))
    grad_w = np.einsum("msa,kmsb->kab", grad_theta, draws)
    return grad_w0, grad_w


def discriminative_gap(table: SimulationTable, aggregated: np.ndarray,
                       subset=None, seed: int = 0, m_features: int = 64):
    """Train a fresh discriminator on half the rows; report held-out
    (utility, balanced accuracy).

    Utility near -log 2 and accuracy near 1/2 indicate the aggregated draws
    are indistinguishable from true posterior draws.
    """
    rows = np.arange(table.n_sims) if subset is None else np.asarray(subset)
    if rows.size < 50:
        raise EvaluationError(
            f"need at least 50 rows to estimate the discriminative gap, "
            f"got {rows.size}"
        )
    if aggregated.shape[0] != rows.size:
        raise DimensionError("aggregated draws do not cover the subset rows")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(rows.size)
    half = rows.size // 2
    train_idx, eval_idx = perm[:half], perm[half:]

    feats_tr, labels_tr, w_tr = build_classification_set(
        table, aggregated[train_idx], subset=rows[train_idx]
    )
    feats_ev, labels_ev, w_ev = build_classification_set(
        table, aggregated[eval_idx], subset=rows[eval_idx]
    )
    pos_tr = feats_tr[: train_idx.size]
    disc = Discriminator(pos_tr, m_features=m_features, seed=seed)
    disc.fit(feats_tr, labels_tr, w_tr)
    utility = disc.utility(feats_ev, labels_ev, w_ev)
    accuracy = disc.balanced_accuracy(feats_ev, labels_ev)
    return float(utility), float(accuracy)
