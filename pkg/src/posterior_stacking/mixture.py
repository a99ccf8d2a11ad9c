"""Fit simplex weights (global or data-local) for the density-mixture form
under log-score, rank, moment, or hybrid objectives."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .ensemble import (
    MomentSummary,
    PosteriorEnsemble,
    RankTable,
    SimplexWeights,
    SimulationTable,
    compute_moments,
    compute_ranks,
)
from .errors import ConfigurationError, DimensionError, NumericalError
from .scores import HybridSpec, rank_cvm_grad, rank_moment_penalty_grads
from .simplex import SimplexOptions, minimize_on_simplex

#: Components that average a per-row score (their natural objective is a sum
#: over simulation rows) versus functionals of the whole rank set (O(1) in
#: the row count). When an objective mixes the two kinds, the rank-component
#: multipliers count once per table, i.e. their pull scales like lambda / M.
_PER_ROW_TAGS = frozenset({"log_score", "moment"})
_RANK_TAGS = frozenset({"rank_distance", "rank_mean", "rank_log"})


def _component_scales(spec: HybridSpec, n_rank_rows: int) -> dict:
    mixes_kinds = any(t in _PER_ROW_TAGS for t in spec.tags)
    return {
        tag: (1.0 / n_rank_rows if (tag in _RANK_TAGS and mixes_kinds) else 1.0)
        for tag in spec.tags
    }


@dataclass(frozen=True)
class FitOptions:
    """Optimizer settings shared by the mixture fitters."""

    step: float = 0.1
    max_iter: int = 2000
    tol_loss: float = 1e-10
    tol_w: float = 1e-8
    fit_split: str = "validation"
    weight_ridge: float = 0.0
    local_ridge: float = 1e-4
    keep_iterates: bool = False
    freeze_coefficients: bool = False


@dataclass(frozen=True)
class LocalWeightModel:
    """Linear-softmax weights over inferences as a function of y.

    The first inference's logit is pinned to zero; for k >= 2 the logit is
    a_k + b_k . phi(y) with phi either raw y or y standardized by the stored
    center/scale. Outputs are a valid simplex point for every y.
    """

    a: np.ndarray        # (K-1,)
    b: np.ndarray        # (K-1, d_y)
    center: np.ndarray   # (d_y,)
    scale: np.ndarray    # (d_y,)
    feature: str = "standardized-identity"

    @property
    def k(self) -> int:
        return self.a.size + 1

    def features(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if self.feature == "identity":
            return y
        return (y - self.center[None, :]) / self.scale[None, :]

    def weights_for(self, y: np.ndarray) -> np.ndarray:
        """Per-row simplex weights, shape (M, K)."""
        phi = self.features(y)
        logits = np.concatenate(
            [np.zeros((phi.shape[0], 1)), self.a[None, :] + phi @ self.b.T], axis=1
        )
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        return expl / expl.sum(axis=1, keepdims=True)


@dataclass
class MixtureFit:
    """Result of a mixture-weight fit."""

    weights: object             # SimplexWeights or LocalWeightModel
    objective: HybridSpec
    loss_trace: np.ndarray
    converged: bool
    n_iter: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def is_local(self) -> bool:
        return isinstance(self.weights, LocalWeightModel)


class _ObjectiveData:
    """Arrays needed by the requested objective, restricted to the fit rows."""

    def __init__(self, table, ensemble, spec, rows):
        if ensemble.n_inferences < 2:
            raise ConfigurationError("stacking needs at least two inferences")
        if rows.size == 0:
            raise ConfigurationError("no rows with the requested split label")
        self.rows = rows
        self.theta = table.theta[rows]
        self.y = table.y[rows]
        self.k = ensemble.n_inferences
        self.d = ensemble.d
        self.n_skipped = 0
        self.log_q = None
        self.ranks = None
        self.log_floor = None
        self.means = None
        self.pair_moments = None

        if spec.needs_log_q():
            if ensemble.log_q_at_theta is None:
                raise ConfigurationError(
                    "objective includes the log score but the ensemble has no "
                    "log_q_at_theta stream"
                )
            log_q = ensemble.log_q_at_theta[:, rows]
            usable = np.isfinite(log_q.max(axis=0))
            self.n_skipped = int(log_q.shape[1] - usable.sum())
            if self.n_skipped:
                warnings.warn(
                    f"{self.n_skipped} fit row(s) with all-(-inf) log densities "
                    "skipped by the log-score component",
                    stacklevel=3,
                )
                log_q = log_q[:, usable]
            if log_q.shape[1] == 0:
                raise ConfigurationError("no usable rows for the log score")
            self.log_q = log_q
            self.log_q_shift = log_q.max(axis=0)
            self.log_q_scaled = np.exp(log_q - self.log_q_shift[None, :])

        if spec.needs_ranks():
            rank_table = compute_ranks(table, ensemble)
            self.ranks = rank_table.ranks[:, rows, :]
            self.log_floor = 0.5 * rank_table.grid_step

        if spec.needs_moments():
            sliced = PosteriorEnsemble(draws=ensemble.draws[:, rows])
            summary = compute_moments(sliced)
            self.means = summary.means
            self.pair_moments = summary.covariances + np.einsum(
                "kma,kmb->kmab", summary.means, summary.means
            )


def _component_values_grads(data: _ObjectiveData, row_weights: np.ndarray,
                            tags) -> dict:
    """Loss value and gradient (in per-row weights, (M, K)) per component tag.

    ``row_weights`` is (M, K); the global fit passes a broadcast copy of the
    same weight vector on every row.
    """
    out = {}
    if "log_score" in tags:
        scaled = data.log_q_scaled                       # (K, M)
        mix = np.einsum("km,mk->m", scaled, row_weights)
        m = mix.size
        with np.errstate(divide="ignore"):
            value = -float(np.mean(np.log(mix) + data.log_q_shift))
        safe = np.where(mix > 0, mix, 1.0)
        grad = -(scaled / safe[None, :]).T / m           # (M, K)
        out["log_score"] = (value, grad)

    if any(t in tags for t in ("rank_distance", "rank_mean", "rank_log")):
        mixed = np.einsum("mk,kmd->md", row_weights, data.ranks)
        dist_val, mean_val, log_val = 0.0, 0.0, 0.0
        dist_g = np.zeros_like(mixed)
        mean_g = np.zeros_like(mixed)
        log_g = np.zeros_like(mixed)
        for j in range(mixed.shape[1]):
            if "rank_distance" in tags:
                v, g = rank_cvm_grad(mixed[:, j])
                dist_val += v
                dist_g[:, j] = g
            if "rank_mean" in tags or "rank_log" in tags:
                mv, mg, lv, lg = rank_moment_penalty_grads(
                    mixed[:, j], data.log_floor
                )
                mean_val += mv
                mean_g[:, j] = mg
                log_val += lv
                log_g[:, j] = lg
        if "rank_distance" in tags:
            out["rank_distance"] = (
                dist_val, np.einsum("md,kmd->mk", dist_g, data.ranks)
            )
        if "rank_mean" in tags:
            out["rank_mean"] = (
                mean_val, np.einsum("md,kmd->mk", mean_g, data.ranks)
            )
        if "rank_log" in tags:
            out["rank_log"] = (
                log_val, np.einsum("md,kmd->mk", log_g, data.ranks)
            )

    if "moment" in tags:
        out["moment"] = _moment_value_grad(data, row_weights)
    return out


def _moment_value_grad(data: _ObjectiveData, row_weights: np.ndarray):
    means, pair = data.means, data.pair_moments         # (K,M,d), (K,M,d,d)
    mu_star = np.einsum("mk,kma->ma", row_weights, means)
    v_star = np.einsum("mk,kmab->mab", row_weights, pair) - np.einsum(
        "ma,mb->mab", mu_star, mu_star
    )
    m = mu_star.shape[0]
    try:
        chol = np.linalg.cholesky(v_star)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"mixture covariance not positive definite: {exc}") from exc
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    e = mu_star - data.theta
    z = np.linalg.solve(chol, e[..., None])[..., 0]
    value = float(np.mean(logdet + np.sum(z**2, axis=-1)))
    # u = V*^{-1} e via the factor; A = V*^{-1}
    u = np.linalg.solve(np.swapaxes(chol, -1, -2), z[..., None])[..., 0]
    eye = np.eye(data.d)
    a_inv = np.linalg.solve(
        np.swapaxes(chol, -1, -2), np.linalg.solve(chol, np.broadcast_to(
            eye, (m, data.d, data.d)).copy())
    )
    tr_ap = np.einsum("mab,kmab->mk", a_inv, pair)
    mu_a_mustar = np.einsum("kma,mab,mb->mk", means, a_inv, mu_star)
    u_mu = np.einsum("kma,ma->mk", means, u)
    u_p_u = np.einsum("ma,kmab,mb->mk", u, pair, u)
    mustar_u = np.einsum("ma,ma->m", mu_star, u)
    grad = (
        tr_ap - 2.0 * mu_a_mustar + 2.0 * u_mu - u_p_u
        + 2.0 * u_mu * mustar_u[:, None]
    ) / m
    return value, grad


def _composite(data: _ObjectiveData, spec: HybridSpec, row_weights: np.ndarray):
    """Total loss and its gradient in the per-row weights."""
    parts = _component_values_grads(data, row_weights, set(spec.tags))
    scales = _component_scales(spec, row_weights.shape[0])
    total = 0.0
    grad = np.zeros_like(row_weights)
    for tag, lam in spec.components:
        value, g = parts[tag]
        total += lam * scales[tag] * value
        grad += lam * scales[tag] * g
    return total, grad


def fit_mixture(table: SimulationTable, ensemble: PosteriorEnsemble,
                objective: HybridSpec, options: FitOptions = None) -> MixtureFit:
    """Fit global simplex weights minimizing the composite objective.

    Runs multiplicative-gradient descent on the simplex from the uniform
    initialization, using the rows labeled by ``options.fit_split``
    (validation by default). Deterministic.

    The log-score and moment components average per-row scores; the rank
    components are functionals of the whole rank set. When an objective
    mixes both kinds, each rank multiplier is divided by the number of fit
    rows so the composite matches the natural sum-over-rows objective at
    every sample size.
    """
    opts = options or FitOptions()
    rows = table.indices(opts.fit_split)
    data = _ObjectiveData(table, ensemble, objective, rows)
    k = data.k
    scales = _component_scales(
        objective, data.ranks.shape[1] if data.ranks is not None else rows.size
    )

    iteration = {"count": 0}

    def loss_and_grad(w):
        iteration["count"] += 1
        # Log-score rows may have been filtered; ranks/moments keep all rows.
        # Each component normalizes by its own row count.
        value_total = 0.0
        grad_total = np.zeros(k)
        for tag, lam in objective.components:
            m = _rows_for_tag(data, tag)
            rw = np.broadcast_to(w, (m, k))
            part = _component_values_grads(data, rw, {tag})[tag]
            value_total += lam * scales[tag] * part[0]
            grad_total += lam * scales[tag] * part[1].sum(axis=0)
        if opts.weight_ridge > 0:
            dev = w - 1.0 / k
            value_total += opts.weight_ridge * float(dev @ dev)
            grad_total += opts.weight_ridge * 2.0 * dev
        if not np.isfinite(value_total) and iteration["count"] == 1:
            raise NumericalError("objective is non-finite at the uniform start")
        return value_total, grad_total

    result = minimize_on_simplex(
        loss_and_grad,
        np.full(k, 1.0 / k),
        SimplexOptions(
            step=opts.step,
            max_iter=opts.max_iter,
            tol_loss=opts.tol_loss,
            tol_w=opts.tol_w,
            keep_iterates=opts.keep_iterates,
        ),
    )
    diagnostics = {
        "fit_rows": int(rows.size),
        "skipped_rows": data.n_skipped,
        "final_loss": float(result.loss_trace[-1]),
    }
    if opts.keep_iterates:
        diagnostics["iterates"] = result.iterates
    return MixtureFit(
        weights=SimplexWeights(result.w),
        objective=objective,
        loss_trace=result.loss_trace,
        converged=result.converged,
        n_iter=result.n_iter,
        diagnostics=diagnostics,
    )


def _rows_for_tag(data: _ObjectiveData, tag: str) -> int:
    if tag == "log_score":
        return data.log_q.shape[1]
    if tag == "moment":
        return data.means.shape[1]
    return data.ranks.shape[1]


def mixed_ranks(weights, rank_table: RankTable, y: np.ndarray = None,
                subset=None) -> np.ndarray:
    """Ranks of the weighted mixture: sum_k w_k r_kn, per dimension.

    Local weight models evaluate w_k(y_n) per row and need ``y``.
    """
    ranks = rank_table.ranks if subset is None else rank_table.ranks[:, subset, :]
    if isinstance(weights, LocalWeightModel):
        if y is None:
            raise ConfigurationError("local weights need y values to mix ranks")
        y = y if subset is None else y[subset]
        row_w = weights.weights_for(y)
        if row_w.shape[0] != ranks.shape[1]:
            raise DimensionError("y rows do not match the rank table")
        return np.einsum("mk,kmd->md", row_w, ranks)
    w = weights.w if isinstance(weights, SimplexWeights) else np.asarray(weights)
    return np.einsum("k,kmd->md", w, ranks)


def mixture_moments(weights, moments: MomentSummary, y: np.ndarray = None,
                    subset=None):
    """Mean and covariance of the weighted mixture per row.

    The covariance follows the law of total variance: the weighted average
    of component covariances plus the weighted spread of component means.
    Returns ``(means (M, d), covariances (M, d, d))``.
    """
    means = moments.means if subset is None else moments.means[:, subset, :]
    covs = (
        moments.covariances if subset is None else moments.covariances[:, subset, :, :]
    )
    if isinstance(weights, LocalWeightModel):
        if y is None:
            raise ConfigurationError("local weights need y values to mix moments")
        y = y if subset is None else y[subset]
        row_w = weights.weights_for(y)
    else:
        w = weights.w if isinstance(weights, SimplexWeights) else np.asarray(weights)
        row_w = np.broadcast_to(w, (means.shape[1], w.size))
    mu_star = np.einsum("mk,kma->ma", row_w, means)
    spread = means - mu_star[None, :, :]
    v_star = np.einsum("mk,kmab->mab", row_w, covs) + np.einsum(
        "mk,kma,kmb->mab", row_w, spread, spread
    )
    return mu_star, v_star


def fit_local_mixture(table: SimulationTable, ensemble: PosteriorEnsemble,
                      objective: HybridSpec,
                      options: FitOptions = None) -> MixtureFit:
    """Fit the linear-softmax local weight model by gradient descent.

    The intercepts start at the softmax pull-back of the global fit and the
    coefficient matrix starts at zero, so the initial point reproduces the
    best global fit. Moment objectives are not supported with local weights.
    """
    opts = options or FitOptions()
    if objective.needs_moments():
        raise ConfigurationError(
            "local weight fitting supports log-score and rank components only"
        )
    rows = table.indices(opts.fit_split)
    data = _ObjectiveData(table, ensemble, objective, rows)
    if data.log_q is not None and data.n_skipped:
        raise ConfigurationError(
            "local fitting requires finite log densities on every fit row"
        )
    k = data.k
    y_fit = data.y
    center = y_fit.mean(axis=0)
    scale = y_fit.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    model0 = LocalWeightModel(
        a=np.zeros(k - 1), b=np.zeros((k - 1, y_fit.shape[1])),
        center=center, scale=scale,
    )
    phi = model0.features(y_fit)                        # (M, d_y)

    global_fit = fit_mixture(table, ensemble, objective, opts)
    w_g = np.maximum(global_fit.weights.w, 1e-8)
    a = np.log(w_g[1:] / w_g[0])
    b = np.zeros((k - 1, phi.shape[1]))

    def unpack(params):
        a_p = params[: k - 1]
        b_p = params[k - 1 :].reshape(k - 1, phi.shape[1])
        return a_p, b_p

    def row_weights(a_p, b_p):
        logits = np.concatenate(
            [np.zeros((phi.shape[0], 1)), a_p[None, :] + phi @ b_p.T], axis=1
        )
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        return expl / expl.sum(axis=1, keepdims=True)

    def loss_and_grad(params):
        a_p, b_p = unpack(params)
        rw = row_weights(a_p, b_p)
        value, grad_w = _composite(data, objective, rw)
        # Softmax chain rule; logit of inference 1 is pinned to zero.
        inner = np.einsum("mk,mk->m", grad_w, rw)
        grad_logits = rw * (grad_w - inner[:, None])
        grad_a = grad_logits[:, 1:].sum(axis=0)
        grad_b = grad_logits[:, 1:].T @ phi
        if opts.local_ridge > 0:
            value += opts.local_ridge * float(np.sum(b_p**2))
            grad_b = grad_b + 2.0 * opts.local_ridge * b_p
        if opts.freeze_coefficients:
            grad_b = np.zeros_like(grad_b)
        return value, np.concatenate([grad_a, grad_b.ravel()])

    params = np.concatenate([a, b.ravel()])
    loss, grad = loss_and_grad(params)
    if not np.isfinite(loss):
        raise NumericalError("local objective is non-finite at the initial point")
    trace = [loss]
    converged = False
    n_iter = 0
    for n_iter in range(1, opts.max_iter + 1):
        step = opts.step
        accepted = False
        for _ in range(40):
            params_new = params - step * grad
            loss_new, grad_new = loss_and_grad(params_new)
            if np.isfinite(loss_new) and loss_new < loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        movement = float(np.max(np.abs(params_new - params)))
        improvement = loss - loss_new
        params, loss, grad = params_new, loss_new, grad_new
        trace.append(loss)
        if improvement < opts.tol_loss or movement < opts.tol_w:
            converged = True
            break
    a_fit, b_fit = unpack(params)
    model = LocalWeightModel(a=a_fit, b=b_fit, center=center, scale=scale)
    return MixtureFit(
        weights=model,
        objective=objective,
        loss_trace=np.asarray(trace),
        converged=converged,
        n_iter=n_iter,
        diagnostics={
            "fit_rows": int(rows.size),
            "skipped_rows": data.n_skipped,
            "final_loss": float(trace[-1]),
            "global_loss": float(global_fit.loss_trace[-1]),
        },
    )
