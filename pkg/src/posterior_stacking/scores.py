"""Scoring rules and divergence estimators optimized by the stackers.

Every score here is negative-oriented: lower is better. All functions are
pure and safe to evaluate concurrently on shared inputs.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .ensemble import SimplexWeights
from .errors import (
    ConfigurationError,
    DimensionError,
    DomainError,
    NumericalError,
    ParameterError,
)

#: Objective tags accepted by :class:`HybridSpec`.
COMPONENT_TAGS = ("log_score", "rank_distance", "rank_mean", "rank_log", "moment")


@dataclass(frozen=True)
class SmoothingConfig:
    """Length scales for the smooth step function used in place of indicators.

    ``tau_rank`` is the absolute smoothing scale for rank-valued arguments
    (which live on [0, 1]); interval smoothing uses the minimum observed
    interval width divided by ``tau_interval_divisor``.
    """

    tau_rank: float = 1.0 / 100.0
    tau_interval_divisor: float = 1000.0

    def __post_init__(self):
        if not (self.tau_rank > 0 and self.tau_interval_divisor > 0):
            raise ParameterError("smoothing scales must be positive")


@dataclass(frozen=True)
class HybridSpec:
    """A nonnegative-weighted sum of scoring components.

    Each component is a ``(tag, multiplier)`` pair; all component values are
    negative-oriented so the composite is minimized.
    """

    components: tuple

    def __post_init__(self):
        comps = tuple((str(tag), float(lam)) for tag, lam in self.components)
        if not comps:
            raise ParameterError("need at least one objective component")
        for tag, lam in comps:
            if tag not in COMPONENT_TAGS:
                raise ParameterError(
                    f"unknown objective tag {tag!r}; expected one of {COMPONENT_TAGS}"
                )
            if not np.isfinite(lam) or lam < 0:
                raise ParameterError(f"multiplier for {tag!r} must be finite and >= 0")
        object.__setattr__(self, "components", comps)

    @property
    def tags(self) -> tuple:
        return tuple(tag for tag, _ in self.components)

    def needs_log_q(self) -> bool:
        return "log_score" in self.tags

    def needs_ranks(self) -> bool:
        return any(t in self.tags for t in ("rank_distance", "rank_mean", "rank_log"))

    def needs_moments(self) -> bool:
        return "moment" in self.tags

    @classmethod
    def log_score(cls) -> "HybridSpec":
        return cls((("log_score", 1.0),))

    @classmethod
    def rank_distance(cls) -> "HybridSpec":
        return cls((("rank_distance", 1.0),))

    @classmethod
    def moment(cls) -> "HybridSpec":
        return cls((("moment", 1.0),))

    @classmethod
    def hybrid(cls, lambda_rank: float = 100.0) -> "HybridSpec":
        """Log score plus rank-moment penalties, each weighted ``lambda_rank``."""
        return cls(
            (
                ("log_score", 1.0),
                ("rank_log", float(lambda_rank)),
                ("rank_mean", float(lambda_rank)),
            )
        )


def hybrid_score(spec: HybridSpec, component_values) -> float:
    """Weighted sum of per-component values, matched by position."""
    values = np.asarray(component_values, dtype=float)
    if values.shape != (len(spec.components),):
        raise DimensionError(
            f"expected {len(spec.components)} component values, got {values.shape}"
        )
    if not np.all(np.isfinite(values)):
        raise NumericalError("component values must be finite")
    lams = np.array([lam for _, lam in spec.components])
    return float(lams @ values)


def smooth_heaviside(x, tau: float):
    """Logistic step approximation 1 / (1 + exp(-2 x / tau)).

    Monotone increasing with value 1/2 at zero; tau is the transition
    length scale.
    """
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    return expit(2.0 * np.asarray(x, dtype=float) / tau)


def _smooth_heaviside_deriv(x, tau: float):
    h = expit(2.0 * np.asarray(x, dtype=float) / tau)
    return (2.0 / tau) * h * (1.0 - h)


def log_score(weights: SimplexWeights, log_q_at_theta, subset=None,
              return_grad: bool = False):
    """Negative mean log density of the weighted mixture.

    Returns -(1/M) sum_n log( sum_k w_k exp(log_q[k, n]) ) over the selected
    rows, computed with a per-row max shift. Rows whose entries are all -inf
    carry no information about the weights and are skipped with a warning.

    With ``return_grad=True`` also returns the analytic gradient in w.
    """
    log_q = np.asarray(log_q_at_theta, dtype=float)
    if log_q.ndim != 2:
        raise DimensionError(f"log_q_at_theta must be (K, N), got {log_q.shape}")
    w = weights.w
    if w.size != log_q.shape[0]:
        raise DimensionError(
            f"{w.size} weights for {log_q.shape[0]} inference rows of log_q"
        )
    if subset is not None:
        log_q = log_q[:, subset]
    shift = np.max(log_q, axis=0)
    usable = np.isfinite(shift)
    n_skipped = int(log_q.shape[1] - usable.sum())
    if n_skipped:
        warnings.warn(
            f"{n_skipped} row(s) with all-(-inf) log densities skipped",
            stacklevel=2,
        )
        log_q = log_q[:, usable]
        shift = shift[usable]
    if log_q.shape[1] == 0:
        raise ConfigurationError("no usable rows for the log score")
    scaled = np.exp(log_q - shift[None, :])
    mix = w @ scaled
    with np.errstate(divide="ignore"):
        value = -float(np.mean(np.log(mix) + shift))
    if not return_grad:
        return value
    safe = np.where(mix > 0, mix, 1.0)
    grad = -(scaled / safe[None, :]).mean(axis=1)
    return value, grad


def rank_cvm_distance(ranks, method: str = "sorted") -> float:
    """Squared distance between the empirical CDF of ranks and the uniform CDF.

    Uses the closed form mean(r^2) - (1/N^2) sum_{i,j} max(r_i, r_j) + 1/3.
    ``method="sorted"`` evaluates the pair sum in O(N log N) via the sorted
    prefix identity; ``method="pairwise"`` is the O(N^2) reference.
    """
    r = np.asarray(ranks, dtype=float).ravel()
    if r.size < 1:
        raise DimensionError("need at least one rank")
    if np.any(r < 0) or np.any(r > 1) or not np.all(np.isfinite(r)):
        raise DomainError("ranks must lie in [0, 1]")
    n = r.size
    if method == "sorted":
        r_sorted = np.sort(r)
        coef = 2.0 * np.arange(1, n + 1) - 1.0
        pair_sum = float(coef @ r_sorted)
    elif method == "pairwise":
        pair_sum = float(np.maximum.outer(r, r).sum())
    else:
        raise ParameterError(f"unknown method {method!r}")
    return float(np.mean(r**2) - pair_sum / n**2 + 1.0 / 3.0)


def rank_cvm_grad(ranks):
    """Value and subgradient of :func:`rank_cvm_distance` in the ranks.

    At tied ranks the pair-sum term is non-smooth; the subgradient breaks
    ties by original index order (stable sort).
    """
    r = np.asarray(ranks, dtype=float).ravel()
    n = r.size
    order = np.argsort(r, kind="stable")
    positions = np.empty(n, dtype=float)
    positions[order] = np.arange(1, n + 1)
    r_sorted = r[order]
    coef = 2.0 * np.arange(1, n + 1) - 1.0
    value = float(np.mean(r**2) - (coef @ r_sorted) / n**2 + 1.0 / 3.0)
    grad = 2.0 * r / n - (2.0 * positions - 1.0) / n**2
    return value, grad


def rank_moment_penalties(mixed_ranks, log_floor: float = None):
    """Squared deviations of the rank mean from 1/2 and of the mean log rank
    from -1 (the uniform-distribution values).

    Zero ranks are floored before the log; with ``log_floor=None`` the floor
    is half the smallest positive rank present (fits pass 1/(2S) explicitly).
    """
    r = np.asarray(mixed_ranks, dtype=float).ravel()
    if r.size < 1:
        raise DimensionError("need at least one rank")
    mean_penalty = float((r.mean() - 0.5) ** 2)
    if log_floor is None:
        positive = r[r > 0]
        log_floor = 0.5 * positive.min() if positive.size else 1e-12
    floored = np.maximum(r, log_floor)
    log_penalty = float((np.mean(np.log(floored)) + 1.0) ** 2)
    return mean_penalty, log_penalty


def rank_moment_penalty_grads(mixed_ranks, log_floor: float):
    """Values and gradients of both rank-moment penalties in the ranks."""
    r = np.asarray(mixed_ranks, dtype=float).ravel()
    n = r.size
    mean_dev = r.mean() - 0.5
    mean_penalty = float(mean_dev**2)
    mean_grad = np.full(n, 2.0 * mean_dev / n)
    floored = np.maximum(r, log_floor)
    log_dev = np.mean(np.log(floored)) + 1.0
    log_penalty = float(log_dev**2)
    log_grad = np.where(r > log_floor, 2.0 * log_dev / (n * floored), 0.0)
    return mean_penalty, mean_grad, log_penalty, log_grad


def interval_score(lo, hi, theta, alpha: float, smooth: bool = False,
                   tau: float = None):
    """Interval width plus (2/alpha)-weighted one-sided miss penalties.

    With ``smooth=True`` the miss indicators are replaced by the logistic
    step with scale ``tau`` so the score is differentiable in (lo, hi).
    Broadcasts over array inputs; scalar inputs give a scalar.
    """
    if not (0.0 < alpha < 1.0):
        raise ParameterError(f"alpha must be in (0, 1), got {alpha}")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    penalty = 2.0 / alpha
    below = lo - theta
    above = theta - hi
    if smooth:
        if tau is None or tau <= 0:
            raise ParameterError("smooth interval score needs tau > 0")
        ind_below = smooth_heaviside(below, tau)
        ind_above = smooth_heaviside(above, tau)
    else:
        ind_below = (below > 0).astype(float)
        ind_above = (above > 0).astype(float)
    value = (hi - lo) + penalty * below * ind_below + penalty * above * ind_above
    return value if value.ndim else float(value)


def interval_score_grad(lo, hi, theta, alpha: float, tau: float):
    """Smooth interval score with its partial derivatives in (lo, hi)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    penalty = 2.0 / alpha
    below = lo - theta
    above = theta - hi
    h_below = smooth_heaviside(below, tau)
    h_above = smooth_heaviside(above, tau)
    dh_below = _smooth_heaviside_deriv(below, tau)
    dh_above = _smooth_heaviside_deriv(above, tau)
    value = (hi - lo) + penalty * below * h_below + penalty * above * h_above
    d_lo = -1.0 + penalty * (h_below + below * dh_below)
    d_hi = 1.0 - penalty * (h_above + above * dh_above)
    return value, d_lo, d_hi


def moment_score(mu_star, v_star, theta) -> float:
    """log det V* + squared Mahalanobis distance of theta from mu* under V*.

    V* must be symmetric positive definite (callers apply the covariance
    ridge upstream).
    """
    mu = np.atleast_1d(np.asarray(mu_star, dtype=float))
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    v = np.atleast_2d(np.asarray(v_star, dtype=float))
    try:
        chol = np.linalg.cholesky(v)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance not positive definite: {exc}") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    z = np.linalg.solve(chol, mu - th)
    return logdet + float(z @ z)


def moment_scores_batch(means, covs, theta):
    """Moment score per row for batched (M, d) means, (M, d, d) covariances.

    Raises :class:`NumericalError` naming the first offending row if any
    covariance fails to factor.
    """
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    theta = np.asarray(theta, dtype=float)
    try:
        chol = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        for n in range(covs.shape[0]):
            try:
                np.linalg.cholesky(covs[n])
            except np.linalg.LinAlgError:
                raise NumericalError(
                    f"covariance factorization failed at row n={n}"
                ) from None
        raise
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    diff = means - theta
    z = np.linalg.solve(chol, diff[..., None])[..., 0]
    return logdet + np.sum(z**2, axis=-1)
