"""Core containers for simulation tables and posterior ensembles,
plus the derived summary statistics (ranks, moments, central intervals)
that every stacking objective consumes."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError

SPLIT_LABELS = ("train", "validation", "test")

# Relative ridge applied to degenerate sample covariances so that
# log-det / inverse based scores stay finite.
COV_RIDGE_REL = 1e-8


def _as_float(x, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must have {ndim} dims, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class SimulationTable:
    """Paired parameter/data draws with per-row split labels.

    Parameters
    ----------
    theta : (N, d) array
        One exact posterior draw per row (the prior draw that generated y).
    y : (N, d_y) array
        Simulated data records.
    split : (N,) array of str, optional
        Row labels in {"train", "validation", "test"}. Defaults to all
        "validation" (stacking fits on validation rows).
    """

    theta: np.ndarray
    y: np.ndarray
    split: np.ndarray = None

    def __post_init__(self):
        theta = _as_float(self.theta, "theta", 2)
        y = _as_float(self.y, "y", 2)
        if theta.shape[0] != y.shape[0]:
            raise DimensionError(
                f"theta has {theta.shape[0]} rows but y has {y.shape[0]}"
            )
        if theta.shape[0] < 1 or theta.shape[1] < 1 or y.shape[1] < 1:
            raise DimensionError("need N >= 1, d >= 1, d_y >= 1")
        if self.split is None:
            split = np.full(theta.shape[0], "validation", dtype="<U10")
        else:
            split = np.asarray(self.split, dtype="<U10")
            if split.shape != (theta.shape[0],):
                raise DimensionError("split must be a length-N label vector")
            bad = ~np.isin(split, SPLIT_LABELS)
            if bad.any():
                raise ParameterError(
                    f"unknown split label(s) {sorted(set(split[bad]))}; "
                    f"expected one of {SPLIT_LABELS}"
                )
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "split", split)

    @property
    def n_sims(self) -> int:
        return self.theta.shape[0]

    @property
    def d(self) -> int:
        return self.theta.shape[1]

    @property
    def d_y(self) -> int:
        return self.y.shape[1]

    def indices(self, label: str) -> np.ndarray:
        """Row indices carrying the given split label."""
        if label not in SPLIT_LABELS:
            raise ParameterError(f"unknown split label {label!r}")
        return np.flatnonzero(self.split == label)


@dataclass(frozen=True)
class PosteriorEnsemble:
    """Per-inference posterior draws and optional log-densities.

    Parameters
    ----------
    draws : (K, N, S, d) array
        S posterior draws from inference k for simulation row n.
    log_q_at_theta : (K, N) array, optional
        log q_k(theta_n | y_n), required only by log-score objectives.
    """

    draws: np.ndarray
    log_q_at_theta: np.ndarray = None

    def __post_init__(self):
        draws = np.asarray(self.draws, dtype=float)
        if draws.ndim != 4:
            raise DimensionError(f"draws must be (K, N, S, d), got {draws.shape}")
        k, n, s, d = draws.shape
        if k < 1 or n < 1 or d < 1:
            raise DimensionError("need K >= 1, N >= 1, d >= 1")
        if s < 2:
            raise DimensionError(f"need S >= 2 draws per inference, got {s}")
        log_q = self.log_q_at_theta
        if log_q is not None:
            log_q = np.asarray(log_q, dtype=float)
            if log_q.shape != (k, n):
                raise DimensionError(
                    f"log_q_at_theta must be (K, N) = {(k, n)}, got {log_q.shape}"
                )
        object.__setattr__(self, "draws", draws)
        object.__setattr__(self, "log_q_at_theta", log_q)

    @property
    def n_inferences(self) -> int:
        return self.draws.shape[0]

    @property
    def n_sims(self) -> int:
        return self.draws.shape[1]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[2]

    @property
    def d(self) -> int:
        return self.draws.shape[3]


@dataclass(frozen=True)
class SimplexWeights:
    """Nonnegative weights over K inferences, renormalized to sum to one."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 1 or w.size < 1:
            raise DimensionError("weights must be a nonempty vector")
        if not np.all(np.isfinite(w)):
            raise ParameterError("weights must be finite")
        if np.any(w < -1e-12):
            raise ParameterError(f"weights must be nonnegative, got {w}")
        w = np.maximum(w, 0.0)
        total = w.sum()
        if total <= 0.0:
            raise ParameterError("weights must have positive sum")
        object.__setattr__(self, "w", w / total)

    @property
    def k(self) -> int:
        return self.w.size

    @classmethod
    def uniform(cls, k: int) -> "SimplexWeights":
        return cls(np.full(k, 1.0 / k))

    @classmethod
    def vertex(cls, k: int, index: int) -> "SimplexWeights":
        w = np.zeros(k)
        w[index] = 1.0
        return cls(w)


@dataclass(frozen=True)
class RankTable:
    """Per-dimension marginal ranks of theta_n within each inference's draws.

    Entries live on the grid {0, 1/S, ..., 1}.
    """

    ranks: np.ndarray  # (K, N, d)
    n_draws: int

    @property
    def grid_step(self) -> float:
        return 1.0 / self.n_draws


@dataclass(frozen=True)
class MomentSummary:
    """Sample means and covariances (divisor S) of each inference's draws."""

    means: np.ndarray        # (K, N, d)
    covariances: np.ndarray  # (K, N, d, d)


@dataclass(frozen=True)
class IntervalTable:
    """Per-dimension central interval endpoints at miscoverage level alpha."""

    alpha: float
    lo: np.ndarray  # (K, N, d)
    hi: np.ndarray  # (K, N, d)


def compute_ranks(table: SimulationTable, ensemble: PosteriorEnsemble) -> RankTable:
    """Fraction of draws at or below theta_n, per inference and dimension.

    The comparison is non-strict, so ties count toward the rank.
    """
    if ensemble.n_sims != table.n_sims:
        raise DimensionError(
            f"table has {table.n_sims} rows, ensemble has {ensemble.n_sims}"
        )
    if ensemble.d != table.d:
        raise DimensionError(f"table d={table.d} but ensemble d={ensemble.d}")
    below = ensemble.draws <= table.theta[None, :, None, :]
    ranks = below.sum(axis=2) / float(ensemble.n_draws)
    return RankTable(ranks=ranks, n_draws=ensemble.n_draws)


def compute_moments(ensemble: PosteriorEnsemble) -> MomentSummary:
    """Sample mean and divisor-S covariance of each (k, n) draw set.

    Covariance eigenvalues are clamped from below at a relative ridge so
    that downstream log-det / inverse computations stay well posed.
    """
    draws = ensemble.draws
    s = ensemble.n_draws
    means = draws.mean(axis=2)
    centered = draws - means[:, :, None, :]
    covs = np.einsum("knsa,knsb->knab", centered, centered) / float(s)
    d = ensemble.d
    trace = np.trace(covs, axis1=-2, axis2=-1)
    ridge = COV_RIDGE_REL * (1.0 + trace / d)
    if d == 1:
        covs = np.maximum(covs, ridge[..., None, None])
    else:
        eigval, eigvec = np.linalg.eigh(covs)
        eigval = np.maximum(eigval, ridge[..., None])
        covs = np.einsum("knab,knb,kncb->knac", eigvec, eigval, eigvec)
        covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    return MomentSummary(means=means, covariances=covs)


def compute_intervals(ensemble: PosteriorEnsemble, alpha: float) -> IntervalTable:
    """Central interval endpoints from the alpha/2 and 1-alpha/2 empirical
    quantiles, using linear interpolation of order statistics."""
    if not (0.0 < alpha < 1.0):
        raise ParameterError(f"alpha must be in (0, 1), got {alpha}")
    s = ensemble.n_draws
    if s * alpha / 2.0 < 1.0:
        warnings.warn(
            f"alpha={alpha} is extreme for S={s} draws; endpoints will clamp "
            "to the sample range",
            stacklevel=2,
        )
    qs = np.quantile(ensemble.draws, [alpha / 2.0, 1.0 - alpha / 2.0], axis=2)
    return IntervalTable(alpha=float(alpha), lo=qs[0], hi=qs[1])


@dataclass
class ValidationReport:
    """Plain-text list of invariant violations found in a table/ensemble pair."""

    issues: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def __str__(self) -> str:
        if self.ok:
            return "no issues found"
        return "\n".join(self.issues)


def _report_nonfinite(report, arr, fmt, limit=50):
    bad = np.argwhere(~np.isfinite(arr))
    for coords in bad[:limit]:
        report.issues.append(fmt(*coords))
    if len(bad) > limit:
        report.issues.append(f"... and {len(bad) - limit} more non-finite entries")


def validate(table: SimulationTable, ensemble: PosteriorEnsemble) -> ValidationReport:
    """Report every invariant violation with its coordinates.

    Never raises; an empty report means the inputs are valid.
    """
    report = ValidationReport()
    if ensemble.n_sims != table.n_sims:
        report.issues.append(
            f"row count mismatch: table N={table.n_sims}, ensemble N={ensemble.n_sims}"
        )
    if ensemble.d != table.d:
        report.issues.append(
            f"parameter dimension mismatch: table d={table.d}, ensemble d={ensemble.d}"
        )
    _report_nonfinite(
        report, table.theta, lambda n, j: f"non-finite theta at (n={n}, dim={j})"
    )
    _report_nonfinite(
        report, table.y, lambda n, j: f"non-finite y at (n={n}, dim={j})"
    )
    _report_nonfinite(
        report,
        ensemble.draws,
        lambda k, n, s, j: f"non-finite draw at (k={k}, n={n}, s={s}, dim={j})",
    )
    if ensemble.log_q_at_theta is not None:
        _report_nonfinite(
            report,
            ensemble.log_q_at_theta,
            lambda k, n: f"non-finite log_q_at_theta at (k={k}, n={n})",
        )
    return report
