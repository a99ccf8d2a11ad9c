"""Analytic Gaussian scenarios and brute-force oracles.

A scenario fixes the joint law p(theta, y) as y ~ N(0, 1) and
theta | y ~ a mixture of N(y + offset, sd^2) components, together with K
Gaussian conditional inferences q_k = N(y + offset_k, sd_k^2). Everything
about such a scenario (densities, quantiles, moments, KL divergences) is
known exactly, which makes it the reference point for tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .ensemble import PosteriorEnsemble, SimulationTable
from .errors import ParameterError
from .simplex import simplex_grid

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianComponent:
    """One conditional component theta | y ~ N(y + offset, sd^2)."""

    offset: float
    sd: float
    weight: float = 1.0

    def __post_init__(self):
        if self.sd <= 0:
            raise ParameterError(f"sd must be positive, got {self.sd}")
        if self.weight <= 0:
            raise ParameterError(f"weight must be positive, got {self.weight}")


@dataclass(frozen=True)
class GaussianScenario:
    """A fully analytic truth/inference ensemble for a scalar parameter."""

    truth: tuple            # mixture components of the true posterior
    inferences: tuple       # one GaussianComponent per inference k
    n_sims: int = 1000
    n_draws: int = 100
    seed: int = 0
    split_fractions: tuple = (0.0, 0.8, 0.2)

    def __post_init__(self):
        truth = tuple(self.truth)
        inferences = tuple(self.inferences)
        if not truth or not inferences:
            raise ParameterError("need at least one truth component and one inference")
        fr = tuple(float(f) for f in self.split_fractions)
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ParameterError("split_fractions must be 3 nonnegative values summing to 1")
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "inferences", inferences)
        object.__setattr__(self, "split_fractions", fr)

    @property
    def truth_weights(self) -> np.ndarray:
        w = np.array([c.weight for c in self.truth])
        return w / w.sum()

    @property
    def n_inferences(self) -> int:
        return len(self.inferences)

    def to_dict(self) -> dict:
        return {
            "truth": [[c.offset, c.sd, c.weight] for c in self.truth],
            "inferences": [[c.offset, c.sd] for c in self.inferences],
            "n_sims": self.n_sims,
            "n_draws": self.n_draws,
            "seed": self.seed,
            "split_fractions": list(self.split_fractions),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianScenario":
        return cls(
            truth=tuple(GaussianComponent(o, s, w) for o, s, w in data["truth"]),
            inferences=tuple(GaussianComponent(o, s) for o, s in data["inferences"]),
            n_sims=int(data["n_sims"]),
            n_draws=int(data["n_draws"]),
            seed=int(data["seed"]),
            split_fractions=tuple(data.get("split_fractions", (0.0, 0.8, 0.2))),
        )


#: Named scenarios reachable from the command line.
SCENARIOS = {
    # Four inferences around N(y, 1) truth, constructed so their KL
    # divergences to the truth are nearly equal (two biased, one
    # overconfident, one diffuse and biased).
    "equal-kl-quartet": {
        "truth": (GaussianComponent(0.0, 1.0),),
        "inferences": (
            GaussianComponent(1.0, 1.0),
            GaussianComponent(-1.0, 1.0),
            GaussianComponent(0.0, 0.56),
            GaussianComponent(0.5, 2.45),
        ),
    },
    # Bimodal truth whose components are exactly the two inferences, so the
    # optimal mixture weights are (1/2, 1/2).
    "bimodal-pair": {
        "truth": (GaussianComponent(-1.0, 1.0, 0.5), GaussianComponent(1.0, 1.0, 0.5)),
        "inferences": (GaussianComponent(-1.0, 1.0), GaussianComponent(1.0, 1.0)),
    },
    # Same components but 0.3/0.7 truth weights: uniform weighting is
    # strictly suboptimal while the truth stays attainable.
    "skewed-bimodal-pair": {
        "truth": (GaussianComponent(-1.0, 1.0, 0.3), GaussianComponent(1.0, 1.0, 0.7)),
        "inferences": (GaussianComponent(-1.0, 1.0), GaussianComponent(1.0, 1.0)),
    },
    # Two symmetrically biased inferences around an exact N(y, 1) truth.
    "biased-pair": {
        "truth": (GaussianComponent(0.0, 1.0),),
        "inferences": (GaussianComponent(1.0, 1.0), GaussianComponent(-1.0, 1.0)),
    },
    # First inference exact, second biased.
    "calibrated-pair": {
        "truth": (GaussianComponent(0.0, 1.0),),
        "inferences": (GaussianComponent(0.0, 1.0), GaussianComponent(1.0, 1.0)),
    },
}


def scenario_from_name(name: str, n_sims: int, n_draws: int, seed: int,
                       split_fractions=(0.0, 0.8, 0.2)) -> GaussianScenario:
    if name not in SCENARIOS:
        raise ParameterError(
            f"unknown scenario {name!r}; available: {sorted(SCENARIOS)}"
        )
    spec = SCENARIOS[name]
    return GaussianScenario(
        truth=spec["truth"],
        inferences=spec["inferences"],
        n_sims=n_sims,
        n_draws=n_draws,
        seed=seed,
        split_fractions=split_fractions,
    )


def generate(scenario: GaussianScenario):
    """Sample a simulation table and ensemble, with exact log densities.

    Deterministic given the scenario seed. Rows are split into
    train/validation/test blocks by position (rows are exchangeable).
    """
    rng = np.random.default_rng(scenario.seed)
    n, s, k = scenario.n_sims, scenario.n_draws, scenario.n_inferences
    y = rng.standard_normal(n)
    tw = scenario.truth_weights
    offsets = np.array([c.offset for c in scenario.truth])
    sds = np.array([c.sd for c in scenario.truth])
    comp = rng.choice(len(scenario.truth), size=n, p=tw)
    theta = y + offsets[comp] + sds[comp] * rng.standard_normal(n)

    q_off = np.array([c.offset for c in scenario.inferences])
    q_sd = np.array([c.sd for c in scenario.inferences])
    noise = rng.standard_normal((k, n, s))
    draws = y[None, :, None] + q_off[:, None, None] + q_sd[:, None, None] * noise

    resid = (theta[None, :] - y[None, :] - q_off[:, None]) / q_sd[:, None]
    log_q = -0.5 * LOG_2PI - np.log(q_sd)[:, None] - 0.5 * resid**2

    f_train, f_val, _ = scenario.split_fractions
    n_train = int(round(f_train * n))
    n_val = int(round(f_val * n))
    split = np.full(n, "test", dtype="<U10")
    split[:n_train] = "train"
    split[n_train:n_train + n_val] = "validation"

    table = SimulationTable(theta=theta[:, None], y=y[:, None], split=split)
    ensemble = PosteriorEnsemble(draws=draws[..., None], log_q_at_theta=log_q)
    return table, ensemble


def _truth_logpdf(scenario: GaussianScenario, t: np.ndarray) -> np.ndarray:
    """Log density of the centered truth mixture (theta - y)."""
    tw = scenario.truth_weights
    parts = [
        np.log(w) + norm.logpdf(t, loc=c.offset, scale=c.sd)
        for w, c in zip(tw, scenario.truth)
    ]
    return _logsumexp_rows(np.stack(parts))


def _mixture_logpdf(scenario: GaussianScenario, weights: np.ndarray,
                    t: np.ndarray) -> np.ndarray:
    """Log density of the centered weighted inference mixture (theta - y)."""
    parts = []
    for w, c in zip(weights, scenario.inferences):
        if w <= 0:
            continue
        parts.append(np.log(w) + norm.logpdf(t, loc=c.offset, scale=c.sd))
    if not parts:
        return np.full_like(np.asarray(t, dtype=float), -np.inf)
    return _logsumexp_rows(np.stack(parts))


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    shift = np.max(a, axis=0)
    return shift + np.log(np.sum(np.exp(a - shift[None]), axis=0))


def kl_to_truth(scenario: GaussianScenario, weights_or_index,
                n_hermite: int = 201, n_y_nodes: int = 8) -> float:
    """Expected conditional KL from the truth to a weighted inference mixture.

    The inner integral over theta runs per truth component with Gauss-Hermite
    quadrature; the outer average over y uses Gauss-Hermite nodes of the
    standard normal data prior.
    """
    if isinstance(weights_or_index, (int, np.integer)):
        weights = np.zeros(scenario.n_inferences)
        weights[int(weights_or_index)] = 1.0
    else:
        weights = np.asarray(
            getattr(weights_or_index, "w", weights_or_index), dtype=float
        )
        if weights.shape != (scenario.n_inferences,):
            raise ParameterError(
                f"expected {scenario.n_inferences} weights, got shape {weights.shape}"
            )
        weights = weights / weights.sum()

    nodes, wts = np.polynomial.hermite.hermgauss(n_hermite)
    y_nodes, y_wts = np.polynomial.hermite.hermgauss(n_y_nodes)
    y_wts = y_wts / np.sqrt(np.pi)
    tw = scenario.truth_weights

    total = 0.0
    for y_node, y_wt in zip(np.sqrt(2.0) * y_nodes, y_wts):
        # Conditional densities depend on theta - y only, so integrate the
        # centered residual t = theta - y.
        kl_y = 0.0
        for w_c, comp in zip(tw, scenario.truth):
            t = comp.offset + np.sqrt(2.0) * comp.sd * nodes
            integrand = _truth_logpdf(scenario, t) - _mixture_logpdf(
                scenario, weights, t
            )
            kl_y += w_c * float(wts @ integrand) / np.sqrt(np.pi)
        total += y_wt * kl_y
    return float(total)


def gaussian_kl(mu1: float, sd1: float, mu2: float, sd2: float) -> float:
    """Closed-form KL( N(mu1, sd1^2) || N(mu2, sd2^2) )."""
    return float(
        np.log(sd2 / sd1) + (sd1**2 + (mu1 - mu2) ** 2) / (2.0 * sd2**2) - 0.5
    )


def true_quantiles(scenario: GaussianScenario, y, alpha: float):
    """Exact (alpha/2, 1 - alpha/2) quantiles of the true posterior at y."""
    if not (0.0 < alpha < 1.0):
        raise ParameterError(f"alpha must be in (0, 1), got {alpha}")
    y = np.asarray(y, dtype=float)
    tw = scenario.truth_weights
    comps = scenario.truth
    if len(comps) == 1:
        z = norm.ppf(1.0 - alpha / 2.0)
        center = y + comps[0].offset
        return center - z * comps[0].sd, center + z * comps[0].sd

    def centered_cdf(t):
        return float(
            sum(w * norm.cdf(t, loc=c.offset, scale=c.sd) for w, c in zip(tw, comps))
        )

    span = max(abs(c.offset) + 10 * c.sd for c in comps)
    lo_c = brentq(lambda t: centered_cdf(t) - alpha / 2.0, -span, span, xtol=1e-12)
    hi_c = brentq(lambda t: centered_cdf(t) - (1.0 - alpha / 2.0), -span, span,
                  xtol=1e-12)
    return y + lo_c, y + hi_c


def true_moments(scenario: GaussianScenario, y):
    """Exact posterior mean and variance at y (law of total variance)."""
    y = np.asarray(y, dtype=float)
    tw = scenario.truth_weights
    offsets = np.array([c.offset for c in scenario.truth])
    sds = np.array([c.sd for c in scenario.truth])
    mean_off = float(tw @ offsets)
    var = float(tw @ (sds**2 + offsets**2) - mean_off**2)
    return y + mean_off, var


def grid_search_weights(objective, n_components: int, resolution: float):
    """Exhaustive minimization of ``objective(w)`` over the simplex lattice.

    Returns ``(w, value)`` at the best lattice point. Kept deliberately
    brute-force: it is the oracle the iterative fits are checked against.
    """
    if n_components > 4:
        raise ParameterError("grid search supports at most 4 components")
    if resolution < 0.01 - 1e-12:
        raise ParameterError("resolution must be at least 0.01")
    grid = simplex_grid(n_components, resolution)
    best_w, best_value = None, np.inf
    for w in grid:
        value = float(objective(w))
        if value < best_value:
            best_w, best_value = w, value
    return best_w, best_value
