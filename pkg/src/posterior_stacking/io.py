"""Newline-delimited JSON file formats, fit artifacts, and run configuration.

All floats serialize as shortest round-trip decimals (the json module's
default), so save-then-load is exact. File writes are atomic
(write-temp-then-rename).
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .ensemble import (
    PosteriorEnsemble,
    SimplexWeights,
    SimulationTable,
    SPLIT_LABELS,
)
from .errors import ParameterError, SchemaError
from .intervals import IntervalFit
from .mixture import LocalWeightModel, MixtureFit
from .samples import AffineAggregator
from .scores import HybridSpec


def atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_hash(config: dict) -> str:
    """Stable short hash of a JSON-serializable config; key order ignored."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RunConfig:
    """Everything a batch run needs to be reproducible."""

    objective: str = "log"
    lambda_rank: float = 100.0
    alpha: float = 0.1
    seed: int = 0
    train_fraction: float = 0.0
    validation_fraction: float = 0.8
    test_fraction: float = 0.2

    def __post_init__(self):
        total = self.train_fraction + self.validation_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ParameterError(f"split fractions must sum to 1, got {total}")
        if min(self.train_fraction, self.validation_fraction,
               self.test_fraction) < 0:
            raise ParameterError("split fractions must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "lambda_rank": self.lambda_rank,
            "alpha": self.alpha,
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "validation_fraction": self.validation_fraction,
            "test_fraction": self.test_fraction,
        }

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def _parse_lines(path: str):
    with open(path) as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: malformed record: {exc}")


def save_table(table: SimulationTable, path: str) -> None:
    lines = []
    for n in range(table.n_sims):
        lines.append(json.dumps({
            "n": n,
            "theta": table.theta[n].tolist(),
            "y": table.y[n].tolist(),
            "split": str(table.split[n]),
        }))
    atomic_write(path, "\n".join(lines) + "\n")


def load_table(path: str) -> SimulationTable:
    records = {}
    d = d_y = None
    for lineno, rec in _parse_lines(path):
        try:
            n = int(rec["n"])
            theta = rec["theta"]
            y = rec["y"]
            split = rec["split"]
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}:{lineno}: bad table record: {exc}")
        if split not in SPLIT_LABELS:
            raise SchemaError(
                f"{path}:{lineno}: unknown split label {split!r}"
            )
        if d is None:
            d, d_y = len(theta), len(y)
        elif len(theta) != d or len(y) != d_y:
            raise SchemaError(
                f"{path}:{lineno}: inconsistent dimensions "
                f"(expected d={d}, d_y={d_y}, got {len(theta)}, {len(y)})"
            )
        if n in records:
            raise SchemaError(f"{path}:{lineno}: duplicate row index n={n}")
        records[n] = (theta, y, split)
    if not records:
        raise SchemaError(f"{path}: empty table file")
    n_sims = max(records) + 1
    if set(records) != set(range(n_sims)):
        raise SchemaError(f"{path}: row indices are not dense 0..{n_sims - 1}")
    theta = np.array([records[n][0] for n in range(n_sims)])
    y = np.array([records[n][1] for n in range(n_sims)])
    split = np.array([records[n][2] for n in range(n_sims)])
    return SimulationTable(theta=theta, y=y, split=split)


def save_ensemble(ensemble: PosteriorEnsemble, draws_path: str,
                  logq_path: str = None) -> None:
    lines = []
    for k in range(ensemble.n_inferences):
        for n in range(ensemble.n_sims):
            lines.append(json.dumps({
                "k": k, "n": n, "draws": ensemble.draws[k, n].tolist(),
            }))
    atomic_write(draws_path, "\n".join(lines) + "\n")
    if logq_path is not None:
        if ensemble.log_q_at_theta is None:
            raise ParameterError("ensemble has no log_q_at_theta to save")
        lines = []
        for k in range(ensemble.n_inferences):
            for n in range(ensemble.n_sims):
                lines.append(json.dumps({
                    "k": k, "n": n,
                    "logq": float(ensemble.log_q_at_theta[k, n]),
                }))
        atomic_write(logq_path, "\n".join(lines) + "\n")


def load_ensemble(draws_path: str, logq_path: str = None) -> PosteriorEnsemble:
    records = {}
    s = d = None
    for lineno, rec in _parse_lines(draws_path):
        try:
            k, n, draws = int(rec["k"]), int(rec["n"]), rec["draws"]
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{draws_path}:{lineno}: bad draws record: {exc}")
        arr = np.asarray(draws, dtype=float)
        if arr.ndim != 2:
            raise SchemaError(
                f"{draws_path}:{lineno}: draws must be an S x d list"
            )
        if s is None:
            s, d = arr.shape
        elif arr.shape != (s, d):
            raise SchemaError(
                f"{draws_path}:{lineno}: inconsistent draw shape "
                f"(expected S={s}, d={d}, got {arr.shape[0]}, {arr.shape[1]})"
            )
        if (k, n) in records:
            raise SchemaError(f"{draws_path}:{lineno}: duplicate cell (k={k}, n={n})")
        records[(k, n)] = arr
    if not records:
        raise SchemaError(f"{draws_path}: empty draws file")
    n_inf = max(k for k, _ in records) + 1
    n_sims = max(n for _, n in records) + 1
    if set(records) != {(k, n) for k in range(n_inf) for n in range(n_sims)}:
        raise SchemaError(
            f"{draws_path}: (k, n) cells are not dense "
            f"0..{n_inf - 1} x 0..{n_sims - 1}"
        )
    draws = np.empty((n_inf, n_sims, s, d))
    for (k, n), arr in records.items():
        draws[k, n] = arr

    log_q = None
    if logq_path is not None and os.path.exists(logq_path):
        log_q = np.full((n_inf, n_sims), np.nan)
        seen = set()
        for lineno, rec in _parse_lines(logq_path):
            try:
                k, n, value = int(rec["k"]), int(rec["n"]), float(rec["logq"])
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{logq_path}:{lineno}: bad logq record: {exc}")
            if not (0 <= k < n_inf and 0 <= n < n_sims):
                raise SchemaError(
                    f"{logq_path}:{lineno}: cell (k={k}, n={n}) outside the "
                    f"draws grid {n_inf} x {n_sims}"
                )
            seen.add((k, n))
            log_q[k, n] = value
        if len(seen) != n_inf * n_sims:
            raise SchemaError(
                f"{logq_path}: logq records are not dense over the draws grid"
            )
    return PosteriorEnsemble(draws=draws, log_q_at_theta=log_q)


def save_fit(fit, path: str, seed: int = 0, config: dict = None) -> None:
    payload = {"seed": seed, "config_hash": config_hash(config or {})}
    if isinstance(fit, MixtureFit):
        payload["objective"] = list(fit.objective.components)
        payload["converged"] = bool(fit.converged)
        payload["n_iter"] = int(fit.n_iter)
        payload["final_loss"] = float(fit.loss_trace[-1])
        if fit.is_local:
            model = fit.weights
            payload.update({
                "kind": "local-mixture",
                "a": model.a.tolist(),
                "b": model.b.tolist(),
                "center": model.center.tolist(),
                "scale": model.scale.tolist(),
                "feature": model.feature,
            })
        else:
            payload.update({"kind": "mixture", "weights": fit.weights.w.tolist()})
    elif isinstance(fit, IntervalFit):
        payload.update({
            "kind": "interval",
            "alpha": fit.alpha,
            "weights": fit.weights.tolist(),
            "converged": bool(fit.converged),
        })
    elif isinstance(fit, AffineAggregator):
        payload.update({
            "kind": "sample", "w0": fit.w0.tolist(), "w": fit.w.tolist(),
        })
    else:
        raise ParameterError(f"cannot serialize fit of type {type(fit).__name__}")
    atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_fit(path: str):
    with open(path) as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: malformed fit artifact: {exc}")
    kind = payload.get("kind")
    if kind == "mixture":
        return MixtureFit(
            weights=SimplexWeights(np.asarray(payload["weights"])),
            objective=HybridSpec(tuple(map(tuple, payload["objective"]))),
            loss_trace=np.asarray([payload.get("final_loss", np.nan)]),
            converged=bool(payload.get("converged", True)),
            n_iter=int(payload.get("n_iter", 0)),
        )
    if kind == "local-mixture":
        model = LocalWeightModel(
            a=np.asarray(payload["a"]),
            b=np.asarray(payload["b"]),
            center=np.asarray(payload["center"]),
            scale=np.asarray(payload["scale"]),
            feature=payload.get("feature", "standardized-identity"),
        )
        return MixtureFit(
            weights=model,
            objective=HybridSpec(tuple(map(tuple, payload["objective"]))),
            loss_trace=np.asarray([payload.get("final_loss", np.nan)]),
            converged=bool(payload.get("converged", True)),
            n_iter=int(payload.get("n_iter", 0)),
        )
    if kind == "interval":
        weights = np.asarray(payload["weights"])
        return IntervalFit(
            alpha=float(payload["alpha"]),
            weights=weights,
            loss_trace=[],
            exact_loss=np.full(weights.shape[0], np.nan),
            converged=bool(payload.get("converged", True)),
            n_iter=np.zeros(weights.shape[0], dtype=int),
        )
    if kind == "sample":
        return AffineAggregator(
            w0=np.asarray(payload["w0"]), w=np.asarray(payload["w"])
        )
    raise SchemaError(f"{path}: unknown fit kind {kind!r}")


def save_report(report, path: str, config: dict = None) -> None:
    payload = report.to_dict()
    payload["config_hash"] = config_hash(config or {})
    atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def report_csv(reports: dict) -> str:
    """Comparison table (best / uniform / stacked columns) as CSV text."""
    columns = list(reports)
    metrics = [
        "expected_log_pred_density",
        "coverage_error_avg",
        "moment_error",
        "rank_cvm_total",
    ]
    lines = ["metric," + ",".join(columns)]
    for metric in metrics:
        cells = []
        for col in columns:
            value = getattr(reports[col], metric)
            cells.append("" if value is None else repr(float(value)))
        lines.append(f"{metric}," + ",".join(cells))
    return "\n".join(lines) + "\n"
