"""Simplex-constrained minimization: multiplicative (exponentiated) gradient
steps with a Euclidean projected-gradient fallback. Deterministic."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ParameterError


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1} (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, v.size + 1)
    cond = u + (1.0 - css) / idx > 0
    rho = idx[cond][-1]
    lam = (1.0 - css[rho - 1]) / rho
    return np.maximum(v + lam, 0.0)


def simplex_grid(k: int, resolution: float) -> np.ndarray:
    """All lattice points on the simplex with spacing ``resolution``.

    Returns an (n_points, k) array; rows sum to one exactly.
    """
    if k < 1:
        raise ParameterError("need k >= 1")
    m = int(round(1.0 / resolution))
    if m < 1 or abs(m * resolution - 1.0) > 1e-9:
        raise ParameterError(f"resolution {resolution} must divide 1 evenly")
    points = []

    def fill(prefix, remaining, slots):
        if slots == 1:
            points.append(prefix + [remaining])
            return
        for c in range(remaining + 1):
            fill(prefix + [c], remaining - c, slots - 1)

    fill([], m, k)
    return np.asarray(points, dtype=float) / m


@dataclass(frozen=True)
class SimplexOptions:
    """Stopping rules and step size for :func:`minimize_on_simplex`."""

    step: float = 0.1
    max_iter: int = 2000
    tol_loss: float = 1e-10
    tol_w: float = 1e-8
    keep_iterates: bool = False


@dataclass
class SimplexResult:
    w: np.ndarray
    loss_trace: np.ndarray
    converged: bool
    n_iter: int
    iterates: list


def minimize_on_simplex(loss_and_grad, w0: np.ndarray,
                        options: SimplexOptions = None) -> SimplexResult:
    """Minimize a differentiable loss over the probability simplex.

    ``loss_and_grad(w) -> (float, (K,) array)``. Each iteration proposes a
    multiplicative-gradient update w * exp(-step * g), renormalized exactly;
    if backtracking cannot find a decrease along that family, a projected
    Euclidean gradient step is tried before giving up. The recorded loss
    trace is strictly non-increasing.
    """
    opts = options or SimplexOptions()
    w = np.asarray(w0, dtype=float)
    w = w / w.sum()
    loss, grad = loss_and_grad(w)
    if not np.isfinite(loss):
        raise NumericalError("loss is non-finite at the initial point")
    trace = [loss]
    iterates = [w.copy()] if opts.keep_iterates else []
    converged = False
    n_iter = 0
    for n_iter in range(1, opts.max_iter + 1):
        accepted = False
        for propose in (_multiplicative_step, _projected_step):
            step = opts.step
            for _ in range(40):
                w_new = propose(w, grad, step)
                loss_new, grad_new = loss_and_grad(w_new)
                if np.isfinite(loss_new) and loss_new < loss:
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                break
        if not accepted:
            converged = True
            break
        movement = float(np.max(np.abs(w_new - w)))
        improvement = loss - loss_new
        w, loss, grad = w_new, loss_new, grad_new
        trace.append(loss)
        if opts.keep_iterates:
            iterates.append(w.copy())
        if improvement < opts.tol_loss or movement < opts.tol_w:
            converged = True
            break
    return SimplexResult(
        w=w,
        loss_trace=np.asarray(trace),
        converged=converged,
        n_iter=n_iter,
        iterates=iterates,
    )


def _multiplicative_step(w, grad, step):
    scaled = -step * (grad - grad.min())
    w_new = w * np.exp(scaled)
    total = w_new.sum()
    if not np.isfinite(total) or total <= 0:
        return w
    return w_new / total


def _projected_step(w, grad, step):
    return project_to_simplex(w - step * grad)
