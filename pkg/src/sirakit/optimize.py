"""Monotone gradient descent with backtracking, shared by all trainers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptResult:
    theta: np.ndarray
    value: float
    converged: bool
    n_iter: int
    history: list = field(default_factory=list)
    grad_norm: float = np.inf


def gradient_descent(fun, theta0, max_iter=500, tol=1e-6, init_step=0.1,
                     max_backtracks=30, step_growth=1.3):
    """Minimize `fun(theta) -> (value, grad)` with Armijo backtracking.

    Accepted steps never increase the objective, so the history of accepted
    values is non-increasing by construction. Convergence is declared when
    the relative decrease drops below `tol`.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    value, grad = fun(theta)
    history = [value]
    step = init_step
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gnorm2 = float(grad @ grad)
        if gnorm2 == 0.0 or not np.isfinite(gnorm2):
            converged = gnorm2 == 0.0
            break
        accepted = False
        trial_step = step
        for _ in range(max_backtracks):
            candidate = theta - trial_step * grad
            cand_value, cand_grad = fun(candidate)
            if np.isfinite(cand_value) and \
                    cand_value <= value - 1e-4 * trial_step * gnorm2:
                accepted = True
                break
            trial_step *= 0.5
        if not accepted:
            converged = True
            break
        improvement = value - cand_value
        theta, value, grad = candidate, cand_value, cand_grad
        history.append(value)
        step = trial_step * step_growth
        if improvement <= tol * max(1.0, abs(value)):
            converged = True
            break
    return OptResult(theta=theta, value=value, converged=converged,
                     n_iter=it, history=history,
                     grad_norm=float(np.sqrt(grad @ grad)))
