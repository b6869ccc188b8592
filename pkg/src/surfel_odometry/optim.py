"""Small Levenberg-Marquardt driver working on assembled normal equations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np


@dataclass
class LMResult:
    state: Any
    cost: float
    initial_cost: float
    iterations: int
    converged: bool
    degenerate: bool = False
    step_norm: float = 0.0


def levenberg_marquardt(
    linearize: Callable[[Any], tuple[float, np.ndarray, np.ndarray]],
    cost: Callable[[Any], float],
    retract: Callable[[Any, np.ndarray], Any],
    x0: Any,
    max_iterations: int,
    damping: float = 1e-4,
    step_tol: float = 1e-10,
    max_retries: int = 12,
    rel_decrease_tol: float = 1e-10,
) -> LMResult:
    """Minimize ``cost`` starting at ``x0``.

    ``linearize(x)`` returns ``(cost, H, g)`` with ``H ~ J^T J`` and ``g = J^T r``.
    Steps are accepted only when they lower ``cost``, so the returned cost never
    exceeds the initial one. Iteration stops early once the quadratic model
    predicts a relative decrease below ``rel_decrease_tol``.
    """
    x = x0
    c, H, g = linearize(x)
    c0 = c
    degenerate = False
    converged = False
    step_norm = 0.0
    it = 0
    while it < max_iterations:
        it += 1
        if c <= 0.0 or not np.any(g):
            converged = True
            break
        diag = np.diag(H).copy()
        floor = 1e-12 * max(float(diag.max()), 1e-300)
        diag = np.maximum(diag, floor)
        accepted = stalled = False
        for _ in range(max_retries):
            A = H + damping * np.diag(diag)
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            predicted = -(g @ delta + 0.5 * delta @ H @ delta)
            if predicted <= rel_decrease_tol * c:
                stalled = True  # no meaningful decrease left at any damping
                break
            x_new = retract(x, delta)
            c_new = cost(x_new)
            if np.isfinite(c_new) and c_new < c:
                accepted = True
                break
            damping *= 10.0
        if not accepted:
            degenerate = it == 1 and not stalled
            converged = not degenerate
            break
        damping = max(damping / 10.0, 1e-12)
        x = x_new
        step_norm = float(np.linalg.norm(delta))
        if step_norm < step_tol:
            c = c_new
            converged = True
            break
        if it == max_iterations:
            c = c_new
            break
        c, H, g = linearize(x)
    return LMResult(x, float(c), float(c0), it, converged, degenerate, step_norm)
