"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[int, int] | None  # (parameter index, flat coordinate)
    n_coords: int
    tol: float
    passed: bool
    message: str = ""

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        where = f" at param {self.worst[0]} coord {self.worst[1]}" if self.worst else ""
        return f"{status} max_rel_err={self.max_rel_error:.3e}{where} over {self.n_coords} coords {self.message}"


def check_gradients(fn: Callable[[list[Tensor]], Tensor], point: np.ndarray | Sequence[np.ndarray],
                    eps: float = 1e-6, tol: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn`` with central differences.

    ``fn`` receives a list of Tensors (one per array in ``point``) and must
    return a scalar Tensor.  Tensors passed in ``point`` are used in place
    (their data is perturbed and restored), which lets ``fn`` close over a
    model's own parameters.  The error per coordinate is
    ``|g_a - g_fd| / max(1, |g_a|, |g_fd|)``.
    """
    items = [point] if isinstance(point, (np.ndarray, Tensor)) else list(point)
    params = [p if isinstance(p, Tensor) else Tensor(np.array(p, dtype=np.float64), requires_grad=True)
              for p in items]
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        loss = fn(params)
    analytic = backward(tape, loss, params)

    worst, worst_err, count = None, 0.0, 0
    for i, (p, ga) in enumerate(zip(params, analytic)):
        if not np.all(np.isfinite(ga)):
            j = int(np.flatnonzero(~np.isfinite(ga.ravel()))[0])
            return GradCheckReport(np.inf, (i, j), count, tol, False, "non-finite analytic gradient")
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = fn(params).item()
            flat[j] = orig - eps
            f_minus = fn(params).item()
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                return GradCheckReport(np.inf, (i, j), count, tol, False, "non-finite function value")
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            g_a = ga.reshape(-1)[j]
            err = abs(g_a - g_fd) / max(1.0, abs(g_a), abs(g_fd))
            count += 1
            if err > worst_err or worst is None:
                worst_err, worst = err, (i, j)
    return GradCheckReport(worst_err, worst, count, tol, worst_err <= tol)
