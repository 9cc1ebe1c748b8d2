"""Central finite-difference audit of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import GradientAuditError
from .graph import Node, zero_grads


# Central differences at eps ~ 1e-5 carry ~1e-11 of roundoff per unit of loss,
# so gradient entries far below this scale cannot be resolved relatively.
ABS_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = ABS_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(floor, np.abs(analytic) + np.abs(numeric))


def finite_diff_check(f: Callable[[], Node], params: Sequence[Node], eps: float = 1e-5,
                      max_coords: int | None = 400, rng: np.random.Generator | None = None,
                      per_param: bool = False, floor: float = ABS_FLOOR):
    """Compare backprop gradients of ``f()`` against central differences.

    ``f`` must rebuild the graph from the current parameter values on every
    call and return a scalar node. When a parameter has more than
    ``max_coords`` entries, a random subset of that size is checked.

    Returns the max relative error over checked coordinates, or with
    ``per_param=True`` a list with one max per parameter.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    zero_grads(params)
    root = f()
    root.backward()
    analytic = [p.grad.copy() for p in params]

    worst = []
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        err = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().value)
            flat[i] = orig - eps
            fm = float(f().value)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradientAuditError(
                    f"non-finite loss at perturbed coordinate {i} of a {p.value.shape} parameter")
            numeric = (fp - fm) / (2 * eps)
            err = max(err, float(relative_error(grad.reshape(-1)[i], numeric, floor)))
        worst.append(err)
    zero_grads(params)
    if per_param:
        return worst
    return max(worst) if worst else 0.0
