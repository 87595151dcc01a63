"""Central-finite-difference gradient checker for the autodiff op set."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def grad_check(
    fn: Callable[..., Tensor],
    points: Sequence[np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over probed coordinates of |analytic - central difference| / max(1, |analytic|).

    ``fn`` maps one Tensor per entry of ``points`` to an output tensor; a
    non-scalar output is summed before differentiation.  Probing is exhaustive
    unless ``max_coords`` caps the number of coordinates per input (sampled
    with ``rng``), which keeps large composed models tractable.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-6, 1e-4]")
    points = [np.asarray(p, dtype=np.float64) for p in points]
    inputs = [Tensor(p.copy(), requires_grad=True) for p in points]

    out = fn(*inputs)
    loss = out.sum() if out.data.size != 1 else out
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def eval_at(arrays: list[np.ndarray]) -> float:
        with no_grad():
            o = fn(*[Tensor(a) for a in arrays])
            val = o.data.sum()
        if not np.isfinite(val):
            raise FloatingPointError("non-finite value while probing")
        return float(val)

    worst = 0.0
    for i, p in enumerate(points):
        flat_n = p.size
        if max_coords is not None and flat_n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat_n, size=max_coords, replace=False)
        else:
            coords = range(flat_n)
        for c in coords:
            idx = np.unravel_index(c, p.shape) if p.shape else ()
            probe = [a.copy() for a in points]
            probe[i][idx] += eps
            f_plus = eval_at(probe)
            probe[i][idx] -= 2 * eps
            f_minus = eval_at(probe)
            fd = (f_plus - f_minus) / (2 * eps)
            a = float(analytic[i][idx])
            err = abs(a - fd) / max(1.0, abs(a))
            worst = max(worst, err)
    return worst
