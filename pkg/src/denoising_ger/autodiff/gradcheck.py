"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import AutodiffError, Graph, Tensor


class NondeterministicFunction(AutodiffError):
    pass


def _value(f: Callable[[], Tensor]) -> float:
    out = f()
    if out.data.size != 1:
        raise AutodiffError(f"gradient check needs a scalar function, got shape {out.shape}")
    return float(out.data)


def grad_check_leaves(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    step: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error |analytic - numeric| / max(1, |analytic|) over leaf coordinates.

    ``f`` closes over ``leaves`` and is re-evaluated with single coordinates
    nudged by +-step.  ``max_coords`` caps the coordinates probed per leaf
    (sampled with ``seed``); by default every coordinate is probed.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"step {step} outside [1e-6, 1e-3]")
    v1, v2 = _value(f), _value(f)
    if v1 != v2:
        raise NondeterministicFunction(f"two forward evaluations disagree: {v1!r} vs {v2!r}")
    with Graph() as g:
        loss = f()
    grads = g.backward(loss, wrt=leaves)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf in leaves:
        analytic = grads[leaf].reshape(-1)
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = _value(f)
            flat[i] = orig - step
            down = _value(f)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst


def grad_check(f: Callable[[Tensor], Tensor], at: Tensor, step: float = 1e-4) -> float:
    """Gradient check of a scalar function of one tensor."""
    if not at.requires_grad:
        at = Tensor(at.data, requires_grad=True)
    return grad_check_leaves(lambda: f(at), [at], step=step)
