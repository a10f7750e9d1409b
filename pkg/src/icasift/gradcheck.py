"""Central finite-difference verification of analytic gradients.

The function under test must be deterministic: dropout in eval mode or
re-seeded per call, no other stochastic state.  Checks should run under
`using_dtype(np.float64)`; in float32 the difference quotient loses most
of its significant digits at useful step sizes.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Graph, Tensor, backward_pass, zero_grads


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      step: float = 1e-3,
                      max_coords_per_param: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` takes no arguments, reads `params`, and returns a scalar loss
    tensor.  With `max_coords_per_param` set, only a random subset of each
    parameter's coordinates is probed (two evaluations per coordinate);
    otherwise every coordinate is checked.
    """
    params = list(params)
    zero_grads(params)
    with Graph() as graph:
        loss = f()
    backward_pass(loss, graph, params)
    analytic = [p.grad.copy() for p in params]
    zero_grads(params)

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        grad_flat = grad.reshape(-1)
        n = flat.size
        if max_coords_per_param is None or n <= max_coords_per_param:
            coords = range(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for j in coords:
            original = flat[j]
            flat[j] = original + step
            f_plus = float(f().data)
            flat[j] = original - step
            f_minus = float(f().data)
            flat[j] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(grad_flat[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
