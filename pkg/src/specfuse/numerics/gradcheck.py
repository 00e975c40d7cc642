"""Central finite-difference gradient oracle.

Independent of the reverse-mode path it checks: gradients are estimated by
perturbing parameter entries one at a time and re-running the forward
function.
"""

from __future__ import annotations

import numpy as np

from .rng import stream
from .tensor import backward

__all__ = ["grad_check"]


def grad_check(f, params, eps=1e-5, max_coords_per_param=None, seed=0,
               floor=1e-12):
    """Max relative error between analytic and central-difference gradients.

    `f` must be a deterministic scalar function of the parameter tensors.
    When `max_coords_per_param` is set, a seeded subsample of coordinates is
    checked per tensor instead of the full sweep.

    Returns max over checked coordinates of
    |analytic - fd| / max(|analytic|, |fd|, floor).

    `floor` bounds the denominator. Central differences of a loss of
    magnitude F carry cancellation noise of roughly ulp(F)/eps, so for
    coordinates whose true gradient sits at or below that noise the relative
    error is meaningless; set `floor` above the noise level when sweeping
    parameters that include exact-zero directions (e.g. biases that cancel
    inside a softmax).
    """
    loss = f()
    if float(loss.data.reshape(())) != float(f().data.reshape(())):
        raise ValueError("f is not deterministic under a fixed seed")
    for p in params:
        p.grad = None
    backward(loss)
    worst = 0.0
    for k, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = stream(seed, "gradcheck", k).choice(
                flat.size, size=max_coords_per_param, replace=False
            )
        aflat = analytic.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data.reshape(()))
            flat[i] = orig - eps
            lo = float(f().data.reshape(()))
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            denom = max(abs(aflat[i]), abs(fd), floor)
            worst = max(worst, abs(aflat[i] - fd) / denom)
    return worst
