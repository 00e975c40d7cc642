"""Projection head, invariance loss, and the Gaussianity regularizer.

The regularizer is an empirical characteristic-function distance between
1-D projections of the embedding batch and the standard normal, averaged
over a fixed set of seeded random unit directions. The statistic named in
the source method is not published; this form is a declared substitute
with the same collapse-detection role.
"""

from __future__ import annotations

import numpy as np

from .. import numerics as nm
from ..backbone import encode
from ..layers import init_linear, linear

__all__ = ["init_projector", "projector_forward", "student_projection",
           "teacher_target", "invariance_loss", "sigreg", "total_loss"]


def init_projector(params, rng, name, d_in, arch):
    # Fan-in scaled init with a gain of 3: the head must emit roughly
    # unit-scale activations for the Gaussian-matching regularizer to have
    # usable gradients from step one (with the default 0.02 init, three
    # stacked layers shrink the output by ~1e3 and the regularizer starts on
    # its flat plateau). The gain offsets the ~0.5x attenuation of each GELU
    # at small activations plus the sub-unit scale of the pooled input.
    hidden = arch.proj_hidden_mult * d_in
    gain = 3.0
    init_linear(params, rng, f"{name}/l1", d_in, hidden,
                std=gain * d_in ** -0.5)
    init_linear(params, rng, f"{name}/l2", hidden, hidden,
                std=gain * hidden ** -0.5)
    init_linear(params, rng, f"{name}/l3", hidden, arch.proj_dim,
                std=gain * hidden ** -0.5)


def projector_forward(params, name, pooled):
    h = nm.gelu(linear(params, f"{name}/l1", pooled))
    h = nm.gelu(linear(params, f"{name}/l2", h))
    return linear(params, f"{name}/l3", h)


def student_projection(params, suite, groupings, view, arch):
    pooled, _ = encode(params, suite, groupings, view.rasters, arch)
    return projector_forward(params, "proj", pooled)


def teacher_target(teacher_params, suite, groupings, global_views, arch):
    """Stop-gradient mean of the teacher projections of the global views."""
    if not global_views:
        raise ValueError("teacher_target: no global views")
    with nm.no_grad():
        zs = [student_projection(teacher_params, suite, groupings, v, arch)
              for v in global_views]
        acc = zs[0]
        for z in zs[1:]:
            acc = acc + z
        return acc * (1.0 / len(zs))


def invariance_loss(projections, targets):
    """Mean squared distance between view projections and their targets.

    projections: per sample, the list of that sample's view projections;
    targets: one target vector per sample. Normalized by (samples x views).
    """
    if len(projections) != len(targets):
        raise nm.ShapeError("one target per sample required")
    total = None
    count = 0
    for zs, h in zip(projections, targets):
        for z in zs:
            if z.shape != h.shape:
                raise nm.ShapeError(
                    f"projection width {z.shape} != target {h.shape}")
            d = z - h
            term = nm.sum_(d * d)
            total = term if total is None else total + term
            count += 1
    return total * (1.0 / count)


def sigreg(z, config, seed, step=0):
    """Characteristic-function distance of projected rows to N(0, 1).

    z: (n, d) stacked projections, n >= 8. Directions are redrawn
    deterministically per (seed, step).
    """
    n, d = z.shape
    if n < 8:
        raise ValueError(f"sigreg needs at least 8 rows, got {n}")
    rng = nm.stream(seed, "sigreg-directions", step)
    dirs = rng.normal(size=(config.sigreg_directions, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    freqs = np.linspace(-config.sigreg_freq_range, config.sigreg_freq_range,
                        config.sigreg_freqs)
    target = np.exp(-0.5 * freqs ** 2)          # cf of the standard normal

    zt = z if isinstance(z, nm.Tensor) else nm.tensor(z)
    proj = nm.matmul(zt, nm.tensor(dirs.T))      # (n, n_dirs)
    phase = proj.reshape(n, config.sigreg_directions, 1) * nm.tensor(freqs)
    re = nm.mean(nm.cos(phase), axis=0)          # (n_dirs, n_freqs)
    im = nm.mean(nm.sin(phase), axis=0)
    dre = re - nm.tensor(target)
    # Per direction the statistic is n * sum_freqs |cf_hat - cf|^2 (the
    # classic BHEP/Epps-Pulley scaling: O(1) under the null regardless of n,
    # O(n) under a fixed alternative); we return the mean over directions.
    # Mean-over-everything times n*n_freqs is the same quantity.
    return nm.mean(dre * dre + im * im) * float(n * config.sigreg_freqs)


def total_loss(projections, targets, stacked, config, seed, step=0):
    """(1 - lambda) * invariance + lambda * regularizer."""
    inv = invariance_loss(projections, targets)
    lam = config.lam
    if lam == 0.0:
        return inv, inv, None
    reg = sigreg(stacked, config, seed, step)
    if lam == 1.0:
        return reg, inv, reg
    return inv * (1.0 - lam) + reg * lam, inv, reg
