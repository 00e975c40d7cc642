"""Per-sensor tokenization onto the common spatial token grid.

HSI rasters go through spectral tokenization: contiguous band groups are
each embedded by a small spatio-spectral projection, a spectral transformer
mixes the group tokens at every spatial position, and a learned query
aggregates them into one token. All other sensors use a convolutional
patch projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .layers import (
    block,
    init_block,
    init_linear,
    init_pqa,
    projected_query_attention,
    trunc_normal,
)
from .synth.sensors import HSI

__all__ = [
    "TokenGrid",
    "SpectralGrouping",
    "partition_bands",
    "init_spectral_tokenizer",
    "spectral_tokenize",
    "init_patch_embed",
    "patch_embed",
    "init_tokenizer",
    "tokenize",
]


@dataclass
class TokenGrid:
    height: int
    width: int
    data: nm.Tensor  # (height*width, dim)

    def __post_init__(self):
        if self.height * self.width != self.data.shape[0]:
            raise nm.ShapeError("TokenGrid extents do not match token count")

    @property
    def dim(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class SpectralGrouping:
    group_spans: tuple  # ((start, stop), ...) index ranges over the inventory

    def __post_init__(self):
        prev = 0
        for start, stop in self.group_spans:
            if start != prev:
                raise ValueError("group spans must be disjoint, ordered, "
                                 "and cover all retained bands")
            if stop <= start:
                raise ValueError("empty group span")
            prev = stop

    @property
    def n_groups(self):
        return len(self.group_spans)

    def sizes(self):
        return [stop - start for start, stop in self.group_spans]


def partition_bands(inventory, n_groups):
    """Split the retained inventory into contiguous, even groups.

    Groups never straddle an absorption gap: each gap-free segment receives
    a share of groups proportional to its band count (at least one), with
    remainders going to the longer segments; within a segment group sizes
    differ by at most one.
    """
    segments = inventory.segments()
    n_bands = sum(len(s) for s in segments)
    if n_groups > n_bands:
        raise ValueError(f"cannot form {n_groups} groups from {n_bands} bands")
    if n_groups < len(segments):
        raise ValueError(f"{n_groups} groups cannot cover "
                         f"{len(segments)} gap-delimited segments")
    lengths = np.array([len(s) for s in segments])
    alloc = np.maximum(1, np.floor(n_groups * lengths / n_bands).astype(int))
    alloc = np.minimum(alloc, lengths)
    order = np.argsort(-lengths, kind="stable")
    i = 0
    while alloc.sum() < n_groups:
        j = order[i % len(segments)]
        if alloc[j] < lengths[j]:
            alloc[j] += 1
        i += 1
    i = 0
    rev = order[::-1]
    while alloc.sum() > n_groups:
        j = rev[i % len(segments)]
        if alloc[j] > 1:
            alloc[j] -= 1
        i += 1

    spans = []
    offset = 0
    for seg, g in zip(segments, alloc):
        n = len(seg)
        base, extra = divmod(n, g)
        start = offset
        for k in range(g):
            size = base + (1 if k < extra else 0)
            spans.append((start, start + size))
            start += size
        offset += n
    return SpectralGrouping(tuple(spans))


def _same_pad(kernel):
    return (kernel - 1) // 2


def init_patch_embed(params, rng, name, spec, d_out):
    k = spec.patch_kernel
    params[f"{name}/w"] = nm.parameter(
        trunc_normal(rng, (d_out, spec.n_channels, k, k)))
    params[f"{name}/b"] = nm.parameter(np.zeros(d_out))


def patch_embed(params, name, x, spec):
    """Convolutional patch projection of a (C_s, H, W) raster -> TokenGrid."""
    c, h, w = x.shape if isinstance(x, np.ndarray) else x.data.shape
    if h % spec.patch_stride or w % spec.patch_stride:
        raise nm.ShapeError(
            f"{spec.id}: extents ({h},{w}) not divisible by stride "
            f"{spec.patch_stride}")
    xt = x if isinstance(x, nm.Tensor) else nm.tensor(x)
    out = nm.conv2d(xt.reshape(1, c, h, w), params[f"{name}/w"],
                    params[f"{name}/b"], stride=spec.patch_stride,
                    pad=_same_pad(spec.patch_kernel))
    _, d, gh, gw = out.shape
    tokens = out.reshape(d, gh * gw).transpose(1, 0)
    return TokenGrid(gh, gw, tokens)


def init_spectral_tokenizer(params, rng, name, spec, grouping, arch):
    k = spec.patch_kernel
    for gi, (start, stop) in enumerate(grouping.group_spans):
        params[f"{name}/group{gi}/w"] = nm.parameter(
            trunc_normal(rng, (arch.d_spec, stop - start, k, k)))
        params[f"{name}/group{gi}/b"] = nm.parameter(np.zeros(arch.d_spec))
    params[f"{name}/pos"] = nm.parameter(
        trunc_normal(rng, (grouping.n_groups, arch.d_spec)))
    for li in range(arch.spec_layers):
        init_block(params, rng, f"{name}/spectr{li}", arch.d_spec, arch.d_spec)
    init_pqa(params, rng, f"{name}/agg", arch.d_spec, arch.spec_fusion,
             arch.d_token)


def spectral_tokenize(params, name, x, spec, grouping, arch):
    """Spectral tokenization of an HSI raster -> TokenGrid of width d_token."""
    c, h, w = x.shape if isinstance(x, np.ndarray) else x.data.shape
    if c != spec.n_channels:
        raise nm.ShapeError(f"{spec.id}: raster has {c} channels, "
                            f"inventory has {spec.n_channels}")
    if h % spec.patch_stride or w % spec.patch_stride:
        raise nm.ShapeError(f"{spec.id}: extents not divisible by stride")
    xt = x if isinstance(x, nm.Tensor) else nm.tensor(x)
    xb = xt.reshape(1, c, h, w)
    pad = _same_pad(spec.patch_kernel)
    group_tokens = []
    for gi, (start, stop) in enumerate(grouping.group_spans):
        sub = xb[:, start:stop]
        out = nm.conv2d(sub, params[f"{name}/group{gi}/w"],
                        params[f"{name}/group{gi}/b"],
                        stride=spec.patch_stride, pad=pad)
        _, d, gh, gw = out.shape
        group_tokens.append(out.reshape(d, gh * gw).transpose(1, 0))
    l = gh * gw
    tokens = nm.stack(group_tokens, axis=1)          # (L, G, d_spec)
    tokens = tokens + params[f"{name}/pos"]
    for li in range(arch.spec_layers):
        tokens, _ = block(params, f"{name}/spectr{li}", tokens,
                          grid=0, heads=arch.spec_heads)
    agg = projected_query_attention(params, f"{name}/agg", tokens,
                                    arch.agg_heads)   # (L, d_token)
    return TokenGrid(gh, gw, agg)


def init_tokenizer(params, rng, name, spec, arch):
    """Init either tokenizer path for one sensor; returns its grouping."""
    if spec.kind == HSI:
        grouping = partition_bands(spec.bands, spec.group_count)
        init_spectral_tokenizer(params, rng, name, spec, grouping, arch)
        return grouping
    init_patch_embed(params, rng, name, spec, arch.d_token)
    return None


def tokenize(params, name, x, spec, grouping, arch):
    if spec.kind == HSI:
        return spectral_tokenize(params, name, x, spec, grouping, arch)
    return patch_embed(params, name, x, spec)
