"""Hierarchical multisensor encoder.

Per-sensor local branches share one spatial position table and run
windowed-attention blocks at the token width, pool 2x2 into the branch
width, and hand a common-shape grid to cross-sensor fusion. Fusion attends
over whichever sensors are present at each spatial position; the shared
trunk pools once more and mean-pools the final tokens. Intermediate maps
from each resolution form a feature pyramid for dense heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .layers import (
    _merge_heads,
    _split_heads,
    block,
    init_block,
    init_linear,
    linear,
    n_params,
    trunc_normal,
)
from .tokenizers import TokenGrid, init_tokenizer, tokenize

__all__ = [
    "FeaturePyramid",
    "init_backbone",
    "local_branch_forward",
    "fuse_sensors",
    "shared_trunk_forward",
    "encode",
    "describe",
]


@dataclass
class FeaturePyramid:
    """Feature maps at each stage resolution, finest first."""

    maps: tuple  # of TokenGrid

    def __post_init__(self):
        sides = [m.height for m in self.maps]
        widths = [m.dim for m in self.maps]
        if sides != sorted(sides, reverse=True) or len(set(sides)) != len(sides):
            raise nm.ShapeError("pyramid resolutions must strictly decrease")
        if widths != sorted(widths) or len(set(widths)) != len(widths):
            raise nm.ShapeError("pyramid widths must strictly increase")

    @property
    def resolutions(self):
        return tuple(m.height for m in self.maps)


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def init_branch(params, rng, name, arch):
    d1, d2, _ = arch.stage_widths()
    for i in range(arch.depths[0]):
        init_block(params, rng, f"{name}/stage1/{i}", d1, d1)
    # pooling transition doubles width as the first stage-2 block
    init_block(params, rng, f"{name}/stage2/0", d1, d2)
    for i in range(1, arch.depths[1]):
        init_block(params, rng, f"{name}/stage2/{i}", d2, d2)


def init_fusion(params, rng, name, sensor_ids, arch):
    d2 = arch.d_branch
    for sid in sensor_ids:
        init_linear(params, rng, f"{name}/proj/{sid}", d2, arch.d_fusion)
        params[f"{name}/emb/{sid}"] = nm.parameter(
            trunc_normal(rng, (arch.d_fusion,)))
    params[f"{name}/query"] = nm.parameter(
        trunc_normal(rng, (arch.d_fusion,)))
    init_linear(params, rng, f"{name}/wk", arch.d_fusion, arch.d_fusion)
    init_linear(params, rng, f"{name}/wv", arch.d_fusion, arch.d_fusion)
    init_linear(params, rng, f"{name}/wo", arch.d_fusion, d2)


def init_trunk(params, rng, name, arch):
    _, d2, d3 = arch.stage_widths()
    init_block(params, rng, f"{name}/0", d2, d3)
    for i in range(1, arch.depths[2]):
        init_block(params, rng, f"{name}/{i}", d3, d3)


def init_backbone(params, rng, suite, arch):
    """Initialize every sub-module; returns per-sensor band groupings."""
    grid = suite[0].grid
    params["pos"] = nm.parameter(trunc_normal(rng, (grid * grid, arch.d_token)))
    groupings = {}
    for spec in suite:
        groupings[spec.id] = init_tokenizer(params, rng, f"tok/{spec.id}",
                                            spec, arch)
        init_branch(params, rng, f"branch/{spec.id}", arch)
    init_fusion(params, rng, "fuse", [s.id for s in suite], arch)
    init_trunk(params, rng, "trunk", arch)
    return groupings


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def local_branch_forward(params, sensor_id, grid, arch):
    """Run one sensor's local branch.

    grid: TokenGrid on the common grid at the token width. Returns the
    pooled stage-2 TokenGrid and the pre-pool stage-1 TokenGrid (for the
    feature pyramid).
    """
    name = f"branch/{sensor_id}"
    if f"{name}/stage1/0/ln1/g" not in params:
        raise KeyError(f"unknown sensor id {sensor_id!r}")
    side = grid.height
    if grid.width != side or grid.dim != arch.d_token:
        raise nm.ShapeError(
            f"branch input must be square at width {arch.d_token}")
    x = (grid.data + params["pos"]).reshape(1, side * side, arch.d_token)
    g = side
    for i in range(arch.depths[0]):
        x, g = block(params, f"{name}/stage1/{i}", x, g, arch.heads[0],
                     window=arch.windows[0])
    stage1 = TokenGrid(g, g, x.reshape(g * g, arch.d_token))
    x, g = block(params, f"{name}/stage2/0", x, g, arch.heads[1],
                 window=arch.windows[1], pool=True)
    for i in range(1, arch.depths[1]):
        x, g = block(params, f"{name}/stage2/{i}", x, g, arch.heads[1],
                     window=arch.windows[1])
    return TokenGrid(g, g, x.reshape(g * g, arch.d_branch)), stage1


def fuse_sensors(params, branch_outputs, arch):
    """Fuse per-sensor grids into one grid of the same shape.

    branch_outputs: map sensor-id -> TokenGrid, all sharing extents and the
    branch width. Per spatial position one learned query attends over the
    available sensors' projected vectors plus their sensor embeddings; the
    result is independent of mapping order (sensors are stacked in sorted
    id order).
    """
    if not branch_outputs:
        raise ValueError("fuse_sensors: empty sensor set")
    ids = sorted(branch_outputs)
    first = branch_outputs[ids[0]]
    side, d2 = first.height, first.dim
    cols = []
    for sid in ids:
        g = branch_outputs[sid]
        if (g.height, g.width, g.dim) != (side, side, d2):
            raise nm.ShapeError("fuse_sensors: mismatched sensor grids")
        t = linear(params, f"fuse/proj/{sid}", g.data)
        cols.append(t + params[f"fuse/emb/{sid}"])
    t = nm.stack(cols, axis=1)                      # (L, n, D_f)
    heads = arch.fusion_heads
    dh = arch.d_fusion // heads
    k = _split_heads(linear(params, "fuse/wk", t), heads)
    v = _split_heads(linear(params, "fuse/wv", t), heads)
    q = params["fuse/query"].reshape(1, heads, 1, dh)
    scores = nm.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = nm.softmax(scores, axis=-1)
    out = _merge_heads(nm.matmul(attn, v)).reshape(side * side, arch.d_fusion)
    fused = linear(params, "fuse/wo", out)
    return TokenGrid(side, side, fused)


def shared_trunk_forward(params, grid, arch):
    """Shared trunk: one more query-pool, global blocks, mean pooling.

    Returns (Z: TokenGrid at the final resolution, pooled vector).
    """
    side = grid.height
    if grid.dim != arch.d_branch or grid.width != side:
        raise nm.ShapeError(
            f"trunk input must be square at width {arch.d_branch}")
    x = grid.data.reshape(1, side * side, arch.d_branch)
    g = side
    x, g = block(params, "trunk/0", x, g, arch.heads[2],
                 window=arch.windows[2], pool=True)
    for i in range(1, arch.depths[2]):
        x, g = block(params, f"trunk/{i}", x, g, arch.heads[2],
                     window=arch.windows[2])
    tokens = x.reshape(g * g, arch.d_trunk)
    pooled = nm.mean(tokens, axis=0)
    return TokenGrid(g, g, tokens), pooled


def encode(params, suite, groupings, rasters, arch):
    """Full pipeline for one sample subset.

    rasters: map sensor-id -> (C_s, H, W) array, a subset of the suite.
    Returns (pooled vector, FeaturePyramid). The stage-1 pyramid map is the
    mean over available sensors' pre-pool maps.
    """
    specs = {s.id: s for s in suite}
    unknown = set(rasters) - set(specs)
    if unknown:
        raise KeyError(f"sensors not in suite: {sorted(unknown)}")
    branch_out, stage1_maps = {}, []
    for sid in sorted(rasters):
        spec = specs[sid]
        tg = tokenize(params, f"tok/{sid}", rasters[sid], spec,
                      groupings[sid], arch)
        out, stage1 = local_branch_forward(params, sid, tg, arch)
        branch_out[sid] = out
        stage1_maps.append(stage1)
    fused = fuse_sensors(params, branch_out, arch)
    z, pooled = shared_trunk_forward(params, fused, arch)

    s1 = stage1_maps[0]
    if len(stage1_maps) > 1:
        acc = stage1_maps[0].data
        for m in stage1_maps[1:]:
            acc = acc + m.data
        s1 = TokenGrid(s1.height, s1.width, acc * (1.0 / len(stage1_maps)))
    pyramid = FeaturePyramid((s1, fused, z))
    return pooled, pyramid


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def describe(params, suite=None):
    """Per-module parameter counts plus the grand total."""
    counts = {}
    if suite is not None:
        for spec in suite:
            counts[f"tokenizer/{spec.id}"] = n_params(params, f"tok/{spec.id}/")
            counts[f"branch/{spec.id}"] = n_params(params, f"branch/{spec.id}/")
    else:
        groups = sorted({"/".join(k.split("/")[:2])
                         for k in params if k.startswith(("tok/", "branch/"))})
        for g in groups:
            label = g.replace("tok/", "tokenizer/", 1)
            counts[label] = n_params(params, g + "/")
    counts["positions"] = n_params(params, "pos")
    counts["fusion"] = n_params(params, "fuse/")
    counts["trunk"] = n_params(params, "trunk/")
    counts["total"] = sum(p.size for p in params.values())
    return counts


def format_describe(counts):
    width = max(len(k) for k in counts)
    lines = [f"{k:<{width}}  {v:>12,}" for k, v in counts.items()
             if k != "total"]
    lines.append(f"{'total':<{width}}  {counts['total']:>12,}")
    return "\n".join(lines)
