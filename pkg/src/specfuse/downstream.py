"""Downstream transfer: sensor routing, spectral remapping, segmentation.

An unseen sensor is routed to the pretrained branch with the closest
spectral coverage and ground resolution, its raster remapped to the
branch's band inventory (wavelength interpolation for hyperspectral
branches, band averaging for multispectral ones). The probe decoder
projects selected pyramid maps to a common width, upsamples them to the
finest resolution, and classifies with a small convolutional head while
the encoder stays frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .backbone import encode
from .configs import OptimConfig
from .layers import (init_layer_norm, init_linear, layer_norm_affine, linear,
                     trunc_normal)
from .pretrain.optim import AdamW, schedules
from .pretrain.views import resize_bilinear

__all__ = [
    "RoutePlan", "remap_spectra", "select_branch", "multi_branch_features",
    "init_seg_head", "seg_head_forward", "upsample_tokens", "train_probe",
    "miou", "make_probe_dataset", "evaluation_report",
]


@dataclass
class RoutePlan:
    mode: str                     # "single" or "multi"
    target_branches: tuple
    remap_modes: tuple = ()

    def __post_init__(self):
        self.target_branches = tuple(self.target_branches)
        if self.mode == "single":
            if len(self.target_branches) != 1:
                raise ValueError("single mode routes to exactly one branch")
        elif self.mode == "multi":
            if len(self.target_branches) < 2:
                raise ValueError("multi mode needs at least two branches")
        else:
            raise ValueError(f"unknown route mode {self.mode!r}")
        if not self.remap_modes:
            self.remap_modes = ("identity",) * len(self.target_branches)
        if len(self.remap_modes) != len(self.target_branches):
            raise ValueError("one remap mode per branch required")


# ---------------------------------------------------------------------------
# spectral remapping and branch selection
# ---------------------------------------------------------------------------

def remap_spectra(x, source_centers, target, mode):
    """Remap a (C, H, W) raster onto a target band inventory.

    interpolate: per-pixel linear interpolation of the spectrum at each
    target center, clamped at the source endpoints. average: each target
    band is the mean of the source bands inside its midpoint-delimited
    response interval, with nearest-band fallback for empty intervals.
    """
    src = np.asarray(source_centers, dtype=float)
    if np.any(np.diff(src) <= 0):
        raise ValueError("source band centers must be strictly increasing")
    tgt = target.centers
    c, h, w = x.shape
    if c != len(src):
        raise nm.ShapeError(f"raster has {c} channels, {len(src)} centers")
    if mode == "identity":
        if len(src) != len(tgt):
            raise nm.ShapeError("identity remap requires equal band counts")
        return x.copy()
    if mode == "interpolate":
        if len(src) < 2:
            raise ValueError("interpolation needs at least 2 source bands")
        idx = np.clip(np.searchsorted(src, tgt) - 1, 0, len(src) - 2)
        x0, x1 = src[idx], src[idx + 1]
        t = np.clip((tgt - x0) / (x1 - x0), 0.0, 1.0)
        flat = x.reshape(c, h * w)
        out = flat[idx] * (1 - t)[:, None] + flat[idx + 1] * t[:, None]
        return out.reshape(len(tgt), h, w)
    if mode == "average":
        mids = (tgt[:-1] + tgt[1:]) / 2
        lo = np.concatenate([[-np.inf], mids])
        hi = np.concatenate([mids, [np.inf]])
        out = np.empty((len(tgt), h, w))
        for i in range(len(tgt)):
            sel = (src >= lo[i]) & (src < hi[i])
            if sel.any():
                out[i] = x[sel].mean(axis=0)
            else:
                out[i] = x[int(np.argmin(np.abs(src - tgt[i])))]
        return out
    raise ValueError(f"unknown remap mode {mode!r}")


def _coverage_score(source, branch):
    a0, a1 = source.band_centers[0], source.band_centers[-1]
    b0, b1 = branch.band_centers[0], branch.band_centers[-1]
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    jaccard = inter / union if union > 0 else 1.0
    return jaccard - 0.1 * abs(math.log(source.gsd / branch.gsd))


def select_branch(source, branches):
    """Route a sensor to the branch with the best coverage/resolution score."""
    if not branches:
        raise ValueError("no branches to select from")
    best = max(branches, key=lambda b: (_coverage_score(source, b),
                                        b.n_channels))
    return best.id


# ---------------------------------------------------------------------------
# pyramid utilities and segmentation head
# ---------------------------------------------------------------------------

def _route_raster(x, source, branch_spec, mode):
    remapped = remap_spectra(x, source.band_centers, branch_spec.bands, mode)
    if remapped.shape[1] != branch_spec.crop_px:
        remapped = resize_bilinear(remapped, branch_spec.crop_px,
                                   branch_spec.crop_px)
    return remapped


def multi_branch_features(x, source, plan, params, suite, groupings, arch):
    """Route one raster through several branches; concatenate stage-wise."""
    if len(plan.target_branches) < 2:
        raise ValueError("multi_branch_features needs >= 2 branches")
    specs = {s.id: s for s in suite}
    pyramids = []
    for bid, mode in zip(plan.target_branches, plan.remap_modes):
        raster = _route_raster(x, source, specs[bid], mode)
        _, pyr = encode(params, suite, groupings, {bid: raster}, arch)
        pyramids.append(pyr)
    from .backbone import FeaturePyramid
    from .tokenizers import TokenGrid
    merged = []
    for stage in range(len(pyramids[0].maps)):
        grids = [p.maps[stage] for p in pyramids]
        data = nm.concat([g.data for g in grids], axis=1)
        merged.append(TokenGrid(grids[0].height, grids[0].width, data))
    return FeaturePyramid(tuple(merged))


def _bilinear_matrix(src_side, dst_side):
    """Constant (dst^2, src^2) matrix performing align-corners upsampling."""
    if src_side == dst_side:
        return np.eye(src_side * src_side)
    pos = (np.linspace(0, src_side - 1, dst_side) if dst_side > 1
           else np.zeros(1))
    i0 = np.clip(np.floor(pos).astype(int), 0, max(src_side - 2, 0))
    w = pos - i0
    i1 = np.minimum(i0 + 1, src_side - 1)
    a = np.zeros((dst_side, src_side))
    a[np.arange(dst_side), i0] += 1 - w
    a[np.arange(dst_side), i1] += w
    return np.einsum("yi,xj->yxij", a, a).reshape(dst_side * dst_side,
                                                  src_side * src_side)


def upsample_tokens(grid, dst_side):
    """Bilinear upsampling of a TokenGrid via a constant matrix product."""
    from .tokenizers import TokenGrid
    m = nm.tensor(_bilinear_matrix(grid.height, dst_side))
    return TokenGrid(dst_side, dst_side, nm.matmul(m, grid.data))


def init_seg_head(params, rng, name, stage_widths, n_classes, width=128):
    # Fan-in init throughout: the decoder trains from scratch at a small
    # fixed lr, so it must produce O(input)-scale logits from step one.
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    for i, d in enumerate(stage_widths):
        init_layer_norm(params, f"{name}/norm{i}", d)
        init_linear(params, rng, f"{name}/proj{i}", d, width, std=d ** -0.5)
    fan_in = width * len(stage_widths) * 9
    params[f"{name}/conv/w"] = nm.parameter(
        trunc_normal(rng, (width, width * len(stage_widths), 3, 3),
                     std=fan_in ** -0.5))
    params[f"{name}/conv/b"] = nm.parameter(np.zeros(width))
    init_linear(params, rng, f"{name}/cls", width, n_classes,
                std=width ** -0.5)


def seg_head_forward(params, name, pyramid, stages=None):
    """Project, upsample, refine, classify; logits at the finest stage."""
    maps = pyramid.maps if stages is None else [pyramid.maps[i]
                                                for i in stages]
    if not maps:
        raise ValueError("no pyramid stages selected")
    side = max(m.height for m in maps)
    cols = []
    for i, m in enumerate(maps):
        # normalize encoder features per token: stage activation scales span
        # orders of magnitude and the head trains at a small fixed lr
        p = linear(params, f"{name}/proj{i}",
                   layer_norm_affine(params, f"{name}/norm{i}", m.data))
        from .tokenizers import TokenGrid
        up = upsample_tokens(TokenGrid(m.height, m.width, p), side)
        cols.append(up.data)
    feat = nm.concat(cols, axis=1)                   # (side^2, width*S)
    cw = params[f"{name}/conv/w"]
    ch = feat.shape[1]
    img = feat.transpose(1, 0).reshape(1, ch, side, side)
    refined = nm.conv2d(img, cw, params[f"{name}/conv/b"], stride=1, pad=1)
    refined = nm.gelu(refined)
    d = refined.shape[1]
    tokens = refined.reshape(d, side * side).transpose(1, 0)
    logits = linear(params, f"{name}/cls", tokens)
    from .tokenizers import TokenGrid
    return TokenGrid(side, side, logits)


def _cross_entropy(logits_grid, labels, n_classes):
    """Mean CE after bilinear upsampling of logits to the label grid."""
    lh = labels.shape[0]
    up = upsample_tokens(logits_grid, lh)
    logits = up.data                                 # (lh*lh, K)
    probs = nm.softmax(logits, axis=-1)
    onehot = np.eye(n_classes)[labels.reshape(-1)]
    p_true = nm.sum_(probs * nm.tensor(onehot), axis=-1)
    return nm.mean(nm.log(p_true)) * (-1.0)


# ---------------------------------------------------------------------------
# probing
# ---------------------------------------------------------------------------

def miou(pred, truth, n_classes):
    """Per-class IoU and the mean over classes present in pred or truth."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise nm.ShapeError("prediction and truth shapes differ")
    per_class = {}
    for c in range(n_classes):
        inter = int(np.sum((pred == c) & (truth == c)))
        union = int(np.sum((pred == c) | (truth == c)))
        if union == 0:
            continue
        per_class[c] = inter / union
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


def make_probe_dataset(seed, suite, count, sensor_ids=("s2", "s1"),
                       label_side=16, n_classes=6):
    """Synthetic segmentation set: rasters plus argmax-material labels."""
    from .synth import generate_scene, render_sensor, suite_by_id
    specs = suite_by_id(suite)
    data = []
    for i in range(count):
        scene = generate_scene(nm.derive_seed(seed, "probe-scene", i),
                               suite, n_materials=n_classes)
        rasters = {sid: render_sensor(scene, specs[sid], seed + i)
                   for sid in sensor_ids}
        maps = scene.material_maps
        f = maps.shape[1] // label_side
        coarse = maps.reshape(n_classes, label_side, f, label_side,
                              f).mean(axis=(2, 4))
        labels = coarse.argmax(axis=0)
        data.append((rasters, labels))
    return data


def train_probe(dataset, encoder_params, suite, groupings, arch, n_classes,
                epochs=100, lr=1e-4, head_width=128, seed=0, stages=None):
    """Fit a segmentation head on frozen-encoder features.

    Features are computed once (the encoder receives no gradient and is
    never updated), then the head trains with AdamW and cosine decay.
    Returns (head params, report dict).
    """
    if not dataset:
        raise ValueError("empty probe dataset")
    pyramids = []
    with nm.no_grad():
        for rasters, _ in dataset:
            _, pyr = encode(encoder_params, suite, groupings, rasters, arch)
            pyramids.append(pyr)
    stage_widths = [m.dim for m in pyramids[0].maps]
    if stages is not None:
        stage_widths = [stage_widths[i] for i in stages]

    head = {}
    init_seg_head(head, nm.stream(seed, "seg-head"), "head", stage_widths,
                  n_classes, width=head_width)
    cfg = OptimConfig(peak_lr=lr, weight_decay=1e-4, warmup_frac=0.0)
    opt = AdamW(head, cfg)
    total = epochs * len(dataset)
    step = 0
    for _ in range(epochs):
        for pyr, (_, labels) in zip(pyramids, dataset):
            logits = seg_head_forward(head, "head", pyr, stages=stages)
            loss = _cross_entropy(logits, labels, n_classes)
            nm.backward(loss)
            step += 1
            opt.step(head, schedules(step, total, cfg)["lr"])

    correct = total_px = 0
    ious, means = {}, []
    for pyr, (_, labels) in zip(pyramids, dataset):
        logits = seg_head_forward(head, "head", pyr, stages=stages)
        up = upsample_tokens(logits, labels.shape[0])
        pred = up.data.data.argmax(axis=1).reshape(labels.shape)
        per_class, mean = miou(pred, labels, n_classes)
        means.append(mean)
        for c, v in per_class.items():
            ious.setdefault(c, []).append(v)
        correct += int((pred == labels).sum())
        total_px += labels.size
    report = {
        "pixel_accuracy": correct / total_px,
        "miou": float(np.mean(means)),
        "per_class_iou": {c: float(np.mean(v)) for c, v in sorted(
            ious.items())},
    }
    return head, report


def evaluation_report(report):
    lines = ["class  iou"]
    for c, v in report["per_class_iou"].items():
        lines.append(f"{c:>5}  {v:.4f}")
    lines.append(f"mean iou: {report['miou']:.4f}")
    lines.append(f"pixel accuracy: {report['pixel_accuracy']:.4f}")
    return "\n".join(lines)
