"""Multi-view construction and augmentation.

Each location yields a handful of global views (several sensors, large
crops) and local views (one sensor, small crops). The crop rectangle is
drawn once per view in footprint-relative coordinates and applied to every
sensor of that view at its own resolution, so views stay co-registered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics.rng import stream

__all__ = ["View", "build_views", "augment_view", "resize_bilinear"]

GLOBAL = "global"
LOCAL = "local"


@dataclass
class View:
    sensors: tuple           # sensor ids
    crop: tuple              # (y0, x0, side) footprint fractions
    rasters: dict            # sensor id -> (C_s, crop_px, crop_px)
    role: str                # GLOBAL or LOCAL


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize of a (C, H, W) array (align-corners sampling)."""
    c, h, w = x.shape
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2) if h > 1 else np.zeros(out_h, int)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2) if w > 1 else np.zeros(out_w, int)
    wy = (ys - y0) if h > 1 else np.zeros(out_h)
    wx = (xs - x0) if w > 1 else np.zeros(out_w)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = x[:, y0][:, :, x0] * (1 - wx) + x[:, y0][:, :, x1] * wx
    bot = x[:, y1][:, :, x0] * (1 - wx) + x[:, y1][:, :, x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def _crop_resize(raster, crop):
    """Apply a fractional square crop and resize back to the native size."""
    y0f, x0f, side = crop
    c, h, w = raster.shape
    ph = max(1, int(round(side * h)))
    py = int(round(y0f * h))
    px = int(round(x0f * w))
    py = min(py, h - ph)
    px = min(px, w - ph)
    window = raster[:, py:py + ph, px:px + ph]
    if ph == h:
        return window.copy()
    return resize_bilinear(window, h, w)


def _draw_crop(rng, scale_range):
    lo, hi = scale_range
    area = rng.uniform(lo, hi)
    side = float(np.sqrt(area))
    y0 = rng.uniform(0.0, 1.0 - side)
    x0 = rng.uniform(0.0, 1.0 - side)
    return (y0, x0, side)


def build_views(sample, plan, seed):
    """Draw global and local views for one location.

    Global views take plan.global_sensor_count sensors uniformly without
    replacement; each local view takes a single sensor from the union of
    the global views' sensors (with replacement across local views).
    """
    avail = list(sample.available)
    if len(avail) < plan.global_sensor_count:
        raise ValueError(
            f"{sample.location_id}: {len(avail)} sensors available, "
            f"{plan.global_sensor_count} needed per global view")
    rng = stream(seed, "views", sample.location_id)
    views = []
    union = set()
    for _ in range(plan.n_global):
        ids = tuple(sorted(rng.choice(avail, size=plan.global_sensor_count,
                                      replace=False)))
        union.update(ids)
        crop = _draw_crop(rng, plan.global_scale)
        rasters = {sid: _crop_resize(sample.rasters[sid], crop)
                   for sid in ids}
        views.append(View(ids, crop, rasters, GLOBAL))
    pool = sorted(union)
    for _ in range(plan.n_local):
        sid = pool[int(rng.integers(len(pool)))]
        crop = _draw_crop(rng, plan.local_scale)
        views.append(View((sid,), crop,
                          {sid: _crop_resize(sample.rasters[sid], crop)},
                          LOCAL))
    return views


def _gauss_kernel(sigma):
    r = max(1, int(round(3 * sigma)))
    t = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur(x, sigma):
    k = _gauss_kernel(sigma)
    r = len(k) // 2
    for axis in (1, 2):
        f = np.moveaxis(x, axis, -1)
        fp = np.pad(f, [(0, 0)] * (f.ndim - 1) + [(r, r)], mode="reflect")
        win = np.lib.stride_tricks.sliding_window_view(fp, len(k), axis=-1)
        x = np.moveaxis(win @ k, -1, axis)
    return x


def augment_view(view, seed, flip=True, jitter_mult=0.05, jitter_add=0.02,
                 blur_sigma=1.0, blur_prob=0.5):
    """Augment one view deterministically from the seed.

    The spatial flip is shared across the view's sensors; radiometric
    jitter and blur are drawn independently per sensor. With all amplitudes
    zero (and flip off) the raster values pass through unchanged.
    """
    rng = stream(seed, "augment", view.role, *view.sensors)
    do_flip = flip and rng.uniform() < 0.5
    out = {}
    for sid in view.sensors:
        x = view.rasters[sid]
        if do_flip:
            x = x[:, :, ::-1]
        gain = 1.0 + rng.uniform(-jitter_mult, jitter_mult) \
            if jitter_mult else 1.0
        bias = rng.uniform(-jitter_add, jitter_add) if jitter_add else 0.0
        x = gain * x + bias
        if blur_sigma and rng.uniform() < blur_prob:
            x = _blur(x, blur_sigma)
        out[sid] = np.ascontiguousarray(x)
    return View(view.sensors, view.crop, out, view.role)
