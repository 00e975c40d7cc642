"""Latent scene generation and per-sensor rendering.

A scene is a linear spectral mixture: K smooth abundance fields over the
common footprint plus K smooth reflectance curves over 400-2500 nm. SAR and
LST carry their own correlated fields. Rendering down-samples to each
sensor's ground resolution and point-samples the material spectra at its
band centers, so cross-sensor renders are consistent by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics.rng import stream
from .sensors import HSI, LST, MSI, SAR

__all__ = ["LatentScene", "generate_scene", "render_sensor", "default_noise_sigma"]

SPECTRUM_LO = 350.0
SPECTRUM_HI = 2550.0
N_KNOTS = 12


def _gauss_kernel(sigma):
    r = max(1, int(3 * sigma))
    x = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth2d(field, sigma):
    """Separable Gaussian blur with reflect padding."""
    k = _gauss_kernel(sigma)
    r = len(k) // 2
    for axis in (0, 1):
        f = np.moveaxis(field, axis, -1)
        fp = np.pad(f, [(0, 0)] * (f.ndim - 1) + [(r, r)], mode="reflect")
        win = np.lib.stride_tricks.sliding_window_view(fp, len(k), axis=-1)
        field = np.moveaxis(win @ k, -1, axis)
    return field


def _catmull_rom(knot_x, knot_y, x):
    """Cubic Catmull-Rom interpolation, clamped outside the knot range."""
    x = np.clip(x, knot_x[0], knot_x[-1])
    idx = np.clip(np.searchsorted(knot_x, x) - 1, 0, len(knot_x) - 2)
    x0 = knot_x[idx]
    x1 = knot_x[idx + 1]
    t = (x - x0) / (x1 - x0)
    # linear tangent extrapolation at the ends keeps affine knots exact
    yp = np.concatenate([[2 * knot_y[0] - knot_y[1]], knot_y,
                         [2 * knot_y[-1] - knot_y[-2]]])
    p0, p1, p2, p3 = yp[idx], yp[idx + 1], yp[idx + 2], yp[idx + 3]
    m1 = 0.5 * (p2 - p0)
    m2 = 0.5 * (p3 - p1)
    t2 = t * t
    t3 = t2 * t
    return ((2 * t3 - 3 * t2 + 1) * p1 + (t3 - 2 * t2 + t) * m1
            + (-2 * t3 + 3 * t2) * p2 + (t3 - t2) * m2)


@dataclass
class LatentScene:
    material_maps: np.ndarray      # (K, H, W), rows sum to 1 per pixel
    spectra_knots: np.ndarray      # (K, N_KNOTS) reflectance values
    knot_wavelengths: np.ndarray   # (N_KNOTS,)
    sar_texture: np.ndarray        # (2, H, W)
    lst_field: np.ndarray          # (1, H, W)

    @property
    def resolution(self):
        return self.material_maps.shape[1]

    @property
    def n_materials(self):
        return self.material_maps.shape[0]

    def spectra_at(self, wavelengths):
        """Sample the K material reflectance curves: returns (K, C)."""
        return np.stack([
            _catmull_rom(self.knot_wavelengths, ky, np.asarray(wavelengths))
            for ky in self.spectra_knots
        ])


def generate_scene(seed, suite, n_materials=6, smoothing=2.0):
    """Deterministic smooth scene over the suite's common footprint."""
    if not suite:
        raise ValueError("suite must be non-empty")
    min_gsd = min(s.gsd for s in suite)
    footprint = suite[0].footprint_m
    res = int(round(footprint / min_gsd))

    rng = stream(seed, "scene")
    fields = _smooth2d(rng.normal(size=(n_materials, res, res)).transpose(1, 2, 0),
                       smoothing).transpose(2, 0, 1)
    # softmax across materials: positive, sums to one per pixel
    z = 4.0 * (fields - fields.max(axis=0, keepdims=True))
    e = np.exp(z)
    maps = e / e.sum(axis=0, keepdims=True)

    knot_x = np.linspace(SPECTRUM_LO, SPECTRUM_HI, N_KNOTS)
    knots = rng.uniform(0.05, 0.95, size=(n_materials, N_KNOTS))

    sar = _smooth2d(rng.normal(size=(res, res, 2)), smoothing).transpose(2, 0, 1)
    sar = 0.5 + 0.15 * sar
    lst_noise = _smooth2d(rng.normal(size=(res, res, 1)), smoothing)[..., 0]
    lst = 0.35 + 0.4 * maps[0] + 0.05 * lst_noise

    return LatentScene(maps, knots, knot_x, sar, lst[None])


def _block_mean(x, f):
    c, h, w = x.shape
    return x.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))


def default_noise_sigma(kind):
    return {HSI: 0.01, MSI: 0.005, SAR: 0.05, LST: 0.02}[kind]


def render_sensor(scene, spec, noise_seed, noise_sigma=None):
    """Render one sensor's raster (C_s, crop_px, crop_px) from a scene."""
    min_side = scene.resolution
    factor = int(round(min_side / spec.crop_px))
    if factor * spec.crop_px != min_side:
        raise ValueError(f"scene resolution {min_side} not divisible for {spec.id}")
    if spec.kind in (HSI, MSI):
        ab = _block_mean(scene.material_maps, factor)
        spectra = scene.spectra_at(spec.band_centers)  # (K, C)
        clean = np.tensordot(spectra.T, ab, axes=1)    # (C, h, w)
    elif spec.kind == SAR:
        clean = _block_mean(scene.sar_texture, factor)
    elif spec.kind == LST:
        clean = _block_mean(scene.lst_field, factor)
    else:
        raise ValueError(f"unknown sensor kind {spec.kind}")
    sigma = default_noise_sigma(spec.kind) if noise_sigma is None else noise_sigma
    if sigma > 0:
        noise = stream(noise_seed, "render-noise", spec.id).normal(
            0.0, sigma, size=clean.shape)
        clean = clean + noise
    return np.clip(clean, 0.0, 1.0 + 5 * sigma)
