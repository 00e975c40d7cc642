"""Sensor suite definitions.

All sensors in a suite share one geographic footprint (gsd * crop_px
constant) and one spatial token grid (crop_px / patch_stride constant).
HSI inventories carry synthetic absorption gaps near 1400 and 1900 nm so
grouping logic must handle non-contiguous spectra.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BandInventory",
    "SensorSpec",
    "make_sensor_suite",
    "validate_suite",
    "HSI", "MSI", "SAR", "LST",
]

HSI = "HSI"
MSI = "MSI"
SAR = "SAR"
LST = "LST"

ABSORPTION_GAPS = ((1340.0, 1460.0), (1790.0, 1960.0))


@dataclass(frozen=True)
class BandInventory:
    centers: np.ndarray  # nm, strictly increasing
    gap_edges: tuple = ()

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        object.__setattr__(self, "centers", c)
        if len(c) > 1 and not np.all(np.diff(c) > 0):
            raise ValueError("band centers must be strictly increasing")
        for lo, hi in self.gap_edges:
            if np.any((c > lo) & (c < hi)):
                raise ValueError(f"band center inside gap ({lo}, {hi})")

    def __len__(self):
        return len(self.centers)

    def segments(self):
        """Indices of maximal gap-free runs of the inventory."""
        if not self.gap_edges:
            return [np.arange(len(self.centers))]
        edges = sorted(lo for lo, _ in self.gap_edges)
        labels = np.searchsorted(edges, self.centers)
        return [np.flatnonzero(labels == v) for v in np.unique(labels)]


@dataclass(frozen=True)
class SensorSpec:
    id: str
    kind: str
    bands: BandInventory
    gsd: float          # m / pixel
    crop_px: int        # input raster side
    patch_stride: int   # pixels per token
    patch_kernel: int   # conv kernel side
    group_count: int = 0  # spectral groups, HSI only

    @property
    def band_centers(self):
        return self.bands.centers

    @property
    def n_channels(self):
        return len(self.bands)

    @property
    def grid(self):
        return self.crop_px // self.patch_stride

    @property
    def footprint_m(self):
        return self.gsd * self.crop_px


def _even_inventory(lo, hi, n, gaps=()):
    """n centers spread over [lo, hi] minus gap intervals, evenly per segment."""
    segs = [(lo, hi)]
    for glo, ghi in sorted(gaps):
        nxt = []
        for slo, shi in segs:
            if ghi <= slo or glo >= shi:
                nxt.append((slo, shi))
            else:
                if slo < glo:
                    nxt.append((slo, glo))
                if ghi < shi:
                    nxt.append((ghi, shi))
        segs = nxt
    lengths = np.array([shi - slo for slo, shi in segs])
    alloc = np.floor(n * lengths / lengths.sum()).astype(int)
    order = np.argsort(-lengths)
    i = 0
    while alloc.sum() < n:
        alloc[order[i % len(segs)]] += 1
        i += 1
    centers = np.concatenate([
        np.linspace(slo, shi, a, endpoint=False) + (shi - slo) / (2 * a)
        for (slo, shi), a in zip(segs, alloc) if a > 0
    ])
    return BandInventory(np.sort(centers), tuple(gaps))


_S2_CENTERS = np.array([490., 560., 665., 705., 740., 783., 842., 865., 1610., 2190.])
_OLI_CENTERS = np.array([443., 482., 561., 655., 865., 1609., 2201.])


def make_sensor_suite(scale="paper"):
    """Sensor specs for the seven-sensor suite at paper or desk scale."""
    if scale == "paper":
        crops = {"enmap": 128, "desis": 128, "emit": 64,
                 "s2": 384, "s1": 384, "oli": 128, "lst": 128}
        enmap_bands = _even_inventory(420, 2450, 202, ABSORPTION_GAPS)
        desis_bands = _even_inventory(400, 1000, 215)
        emit_bands = _even_inventory(380, 2500, 244, ABSORPTION_GAPS)
        groups = {"enmap": 15, "desis": 10, "emit": 15}
    elif scale == "desk":
        crops = {"enmap": 16, "desis": 16, "emit": 8,
                 "s2": 48, "s1": 48, "oli": 16, "lst": 16}
        enmap_bands = _even_inventory(420, 2450, 24, ABSORPTION_GAPS)
        desis_bands = _even_inventory(400, 1000, 12)
        emit_bands = _even_inventory(380, 2500, 16, ABSORPTION_GAPS)
        groups = {"enmap": 4, "desis": 3, "emit": 3}
    else:
        raise ValueError(f"unknown scale {scale!r}")

    suite = [
        SensorSpec("enmap", HSI, enmap_bands, 30, crops["enmap"], 2, 3,
                   groups["enmap"]),
        SensorSpec("desis", HSI, desis_bands, 30, crops["desis"], 2, 3,
                   groups["desis"]),
        SensorSpec("emit", HSI, emit_bands, 60, crops["emit"], 1, 1,
                   groups["emit"]),
        SensorSpec("s2", MSI, BandInventory(_S2_CENTERS), 10, crops["s2"], 6, 7),
        SensorSpec("s1", SAR, BandInventory(np.array([0.0, 1.0])), 10,
                   crops["s1"], 6, 7),
        SensorSpec("oli", MSI, BandInventory(_OLI_CENTERS), 30, crops["oli"], 2, 3),
        SensorSpec("lst", LST, BandInventory(np.array([10900.0])), 30,
                   crops["lst"], 2, 3),
    ]
    validate_suite(suite)
    return suite


def validate_suite(suite):
    grids = {s.grid for s in suite}
    if len(grids) != 1:
        raise ValueError(f"suite token grids differ: {grids}")
    footprints = {s.footprint_m for s in suite}
    if len(footprints) != 1:
        raise ValueError(f"suite footprints differ: {footprints}")
    for s in suite:
        if s.crop_px % s.patch_stride:
            raise ValueError(f"{s.id}: crop {s.crop_px} not divisible by stride")


def suite_by_id(suite):
    return {s.id: s for s in suite}
