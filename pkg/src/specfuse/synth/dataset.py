"""On-disk multisensor dataset.

One plain-text index file lists every location with its sensor set,
timestamps, and the CRC-32 of its payload; each location stores its rasters
in one binary tensor container.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numerics.rng import stream
from ..numerics.serialize import read_tensors, write_tensors
from .scene import generate_scene, render_sensor
from .sensors import HSI, suite_by_id

__all__ = ["MultiSample", "DatasetError", "make_samples",
           "write_dataset", "read_dataset"]

INDEX_NAME = "index.txt"


class DatasetError(IOError):
    """Missing, corrupted, or inconsistent dataset files."""


@dataclass
class MultiSample:
    location_id: str
    rasters: dict            # sensor id -> ndarray (C_s, crop, crop)
    timestamps: dict         # sensor id -> day index
    available: tuple = field(default=None)

    def __post_init__(self):
        if self.available is None:
            self.available = tuple(sorted(self.rasters))
        else:
            self.available = tuple(sorted(self.available))
        if set(self.available) != set(self.rasters):
            raise ValueError("available set does not match rasters")


def make_samples(seed, suite, count, min_sensors=5, max_sensors=7,
                 n_materials=6, noise_sigma=None):
    """Generate `count` co-registered synthetic samples.

    The four non-HSI sensors are always present; availability is varied by
    drawing a non-empty HSI subset, which yields 5..7 sensors as in the
    emulated corpus. Smaller suites fall back to using every sensor.
    """
    specs = list(suite)
    hsi_ids = [s.id for s in specs if s.kind == HSI]
    other_ids = [s.id for s in specs if s.kind != HSI]
    samples = []
    for i in range(count):
        rng = stream(seed, "sample", i)
        if hsi_ids and other_ids:
            lo = max(1, min_sensors - len(other_ids))
            hi = min(len(hsi_ids), max_sensors - len(other_ids))
            n_hsi = int(rng.integers(lo, hi + 1))
            chosen = list(rng.choice(hsi_ids, size=n_hsi, replace=False))
            available = sorted(other_ids + chosen)
        else:
            available = sorted(s.id for s in specs)
        scene = generate_scene(seed * 100003 + i, specs)
        by_id = suite_by_id(specs)
        rasters = {sid: render_sensor(scene, by_id[sid], seed * 100003 + i,
                                      noise_sigma=noise_sigma)
                   for sid in available}
        timestamps = {sid: int(rng.integers(0, 365)) for sid in available}
        samples.append(MultiSample(f"loc{i:06d}", rasters, timestamps, available))
    return samples


def _sample_path(root, location_id):
    return Path(root) / f"{location_id}.bin"


def write_dataset(samples, path):
    """Write samples plus an index; round trips are bit-exact."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        tensors = {}
        for sid in s.available:
            tensors[f"raster/{sid}"] = s.rasters[sid]
            tensors[f"timestamp/{sid}"] = np.array(float(s.timestamps[sid]))
        fpath = _sample_path(root, s.location_id)
        write_tensors(fpath, tensors)
        crc = zlib.crc32(fpath.read_bytes())
        ts = ",".join(f"{sid}:{s.timestamps[sid]}" for sid in s.available)
        lines.append(f"loc={s.location_id} sensors={','.join(s.available)} "
                     f"timestamps={ts} crc={crc:08x}")
    (root / INDEX_NAME).write_text("\n".join(lines) + "\n")


def read_index(path):
    root = Path(path)
    index_file = root / INDEX_NAME
    if not index_file.exists():
        raise DatasetError(f"no index file at {index_file}")
    entries = []
    for line in index_file.read_text().splitlines():
        if not line.strip():
            continue
        kv = dict(part.split("=", 1) for part in line.split())
        entry = {
            "location_id": kv["loc"],
            "sensors": kv["sensors"].split(","),
            "timestamps": {k: int(v) for k, v in
                           (p.split(":") for p in kv["timestamps"].split(","))},
            "crc": int(kv["crc"], 16),
        }
        entries.append(entry)
    return entries


def read_sample(root, entry):
    fpath = _sample_path(root, entry["location_id"])
    if not fpath.exists():
        raise DatasetError(f"missing payload for {entry['location_id']}")
    raw = fpath.read_bytes()
    if zlib.crc32(raw) != entry["crc"]:
        raise DatasetError(f"checksum mismatch for location {entry['location_id']}")
    tensors = read_tensors(fpath)
    rasters, timestamps = {}, {}
    for name, arr in tensors.items():
        kind, sid = name.split("/", 1)
        if kind == "raster":
            rasters[sid] = arr
        elif kind == "timestamp":
            timestamps[sid] = int(arr)
    if set(rasters) != set(entry["sensors"]):
        raise DatasetError(f"index/payload sensor mismatch for "
                           f"{entry['location_id']}")
    return MultiSample(entry["location_id"], rasters, timestamps,
                       tuple(entry["sensors"]))


def read_dataset(path):
    root = Path(path)
    return [read_sample(root, e) for e in read_index(root)]
