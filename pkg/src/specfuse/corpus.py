"""Corpus-construction rules over synthetic acquisition metadata.

Mirrors the archive assembly pipeline: per-record quality control,
hyperspectral-anchored cross-sensor pairing with per-class time windows,
per-sensor temporal de-duplication and spread selection, and rebalancing of
over-represented sensor configurations by hierarchical clustering of
location embeddings. All thresholds live in PairingPolicy.

Boundary conventions (the source rules state thresholds without boundary
semantics): geo RMSE of exactly 60 m is kept, invalid fraction of exactly
1% is kept, HSI cloud fraction of exactly 10% is rejected, and two
acquisitions exactly `dedup_days` apart are both retained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .configs import PairingPolicy
from .numerics.rng import stream

__all__ = [
    "AcqRecord", "LocationEntry", "qc_filter", "rebalance", "pair_sensors",
    "temporal_filter", "validate_corpus", "build_archive", "run_pipeline",
    "write_records", "read_records", "summarize",
]

HSI_IDS = ("enmap", "desis", "emit")
SAR_IDS = ("s1",)
EMBED_DIM = 64
N_ARCHETYPES = 16

GEO_RMSE = "GEO_RMSE"
INVALID_FRAC = "INVALID_FRAC"
HSI_CLOUD = "HSI_CLOUD"


@dataclass(frozen=True)
class AcqRecord:
    location_id: str
    sensor_id: str
    timestamp: int           # day index
    cloud_frac: float
    geo_rmse: float
    invalid_frac: float

    def __post_init__(self):
        if not 0.0 <= self.cloud_frac <= 1.0:
            raise ValueError(f"cloud_frac {self.cloud_frac} outside [0,1]")
        if not 0.0 <= self.invalid_frac <= 1.0:
            raise ValueError(f"invalid_frac {self.invalid_frac} outside [0,1]")
        if self.geo_rmse < 0:
            raise ValueError("geo_rmse must be nonnegative")


@dataclass
class LocationEntry:
    location_id: str
    hsi_config: tuple        # sorted subset of HSI_IDS
    embedding: np.ndarray

    def __post_init__(self):
        self.hsi_config = tuple(sorted(self.hsi_config))
        if self.embedding.shape != (EMBED_DIM,):
            raise ValueError(f"embedding must be width {EMBED_DIM}")


# ---------------------------------------------------------------------------
# quality control
# ---------------------------------------------------------------------------

def qc_filter(records, policy):
    """Split records into kept and (record, rule-id) rejections."""
    kept, rejected = [], []
    for r in records:
        if r.geo_rmse > policy.geo_rmse_max:
            rejected.append((r, GEO_RMSE))
        elif r.invalid_frac > policy.invalid_frac_max:
            rejected.append((r, INVALID_FRAC))
        elif r.sensor_id in HSI_IDS and r.cloud_frac >= policy.hsi_cloud_max:
            rejected.append((r, HSI_CLOUD))
        else:
            kept.append(r)
    return kept, rejected


# ---------------------------------------------------------------------------
# rebalancing
# ---------------------------------------------------------------------------

def _protected(config):
    return "desis" in config or config == ("enmap",)


def _kmeans(points, k, rng, iters=30):
    n = len(points)
    if n <= k:
        return list(range(n)), np.arange(n)
    centers = points[rng.choice(n, size=k, replace=False)]
    assign = np.zeros(n, dtype=int)
    for it in range(iters):
        d = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
        new_assign = d.argmin(axis=1)
        if it > 0 and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = points[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return list(range(k)), assign


def _cluster_leaves(points, idx, rng, branching, levels):
    """Recursive k-means; returns leaf index lists ordered deterministically."""
    if levels == 0 or len(idx) <= branching:
        return [idx]
    _, assign = _kmeans(points[idx], branching, rng)
    leaves = []
    for c in range(int(assign.max()) + 1):
        sub = idx[assign == c]
        if len(sub):
            leaves.extend(_cluster_leaves(points, sub, rng, branching,
                                          levels - 1))
    return leaves


def rebalance(entries, targets, seed, branching=8, levels=3):
    """Pick location ids, protecting rare configurations.

    Any configuration containing DESIS, and the EnMAP-only configuration,
    is kept entirely. Other configurations are reduced to their target by
    clustering embeddings into a leaf hierarchy and drawing round-robin
    across leaves, which preserves embedding-space coverage.
    """
    by_config = {}
    for e in entries:
        by_config.setdefault(e.hsi_config, []).append(e)
    kept = []
    for config in sorted(by_config):
        group = sorted(by_config[config], key=lambda e: e.location_id)
        if _protected(config) or config not in targets:
            kept.extend(e.location_id for e in group)
            continue
        target = targets[config]
        if target > len(group):
            raise ValueError(
                f"target {target} exceeds population {len(group)} "
                f"for configuration {config}")
        if target == len(group):
            kept.extend(e.location_id for e in group)
            continue
        points = np.stack([e.embedding for e in group])
        rng = stream(seed, "rebalance", *config)
        leaves = _cluster_leaves(points, np.arange(len(group)), rng,
                                 branching, levels)
        # within each leaf, prefer points closest to the leaf centroid
        queues = []
        for leaf in leaves:
            centroid = points[leaf].mean(axis=0)
            order = sorted(leaf, key=lambda i: (
                float(((points[i] - centroid) ** 2).sum()),
                group[i].location_id))
            queues.append(list(order))
        picked = []
        while len(picked) < target:
            progressed = False
            for q in queues:
                if q and len(picked) < target:
                    picked.append(q.pop(0))
                    progressed = True
            if not progressed:
                break
        kept.extend(group[i].location_id for i in sorted(picked))
    return kept


# ---------------------------------------------------------------------------
# pairing and temporal rules
# ---------------------------------------------------------------------------

def _pair_window(sensor_id, policy):
    if sensor_id in SAR_IDS:
        return policy.sar_window, None
    return policy.optical_window, policy.optical_cloud_max


def pair_sensors(hsi_anchor, candidates, policy):
    """Pick the best partner per sensor relative to the anchor timestamp.

    Optical partners must fall within the optical window and below the
    pairing cloud ceiling; SAR only within its (much longer) window. The
    temporally closest candidate wins; ties go to the earlier timestamp.
    """
    best = {}
    for r in candidates:
        if r.location_id != hsi_anchor.location_id:
            raise ValueError("candidate from a different location")
        window, cloud_max = _pair_window(r.sensor_id, policy)
        gap = abs(r.timestamp - hsi_anchor.timestamp)
        if gap > window:
            continue
        if cloud_max is not None and r.cloud_frac >= cloud_max:
            continue
        cur = best.get(r.sensor_id)
        if cur is None:
            best[r.sensor_id] = r
            continue
        cur_gap = abs(cur.timestamp - hsi_anchor.timestamp)
        if gap < cur_gap or (gap == cur_gap
                             and r.timestamp < cur.timestamp):
            best[r.sensor_id] = r
    return best


def temporal_filter(records, policy):
    """De-duplicate then spread-select one sensor's records at a location.

    records must be sorted by timestamp. Greedy earliest-first removal of
    records closer than dedup_days to anything already retained, then
    farthest-point selection down to max_timestamps (first pick earliest).
    """
    times = [r.timestamp for r in records]
    if times != sorted(times):
        raise ValueError("temporal_filter expects records sorted by time")
    deduped = []
    for r in records:
        if all(abs(r.timestamp - k.timestamp) >= policy.dedup_days
               for k in deduped):
            deduped.append(r)
    if len(deduped) <= policy.max_timestamps:
        return deduped
    chosen = [deduped[0]]
    rest = deduped[1:]
    while len(chosen) < policy.max_timestamps:
        gaps = [min(abs(r.timestamp - c.timestamp) for c in chosen)
                for r in rest]
        best = int(np.argmax(gaps))  # argmax takes the earliest on ties
        chosen.append(rest.pop(best))
    return sorted(chosen, key=lambda r: r.timestamp)


# ---------------------------------------------------------------------------
# synthetic archive and pipeline
# ---------------------------------------------------------------------------

ALL_SENSORS = HSI_IDS + ("s2", "s1", "oli", "lst")
NON_HSI = ("s2", "s1", "oli", "lst")


def build_archive(seed, n_locations):
    """Synthetic acquisition metadata with recoverable embedding structure."""
    arch_rng = stream(seed, "archetypes")
    archetypes = arch_rng.normal(size=(N_ARCHETYPES, EMBED_DIM)) * 3.0
    records, entries = [], []
    hsi_powerset = [c for i in range(1, 2 ** len(HSI_IDS))
                    for c in [tuple(s for b, s in enumerate(HSI_IDS)
                                    if i >> b & 1)]]
    for li in range(n_locations):
        rng = stream(seed, "location", li)
        loc = f"loc{li:06d}"
        config = tuple(sorted(hsi_powerset[int(rng.integers(
            len(hsi_powerset)))]))
        a = int(rng.integers(N_ARCHETYPES))
        emb = archetypes[a] + rng.normal(size=EMBED_DIM) * 0.3
        entries.append(LocationEntry(loc, config, emb))
        # acquisitions cluster around a per-location campaign start, so a
        # realistic share of locations can satisfy the optical window
        base = int(rng.integers(0, 1100))
        for sid in config + NON_HSI:
            span = 120 if sid in HSI_IDS else 300
            for _ in range(int(rng.integers(2, 8))):
                records.append(AcqRecord(
                    loc, sid, base + int(rng.integers(0, span)),
                    cloud_frac=float(np.clip(rng.beta(1.0, 10.0), 0, 1)),
                    geo_rmse=float(abs(rng.normal(25.0, 18.0))),
                    invalid_frac=float(np.clip(abs(rng.normal(0, 0.006)),
                                               0, 1)),
                ))
    records.sort(key=lambda r: (r.location_id, r.sensor_id, r.timestamp))
    return records, entries


@dataclass
class CorpusResult:
    kept_locations: list
    kept_records: dict       # location -> sensor -> [AcqRecord]
    anchors: dict            # location -> AcqRecord
    stage_counts: dict
    rejections: dict         # rule -> count
    config_counts: dict      # hsi_config -> kept location count


def run_pipeline(records, entries, policy=None, targets=None, seed=0):
    """QC -> pairing -> temporal filtering -> rebalancing."""
    policy = policy or PairingPolicy()
    entry_by_loc = {e.location_id: e for e in entries}
    kept, rejected = qc_filter(records, policy)
    rejections = {}
    for _, rule in rejected:
        rejections[rule] = rejections.get(rule, 0) + 1

    by_loc = {}
    for r in kept:
        by_loc.setdefault(r.location_id, {}).setdefault(
            r.sensor_id, []).append(r)

    paired_locs, anchors, paired_records = [], {}, {}
    for loc in sorted(by_loc):
        sensors = by_loc[loc]
        hsi_here = [s for s in HSI_IDS if s in sensors]
        if not hsi_here:
            continue
        anchor = min((sensors[s][0] for s in hsi_here),
                     key=lambda r: r.timestamp)
        candidates = [r for s in NON_HSI for r in sensors.get(s, [])]
        best = pair_sensors(anchor, candidates, policy)
        if set(best) != set(NON_HSI):
            continue
        paired_locs.append(loc)
        anchors[loc] = anchor
        paired_records[loc] = {
            s: temporal_filter(sorted(rs, key=lambda r: r.timestamp),
                               policy)
            for s, rs in sensors.items()}

    pool = [entry_by_loc[loc] for loc in paired_locs]
    kept_locs = sorted(rebalance(pool, targets or {}, seed))
    kept_set = set(kept_locs)

    config_counts = {}
    for loc in kept_locs:
        cfg = entry_by_loc[loc].hsi_config
        config_counts[cfg] = config_counts.get(cfg, 0) + 1
    return CorpusResult(
        kept_locations=kept_locs,
        kept_records={loc: paired_records[loc] for loc in kept_locs},
        anchors={loc: anchors[loc] for loc in kept_locs},
        stage_counts={
            "raw": len(records),
            "qc_kept": len(kept),
            "paired_locations": len(paired_locs),
            "kept_locations": len(kept_locs),
        },
        rejections=rejections,
        config_counts=config_counts,
    )


def validate_corpus(result, raw_records, policy=None):
    """Independent re-derivation of every rule; returns violation strings."""
    policy = policy or PairingPolicy()
    violations = []
    raw_by_key = {}
    for r in raw_records:
        raw_by_key.setdefault((r.location_id, r.sensor_id), []).append(r)
    for loc in result.kept_locations:
        anchor = result.anchors[loc]
        sensors = result.kept_records[loc]
        for sid, recs in sensors.items():
            times = sorted(r.timestamp for r in recs)
            if len(recs) > policy.max_timestamps:
                violations.append(f"{loc}/{sid}: {len(recs)} timestamps")
            for a, b in zip(times, times[1:]):
                if b - a < policy.dedup_days:
                    violations.append(f"{loc}/{sid}: {a} and {b} too close")
            for r in recs:
                if r.geo_rmse > policy.geo_rmse_max:
                    violations.append(f"{loc}/{sid}: geo_rmse {r.geo_rmse}")
                if r.invalid_frac > policy.invalid_frac_max:
                    violations.append(
                        f"{loc}/{sid}: invalid_frac {r.invalid_frac}")
                if sid in HSI_IDS and r.cloud_frac >= policy.hsi_cloud_max:
                    violations.append(
                        f"{loc}/{sid}: cloud_frac {r.cloud_frac}")
        for sid in NON_HSI:
            cands = [r for r in raw_by_key.get((loc, sid), [])]
            window, cloud_max = _pair_window(sid, policy)
            ok = any(abs(r.timestamp - anchor.timestamp) <= window
                     and (cloud_max is None or r.cloud_frac < cloud_max)
                     and r.geo_rmse <= policy.geo_rmse_max
                     and r.invalid_frac <= policy.invalid_frac_max
                     for r in cands)
            if not ok:
                violations.append(f"{loc}: no valid {sid} partner")
    return violations


# ---------------------------------------------------------------------------
# plain-text record IO and reporting
# ---------------------------------------------------------------------------

_FIELDS = ("location_id", "sensor_id", "timestamp", "cloud_frac",
           "geo_rmse", "invalid_frac")


def write_records(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(" ".join(f"{k}={getattr(r, k)}" for k in _FIELDS)
                     + "\n")


def read_records(path):
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            kv = dict(part.split("=", 1) for part in line.split())
            records.append(AcqRecord(
                kv["location_id"], kv["sensor_id"], int(kv["timestamp"]),
                float(kv["cloud_frac"]), float(kv["geo_rmse"]),
                float(kv["invalid_frac"])))
    return records


def summarize(result):
    lines = ["stage counts:"]
    for k, v in result.stage_counts.items():
        lines.append(f"  {k}: {v}")
    lines.append("rejections:")
    for k in sorted(result.rejections):
        lines.append(f"  {k}: {result.rejections[k]}")
    lines.append("kept per configuration:")
    for cfg in sorted(result.config_counts):
        lines.append(f"  {'+'.join(cfg)}: {result.config_counts[cfg]}")
    return "\n".join(lines)
