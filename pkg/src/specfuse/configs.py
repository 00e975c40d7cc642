"""Model and training configuration presets.

The paper preset mirrors the published architecture and schedules; the desk
preset is a proportionally shrunken configuration small enough for CPU
verification runs.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["ArchConfig", "ViewPlan", "LossConfig", "OptimConfig",
           "PairingPolicy", "arch_preset", "PRESETS"]


@dataclass(frozen=True)
class ArchConfig:
    d_token: int        # common token width after tokenization
    d_branch: int       # branch output width (shared-trunk input width)
    d_trunk: int        # trunk width after second pooling
    d_fusion: int       # cross-sensor fusion width
    depths: tuple       # blocks per stage; pooling block counts as the first
    heads: tuple        # heads per stage; doubled with each width doubling
    windows: tuple      # attention window per stage; 0 = global
    d_spec: int         # spectral group token width
    spec_layers: int
    spec_heads: int
    spec_fusion: int    # spectral aggregation width
    agg_heads: int
    fusion_heads: int
    proj_dim: int       # projector output width
    proj_hidden_mult: int = 2

    def stage_widths(self):
        return (self.d_token, self.d_branch, self.d_trunk)


PAPER_ARCH = ArchConfig(
    d_token=192, d_branch=384, d_trunk=768, d_fusion=768,
    depths=(2, 6, 10), heads=(2, 4, 8), windows=(8, 8, 0),
    d_spec=96, spec_layers=4, spec_heads=2, spec_fusion=192, agg_heads=2,
    fusion_heads=2, proj_dim=128,
)

DESK_ARCH = ArchConfig(
    d_token=32, d_branch=64, d_trunk=128, d_fusion=128,
    depths=(1, 2, 2), heads=(2, 4, 8), windows=(4, 4, 0),
    d_spec=16, spec_layers=2, spec_heads=2, spec_fusion=32, agg_heads=2,
    fusion_heads=2, proj_dim=16,
)

PRESETS = {"paper": PAPER_ARCH, "desk": DESK_ARCH}


def arch_preset(scale):
    try:
        return PRESETS[scale]
    except KeyError:
        raise ValueError(f"unknown scale preset {scale!r}") from None


@dataclass(frozen=True)
class ViewPlan:
    n_global: int = 2
    n_local: int = 4
    global_sensor_count: int = 4
    global_scale: tuple = (0.4, 1.0)
    local_scale: tuple = (0.1, 0.4)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.015           # regularization weight in [0, 1]
    sigreg_directions: int = 64
    sigreg_freqs: int = 17
    sigreg_freq_range: float = 4.0


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 1e-5
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_start: float = 0.996
    ema_end: float = 1.0


@dataclass(frozen=True)
class PairingPolicy:
    optical_window: int = 183    # days, ~6 months
    sar_window: int = 1461       # days, ~4 years
    optical_cloud_max: float = 0.05
    max_timestamps: int = 4
    dedup_days: int = 10
    geo_rmse_max: float = 60.0
    invalid_frac_max: float = 0.01
    hsi_cloud_max: float = 0.10
