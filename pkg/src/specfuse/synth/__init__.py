"""Synthetic multisensor world: sensor suites, scenes, rendering, dataset IO."""

from .dataset import (
    DatasetError,
    MultiSample,
    make_samples,
    read_dataset,
    read_index,
    read_sample,
    write_dataset,
)
from .scene import LatentScene, default_noise_sigma, generate_scene, render_sensor
from .sensors import (
    HSI,
    LST,
    MSI,
    SAR,
    BandInventory,
    SensorSpec,
    make_sensor_suite,
    suite_by_id,
    validate_suite,
)
