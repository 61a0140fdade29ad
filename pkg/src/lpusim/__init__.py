"""Simulator and compiler toolchain for a streamlined, bandwidth-matched
LLM-inference processor with ring-linked multi-device synchronization."""

__version__ = "0.1.0"

from .arch import (ClusterConfig, DeviceConfig, derive_mac_trees,
                   load_device_preset, sxe_peak_bandwidth, validate_fit)
from .model import (ModelConfig, ParamStore, kv_bytes, load_model_preset,
                    model_bytes, param_count, synth_params)

__all__ = [
    "ClusterConfig", "DeviceConfig", "ModelConfig", "ParamStore",
    "derive_mac_trees", "kv_bytes", "load_device_preset", "load_model_preset",
    "model_bytes", "param_count", "sxe_peak_bandwidth", "synth_params",
    "validate_fit", "__version__",
]
