"""Hardware configuration: device/cluster descriptions and the arithmetic
that sizes the MAC-tree array to the memory system."""

import json
import math
import os
from dataclasses import dataclass, field, asdict

from .errors import CapacityExceeded, InvalidDeviceCount

FP16_BYTES = 2

# Ratio below which the compute array is considered starved by the memory
# system.  The FPGA configuration peaks at 450.56 GB/s against a 460 GB/s
# memory, so strict >= 1.0 would reject a working machine.
STARVATION_MARGIN = 0.95

_PRESET_DIR_ENV = "LPUSIM_PRESET_DIR"


def _preset_dir():
    override = os.environ.get(_PRESET_DIR_ENV)
    if override:
        return override
    return os.path.join(os.path.dirname(__file__), "presets")


def derive_mac_trees(hbm_bandwidth: float, vector_dim: int, freq_hz: float) -> int:
    """Number of MAC trees (power of two) whose streaming rate best matches
    the memory bandwidth: minimizes |log2(l) - log2(bw / (v * 2B * freq))|,
    rounding up on ties."""
    if hbm_bandwidth <= 0 or vector_dim <= 0 or freq_hz <= 0:
        raise ValueError("all inputs must be positive")
    if vector_dim & (vector_dim - 1):
        raise ValueError("vector_dim must be a power of two")
    target = math.log2(hbm_bandwidth / (vector_dim * FP16_BYTES * freq_hz))
    lo = math.floor(target)
    # Tie (x.5) rounds up; otherwise nearest integer exponent.
    exp = lo if (target - lo) < 0.5 else lo + 1
    return 2 ** max(exp, 0)


def sxe_peak_bandwidth(mac_trees: int, vector_dim: int, freq_hz: float) -> float:
    """Peak operand intake of the MAC-tree array in bytes/s: l * v * 2B * freq."""
    if mac_trees <= 0 or vector_dim <= 0 or freq_hz <= 0:
        raise ValueError("all inputs must be positive")
    return mac_trees * vector_dim * FP16_BYTES * freq_hz


@dataclass(frozen=True)
class DeviceConfig:
    """One device: memory system, compute array, local storage, and link ports.

    Immutable after construction; safe to share across threads.
    """

    name: str
    hbm_bandwidth: float          # bytes/s, aggregate over all channels
    hbm_capacity: float           # bytes
    num_channels: int
    freq_hz: float
    mac_trees: int                # tile width l
    vector_dim: int = 64          # tile height v
    burst_bytes: int = 64         # per-channel transaction granularity
    lmu_banks: int = 8
    lmu_bytes: int = 32 * 1024 * 1024
    lmu_vector_regs: int = 64
    lmu_scalar_regs: int = 64
    sync_buffer_bytes: int = 256 * 1024
    link_bandwidth: float = 25e9          # bytes/s per direction per port
    link_hop_latency: float = 500e-9      # seconds per hop
    # Microarchitectural constants (tunable; see timing model docs).
    sxe_pipeline_depth: int = 8    # cycles from last tile in to result visible
    oiu_queue_tiles: int = 4       # streamed-operand prefetch depth
    oiu_issue_cycles: int = 4      # per-instruction microcode/issue overhead
    vxe_lanes: int = 8             # reduced fan-in relative to vector_dim
    vxe_const_cycles: int = 64     # fixed pipeline cost per vector op

    def __post_init__(self):
        if self.mac_trees & (self.mac_trees - 1) or self.mac_trees <= 0:
            raise ValueError("mac_trees must be a power of two")
        if self.vector_dim & (self.vector_dim - 1) or self.vector_dim <= 0:
            raise ValueError("vector_dim must be a power of two")
        per_channel = self.hbm_bandwidth / self.num_channels
        if not math.isclose(per_channel * self.num_channels, self.hbm_bandwidth,
                            rel_tol=1e-9):
            raise ValueError("hbm_bandwidth must split evenly over channels")
        peak = sxe_peak_bandwidth(self.mac_trees, self.vector_dim, self.freq_hz)
        if peak < STARVATION_MARGIN * self.hbm_bandwidth:
            raise ValueError(
                f"compute array starved: peak {peak:.3e} B/s < "
                f"{STARVATION_MARGIN} x {self.hbm_bandwidth:.3e} B/s")

    @property
    def channel_bandwidth(self) -> float:
        return self.hbm_bandwidth / self.num_channels

    @property
    def tile_bytes(self) -> int:
        return self.vector_dim * self.mac_trees * FP16_BYTES

    @property
    def sxe_peak(self) -> float:
        return sxe_peak_bandwidth(self.mac_trees, self.vector_dim, self.freq_hz)

    def bytes_per_cycle(self) -> float:
        return self.hbm_bandwidth / self.freq_hz

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceConfig":
        return cls(**d)


VALID_DEVICE_COUNTS = (1, 2, 4, 8)

# partition name -> (ring count, ring size, closed ring?)
RING_PARTITIONS = {
    "1x1": (1, 1, False),
    "1x2": (1, 2, True),
    "4x2": (4, 2, False),   # four independent 2-lines on an 8-device loom
    "1x4": (1, 4, True),
    "2x4": (2, 4, False),   # two independent 4-lines
    "1x8": (1, 8, True),
}


def default_partition(n_devices: int) -> str:
    return {1: "1x1", 2: "1x2", 4: "1x4", 8: "1x8"}[n_devices]


@dataclass(frozen=True)
class ClusterConfig:
    """A homogeneous group of devices joined by reconfigurable ring links."""

    device: DeviceConfig
    num_devices: int
    ring_partition: str = ""

    def __post_init__(self):
        if self.num_devices not in VALID_DEVICE_COUNTS:
            raise InvalidDeviceCount(f"num_devices must be one of {VALID_DEVICE_COUNTS}")
        part = self.ring_partition or default_partition(self.num_devices)
        object.__setattr__(self, "ring_partition", part)
        if part not in RING_PARTITIONS:
            raise ValueError(f"unknown ring partition {part!r}")
        rings, size, _ = RING_PARTITIONS[part]
        if rings * size != self.num_devices:
            raise ValueError(
                f"partition {part} covers {rings * size} devices, have {self.num_devices}")

    @property
    def devices(self):
        return [self.device] * self.num_devices

    @property
    def total_capacity(self) -> float:
        return self.device.hbm_capacity * self.num_devices

    @property
    def total_bandwidth(self) -> float:
        return self.device.hbm_bandwidth * self.num_devices


def validate_fit(model_bytes: float, kv_bytes: float, cluster: ClusterConfig) -> None:
    """Raise CapacityExceeded unless model + KV fit the cluster, both in
    aggregate and as even per-device shards."""
    total = model_bytes + kv_bytes
    cap = cluster.total_capacity
    if total > cap:
        raise CapacityExceeded(total - cap)
    shard = total / cluster.num_devices
    if shard > cluster.device.hbm_capacity:
        raise CapacityExceeded(shard - cluster.device.hbm_capacity)


def load_device_preset(name: str) -> DeviceConfig:
    path = os.path.join(_preset_dir(), "arch", name + ".json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no arch preset {name!r} at {path}")
    with open(path) as f:
        return DeviceConfig.from_dict(json.load(f))


def list_device_presets():
    d = os.path.join(_preset_dir(), "arch")
    return sorted(p[:-5] for p in os.listdir(d) if p.endswith(".json"))
