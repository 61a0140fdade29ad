"""Memory mapping: head-wise and column-wise weight partitioning across
devices, burst-aligned tile placement round-robined over channels, and the
write-transposed Key layout that lets score reads stream without reshaping."""

import math
from dataclasses import dataclass, field

import numpy as np

from .arch import DeviceConfig, FP16_BYTES
from .errors import CapacityExceeded, IndexOutOfRange, InvalidDeviceCount, UnmappedTensor
from .model import ModelConfig, tensor_specs

VALID_DEVICE_COUNTS = (1, 2, 4, 8)

KIND_WEIGHT = "weight"
KIND_VEC = "vec"
KIND_KV_K = "kv_k"
KIND_KV_V = "kv_v"
KIND_IO = "io"


def tile_tensor(rows: int, cols: int, v: int, l: int) -> tuple:
    """Tile grid dimensions for a rows x cols tensor: ceil(rows/v) x ceil(cols/l).
    Out-of-range cells are zero padded."""
    if rows <= 0 or cols <= 0:
        raise ValueError("dimensions must be positive")
    return (rows + v - 1) // v, (cols + l - 1) // l


def _split_even(total: int, n: int) -> list:
    """Contiguous ranges covering [0, total), sizes as even as possible."""
    base, rem = divmod(total, n)
    ranges, start = [], 0
    for i in range(n):
        size = base + (1 if i < rem else 0)
        ranges.append((start, start + size))
        start += size
    return ranges


@dataclass(frozen=True)
class Partition:
    """Per-device ownership of heads, FFN columns/rows, and output-head columns.
    Norms, embeddings, and post-sync biases are replicated."""

    n_devices: int
    padded_heads: int
    head_ranges: tuple        # per device: (h0, h1) over padded head ids
    fc1_col_ranges: tuple
    fc2_row_ranges: tuple
    lmhead_col_ranges: tuple
    replicated_roles: tuple = ("embed", "pos", "ln1_g", "ln1_b", "ln2_g", "ln2_b",
                               "lnf_g", "lnf_b", "bo", "bfc2")

    def heads_of(self, device_id: int) -> range:
        h0, h1 = self.head_ranges[device_id]
        return range(h0, h1)


def partition_model(config: ModelConfig, n_devices: int) -> Partition:
    """Split attention head-wise and the FFN column-wise (fc1) / row-wise (fc2).
    Head count is padded up to a multiple of the device count; padded heads
    carry zero weights."""
    if n_devices not in VALID_DEVICE_COUNTS:
        raise InvalidDeviceCount(f"n_devices must be one of {VALID_DEVICE_COUNTS}")
    padded = ((config.num_heads + n_devices - 1) // n_devices) * n_devices
    return Partition(
        n_devices=n_devices,
        padded_heads=padded,
        head_ranges=tuple(_split_even(padded, n_devices)),
        fc1_col_ranges=tuple(_split_even(config.ffn_dim, n_devices)),
        fc2_row_ranges=tuple(_split_even(config.ffn_dim, n_devices)),
        lmhead_col_ranges=tuple(_split_even(config.vocab_size, n_devices)),
    )


@dataclass
class Region:
    """A contiguous mapped area on one device.

    Tiled regions (weights, KV) are addressed tile-by-tile in stream order:
    tile t lives at base + t * tile_bytes on channel (base/tile_bytes + t) % C.
    Stream order is column-set-major with rows inner, so one set of dot
    products finishes before the next set begins.  Within a tile, elements
    are column-major: one MAC tree's lane vector is contiguous.
    """

    region_id: int
    kind: str
    key: str                 # e.g. "wq.3", "kv_k.3.h5", "embed"
    device_id: int
    base: int
    rows: int                # logical (unpadded) rows
    cols: int
    row_tiles: int = 0       # zero for vec/io regions
    col_tiles: int = 0
    v: int = 0
    l: int = 0
    layer: int = -1
    head: int = -1

    @property
    def tile_bytes(self) -> int:
        return self.v * self.l * FP16_BYTES

    @property
    def n_tiles(self) -> int:
        return self.row_tiles * self.col_tiles

    @property
    def nbytes(self) -> int:
        if self.kind in (KIND_VEC, KIND_IO):
            return self.rows * self.cols * FP16_BYTES
        return self.n_tiles * self.tile_bytes

    def element_address(self, row: int, col: int) -> int:
        """Byte address of logical element (row, col)."""
        if not (0 <= row < self.row_tiles * self.v and 0 <= col < self.col_tiles * self.l):
            raise IndexOutOfRange(f"({row},{col}) outside padded {self.key}")
        t = (col // self.l) * self.row_tiles + (row // self.v)
        intra = (col % self.l) * self.v + (row % self.v)
        return self.base + t * self.tile_bytes + intra * FP16_BYTES

    def tile_address(self, t: int) -> int:
        return self.base + t * self.tile_bytes

    def tile_channel(self, t: int, num_channels: int) -> int:
        return ((self.base // self.tile_bytes) + t) % num_channels

    def stream_tiles(self):
        """Yield (t, tile_row, tile_col) in stream order: vertical walk."""
        for c in range(self.col_tiles):
            for r in range(self.row_tiles):
                yield c * self.row_tiles + r, r, c


class MemoryMap:
    """All regions of one device plus the round-robin placement bookkeeping."""

    def __init__(self, device_id: int, device: DeviceConfig):
        self.device_id = device_id
        self.device = device
        self.regions = {}
        self.by_key = {}
        self._cursor = 0
        self._next_id = 0

    def _align(self, nbytes: int) -> int:
        tb = self.device.tile_bytes
        return ((nbytes + tb - 1) // tb) * tb

    def add_tiled(self, kind, key, rows, cols, layer=-1, head=-1) -> Region:
        v, l = self.device.vector_dim, self.device.mac_trees
        rt, ct = tile_tensor(rows, cols, v, l)
        r = Region(self._next_id, kind, key, self.device_id, self._cursor,
                   rows, cols, rt, ct, v, l, layer, head)
        self._register(r)
        return r

    def add_flat(self, kind, key, rows, cols, layer=-1) -> Region:
        r = Region(self._next_id, kind, key, self.device_id, self._cursor,
                   rows, cols, layer=layer)
        self._register(r)
        return r

    def _register(self, r: Region):
        if r.key in self.by_key:
            raise ValueError(f"duplicate region key {r.key}")
        self.regions[r.region_id] = r
        self.by_key[r.key] = r
        self._next_id += 1
        self._cursor += self._align(r.nbytes)

    @property
    def mapped_bytes(self) -> int:
        return self._cursor

    def region(self, key: str) -> Region:
        try:
            return self.by_key[key]
        except KeyError:
            raise UnmappedTensor(key) from None

    def weight_regions(self):
        return [r for r in self.regions.values() if r.kind == KIND_WEIGHT]

    @property
    def total_weight_tiles(self) -> int:
        return sum(r.n_tiles for r in self.weight_regions())

    @property
    def total_weight_bytes(self) -> int:
        return sum(r.nbytes for r in self.weight_regions())

    def kv_write_address(self, layer: int, head: int, position: int,
                         element: int, which: str = "k") -> int:
        """Address at which KV element `element` of token `position` is written.

        Keys land transposed: a later stream read of the Key region yields
        K^T tiles in stream order with no reshape stage.  Values land
        position-major.  Consecutive positions are a full lane-group apart
        (v elements for Keys), never adjacent.
        """
        kind = KIND_KV_K if which == "k" else KIND_KV_V
        key = f"{kind}.{layer}.h{head}"
        r = self.by_key.get(key)
        if r is None:
            raise IndexOutOfRange(f"no KV region {key}")
        if not (0 <= position < (r.cols if which == "k" else r.rows)):
            raise IndexOutOfRange(f"position {position} outside KV region")
        if not (0 <= element < (r.rows if which == "k" else r.cols)):
            raise IndexOutOfRange(f"element {element} outside KV region")
        if which == "k":
            return r.element_address(element, position)
        return r.element_address(position, element)

    def dump_csv(self, fh):
        """One row per tile of every tiled region: debugging / golden tests."""
        fh.write("tensor,tile_row,tile_col,device,channel,address\n")
        C = self.device.num_channels
        for r in self.regions.values():
            if r.kind in (KIND_VEC, KIND_IO):
                continue
            for t, tr, tc in r.stream_tiles():
                fh.write(f"{r.key},{tr},{tc},{self.device_id},"
                         f"{r.tile_channel(t, C)},{r.tile_address(t)}\n")


def map_device(partition: Partition, config: ModelConfig, device: DeviceConfig,
               device_id: int = 0) -> MemoryMap:
    """Lay out one device's shard: streamed weights in compute order, then
    vector-path parameters, the per-head KV regions, and IO staging."""
    if device_id >= partition.n_devices:
        raise InvalidDeviceCount(f"device {device_id} outside partition")
    mm = MemoryMap(device_id, device)
    d, hd = config.d_model, config.head_dim
    h0, h1 = partition.head_ranges[device_id]
    local_cols = (h1 - h0) * hd                       # this device's slice of d
    f0, f1 = partition.fc1_col_ranges[device_id]
    r0, r1 = partition.fc2_row_ranges[device_id]
    v0, v1 = partition.lmhead_col_ranges[device_id]

    for layer in range(config.num_layers):
        for role in ("wq", "wk", "wv"):
            mm.add_tiled(KIND_WEIGHT, f"{role}.{layer}", d, local_cols, layer)
        mm.add_tiled(KIND_WEIGHT, f"wo.{layer}", local_cols, d, layer)
        mm.add_tiled(KIND_WEIGHT, f"fc1.{layer}", d, f1 - f0, layer)
        mm.add_tiled(KIND_WEIGHT, f"fc2.{layer}", r1 - r0, d, layer)
    mm.add_tiled(KIND_WEIGHT, "lmhead", d, v1 - v0)

    mm.add_flat(KIND_VEC, "embed", config.vocab_size, d)
    if config.pos_encoding == "learned":
        mm.add_flat(KIND_VEC, "pos", config.max_seq, d)
    for layer in range(config.num_layers):
        for role in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            if role.endswith("_b") and config.norm_kind != "layernorm":
                continue
            mm.add_flat(KIND_VEC, f"{role}.{layer}", 1, d, layer)
        for role, width in (("bq", local_cols), ("bk", local_cols), ("bv", local_cols),
                            ("bo", d), ("bfc1", f1 - f0), ("bfc2", d)):
            mm.add_flat(KIND_VEC, f"{role}.{layer}", 1, width, layer)
    mm.add_flat(KIND_VEC, "lnf_g", 1, d)
    if config.norm_kind == "layernorm":
        mm.add_flat(KIND_VEC, "lnf_b", 1, d)

    for layer in range(config.num_layers):
        for head in range(h0, h1):
            mm.add_tiled(KIND_KV_K, f"kv_k.{layer}.h{head}", hd, config.max_seq,
                         layer, head)
            mm.add_tiled(KIND_KV_V, f"kv_v.{layer}.h{head}", config.max_seq, hd,
                         layer, head)

    mm.add_flat(KIND_IO, "io_in", config.max_seq, 1)
    mm.add_flat(KIND_IO, "io_out", config.max_seq, 1)

    if mm.mapped_bytes > device.hbm_capacity:
        raise CapacityExceeded(mm.mapped_bytes - device.hbm_capacity)
    return mm


# Functional storage helpers: a region's contents held as one array in
# address order.  Element (row, col) of the padded matrix sits at
# buf[t * tile_elems + (col % l) * v + (row % v)].

def padded_matrix(region: Region, m: np.ndarray) -> np.ndarray:
    pr, pc = region.row_tiles * region.v, region.col_tiles * region.l
    out = np.zeros((pr, pc), dtype=np.float16)
    out[:m.shape[0], :m.shape[1]] = m
    return out


def matrix_to_stream(region: Region, m: np.ndarray) -> np.ndarray:
    """Serialize a logical matrix into the region's address-ordered buffer."""
    p = padded_matrix(region, m)
    rt, ct, v, l = region.row_tiles, region.col_tiles, region.v, region.l
    # (rt, v, ct, l) -> stream order (ct, rt, l, v): tile col-major inner.
    return p.reshape(rt, v, ct, l).transpose(2, 0, 3, 1).reshape(-1).copy()


def stream_to_matrix(region: Region, buf: np.ndarray) -> np.ndarray:
    """Reassemble the padded logical matrix from an address-ordered buffer."""
    rt, ct, v, l = region.row_tiles, region.col_tiles, region.v, region.l
    return buf.reshape(ct, rt, l, v).transpose(1, 3, 0, 2).reshape(rt * v, ct * l)
