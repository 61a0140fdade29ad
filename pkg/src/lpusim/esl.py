"""Multi-device synchronization over reconfigurable ring links: topology
tables, device-ID routing, the compute/communication overlap timeline with
its tail-latency accounting, and whole-cluster runs."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import isa
from .arch import ClusterConfig, DeviceConfig, RING_PARTITIONS, FP16_BYTES
from .codegen import STAGE_GENERATE, STAGE_SUMMARIZE
from .errors import BufferOverflow, CrossRing, IllegalPartition, LpuError
from .interp import Machine, SamplingParams, walk_stage
from .isa import Op
from .timing import EngineState, SimReport, TimingWalker

CW = "CW"
CCW = "CCW"


@dataclass(frozen=True)
class RingConfig:
    """Disjoint rings (or open lines) covering every device exactly once."""

    n_devices: int
    partition: str
    rings: tuple          # tuple of device-id tuples
    closed: bool

    def ring_of(self, device_id: int) -> int:
        for r, members in enumerate(self.rings):
            if device_id in members:
                return r
        raise CrossRing(f"device {device_id} in no ring")

    @property
    def ring_size(self) -> int:
        return len(self.rings[0])


def configure_rings(n_devices: int, partition: str) -> RingConfig:
    """Membership tables for one of the supported link partitions."""
    if partition not in RING_PARTITIONS:
        raise IllegalPartition(f"unknown partition {partition!r}")
    count, size, closed = RING_PARTITIONS[partition]
    if count * size != n_devices:
        raise IllegalPartition(
            f"partition {partition} needs {count * size} devices, have {n_devices}")
    rings = tuple(tuple(range(r * size, (r + 1) * size)) for r in range(count))
    return RingConfig(n_devices, partition, rings, closed)


def route(src: int, dst: int, ring: RingConfig):
    """Hop count and direction between two devices, resolved from device IDs.
    Closed rings take the shorter way, ties clockwise; lines have one path."""
    r = ring.ring_of(src)
    if ring.ring_of(dst) != r:
        raise CrossRing(f"{src} and {dst} are in different rings")
    members = ring.rings[r]
    i, j = members.index(src), members.index(dst)
    if i == j:
        return 0, "-"
    m = len(members)
    if ring.closed:
        cw = (j - i) % m
        ccw = m - cw
        return (cw, CW) if cw <= ccw else (ccw, CCW)
    return (j - i, CW) if j > i else (i - j, CCW)


@dataclass
class Packet:
    """One link transfer unit; payload granularity fixed by the P2P width."""

    source: int
    hop_count: int
    direction: str
    payload_len: int
    payload: bytes = b""


PACKET_PAYLOAD = 256


def packetize(source: int, data: bytes, hops: int, direction: str):
    return [Packet(source, hops, direction, min(PACKET_PAYLOAD, len(data) - off),
                   data[off:off + PACKET_PAYLOAD])
            for off in range(0, len(data), PACKET_PAYLOAD)]


class SyncBuffer:
    """Staging between the MAC-array writeback and the link, with per-source
    FIFO arbitration into local memory."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.queues = {}
        self.occupancy = 0

    def push(self, source: int, nbytes: int):
        self.occupancy += nbytes
        if self.occupancy > self.capacity:
            raise BufferOverflow(
                f"sync buffer {self.occupancy} B > {self.capacity} B")
        self.queues.setdefault(source, []).append(nbytes)

    def pop(self, source: int) -> int:
        n = self.queues[source].pop(0)
        self.occupancy -= n
        return n


def sync_timeline(compute_intervals, shard_bytes: int, ring: RingConfig,
                  link_bytes_per_cycle: float, hop_cycles: float,
                  next_compute: float = 0.0, sync_buffer_bytes: int = 1 << 20):
    """Overlap model of one synchronization.

    Column-task results transmit as they complete during the producing
    operation, and routers forward cut-through (hop latency per hop, no
    re-serialization).  After the last task only the tail remains: one
    shard serialization plus a hop per forwarding round, plus any backlog
    when the link could not drain the earlier rounds' volume during the
    compute span.  `next_compute` is follow-on work that does not need the
    gathered vector; back-to-back matrix ops hide the tail under it.
    Returns (last_arrival, exposed_comm_time)."""
    compute_intervals = list(compute_intervals)
    compute_end = max(compute_intervals)
    compute_start = min(compute_intervals)
    R = ring.ring_size
    if R == 1:
        return compute_end, 0.0
    if 2 * shard_bytes > sync_buffer_bytes:
        raise BufferOverflow(
            f"round of {shard_bytes} B needs {2 * shard_bytes} B staging, "
            f"buffer holds {sync_buffer_bytes} B")
    ser = shard_bytes / link_bytes_per_cycle
    span = compute_end - compute_start
    backlog = max(0.0, (R - 2) * ser - span)
    last_arrival = compute_end + backlog + ser + (R - 1) * hop_cycles
    exposed = max(0.0, last_arrival - compute_end - next_compute)
    if exposed < 1e-9:      # rounding noise is not exposure
        exposed = 0.0
    return last_arrival, exposed


def make_sync_model(device: DeviceConfig, ring: RingConfig):
    """Timing hook for RX instructions inside a device walk."""
    link_bpc = device.link_bandwidth / device.freq_hz
    hop_cycles = device.link_hop_latency * device.freq_hz

    def model(walker, tx_info):
        tx_ready, (sxe_start, sxe_end, col_sets), elems, mode = tx_info
        nbytes = elems * FP16_BYTES
        tasks = np.linspace(max(sxe_start, tx_ready - (sxe_end - sxe_start)),
                            tx_ready, max(col_sets, 1))
        return sync_timeline(tasks, nbytes, ring, link_bpc, hop_cycles,
                             sync_buffer_bytes=device.sync_buffer_bytes)

    return model


# --- functional lockstep cluster ---------------------------------------------

class ClusterSession:
    """Functional execution of N symmetric device programs in lockstep,
    exchanging partial results at sync points.  Partial sums accumulate in
    canonical source order, so every device ends a sync holding the
    bit-identical full vector."""

    def __init__(self, compiled_list, device: DeviceConfig, params,
                 sampling: SamplingParams | None = None):
        self.machines = []
        self.mailbox = {}
        for compiled in compiled_list:
            m = Machine(compiled, device, sampling)
            m.load_params(params)
            m.net = self._net
            self.machines.append(m)
        self.compiled = compiled_list[0]

    def _net(self, machine: Machine, inst):
        sid, mode, elems = isa.split_sync(inst.imm)
        if inst.opcode == Op.TX_PART:
            box = self.mailbox.setdefault(sid, {})
            box[machine.device_id] = machine._vec(inst.src0).copy()
        else:
            box = self.mailbox[sid]
            if len(box) != len(self.machines):
                raise LpuError(f"sync {sid}: not all partials transmitted")
            parts = [box[d] for d in sorted(box)]
            if mode == isa.SYNC_SUM:
                acc = np.zeros(max(len(p) for p in parts), dtype=np.float64)
                for p in parts:
                    acc[:len(p)] += p.astype(np.float64)
                machine._set_vec(inst.dst, acc.astype(np.float16))
            else:
                machine._set_vec(inst.dst, np.concatenate(parts))

    def _lockstep(self, stage_name):
        chains = [m.compiled.chains[stage_name] for m in self.machines]
        n = len(chains[0].instructions)
        for m in self.machines:
            m.branch = None
        for i in range(n):
            for m, ch in zip(self.machines, chains):
                m.execute(ch.instructions[i])
            m0 = self.machines[0]
            if m0.branch is not None or m0.halted:
                break
        for sid in [s for s, box in self.mailbox.items()
                    if len(box) == len(self.machines)]:
            del self.mailbox[sid]
        return self.machines[0].branch

    def generate(self, input_tokens, n_out: int):
        if len(input_tokens) < 2:
            raise ValueError("need at least two input tokens")
        for m in self.machines:
            io_in = m.by_key["io_in"]
            m.mem[io_in.region_id][:len(input_tokens)] = input_tokens
            m.sregs[isa.S_POS] = 0
            m.sregs[isa.S_TOKCNT] = 0
            m.sregs[isa.S_EOS] = 0
            m.sregs[isa.S_LIMIT] = n_out
            m.sregs[isa.S_INLEN] = len(input_tokens) - 1
        while True:
            if self._lockstep(STAGE_SUMMARIZE) != isa.BR_LOOP:
                break
        for m in self.machines:
            m.sregs[isa.S_TOKEN] = int(input_tokens[-1])
        out = []
        while not self.machines[0].halted:
            br = self._lockstep(STAGE_GENERATE)
            toks = {m.sregs[isa.S_TOKEN] for m in self.machines}
            if len(toks) != 1:
                raise LpuError(f"devices sampled different tokens: {toks}")
            out.append(self.machines[0].sregs[isa.S_TOKEN])
            if br != isa.BR_LOOP:
                break
        return out


def run_cluster(compiled_list, device: DeviceConfig, ring: RingConfig,
                positions) -> list:
    """Timing of the whole cluster at the given KV positions.  Devices run
    symmetric programs; each is walked with the shared sync model and the
    per-position latency is the slowest device including exposed sync."""
    sync_model = make_sync_model(device, ring)
    out = []
    for pos in positions:
        reports = []
        for compiled in compiled_list:
            walker = TimingWalker(compiled, device, sync_model=sync_model)
            rep, _ = walker.walk(STAGE_GENERATE, pos)
            reports.append(rep)
        best = max(reports, key=lambda r: r.cycles)
        out.append(best)
    return out
