"""Tile-granular timing model: in-order chains per engine, streamed-operand
delivery paced by channel bandwidth against a bounded prefetch queue,
cross-engine slip through scoreboard dependencies, and per-run statistics.

All dependency edges point backward in program order, so a single forward
pass computing start/completion times reproduces the event-driven schedule
exactly; durations are closed-form over tile counts rather than per-tile
event objects, which keeps billion-parameter walks fast."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import isa
from .arch import DeviceConfig, FP16_BYTES
from .codegen import STAGE_GENERATE, STAGE_SUMMARIZE
from .compiler import CompiledProgram
from .errors import LpuError
from .isa import Group, Instruction, Op
from .mapper import KIND_KV_K, KIND_KV_V

_PASSES = {Op.SOFTMAX: 3, Op.LAYERNORM: 3, Op.RMSNORM: 3, Op.SAMPLE: 3}
_VXE_OPS = (Op.SOFTMAX, Op.LAYERNORM, Op.RMSNORM, Op.ADD, Op.MUL,
            Op.RELU, Op.GELU, Op.SILU)
_CTRL_OPS = (Op.ADDI, Op.MOVS, Op.BR, Op.JMP, Op.HLT)


@dataclass
class EngineState:
    """Occupancy timelines of one device's engines."""

    device: DeviceConfig
    channel_free: np.ndarray = None     # SMA per-channel next-free cycle
    mem_free: float = 0.0               # in-order MEM chain cursor
    sxe_free: float = 0.0
    vxe_free: float = 0.0
    icp_free: float = 0.0
    net_free: float = 0.0

    def __post_init__(self):
        if self.channel_free is None:
            self.channel_free = np.zeros(self.device.num_channels)

    @property
    def horizon(self) -> float:
        return max(self.mem_free, self.sxe_free, self.vxe_free,
                   self.icp_free, self.net_free)


@dataclass
class SimReport:
    """Statistics for one simulated pass (one token at one position)."""

    cycles: float = 0.0
    seconds: float = 0.0
    bytes_streamed: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    busy: dict = field(default_factory=dict)
    stalls: dict = field(default_factory=dict)       # by cause
    engine_stalls: dict = field(default_factory=dict)
    idle: dict = field(default_factory=dict)
    utilization: float = 0.0
    exposed_sync: float = 0.0           # cycles of un-hidden synchronization
    max_live_partial_sets: int = 0
    nan_flag: bool = False
    position: int = -1
    token: int | None = None

    def finalize(self, device: DeviceConfig):
        self.seconds = self.cycles / device.freq_hz
        cap = device.bytes_per_cycle() * self.cycles
        self.utilization = self.bytes_streamed / cap if cap else 0.0
        for eng, b in self.busy.items():
            stall = min(self.engine_stalls.get(eng, 0.0),
                        max(0.0, self.cycles - b))
            self.engine_stalls[eng] = stall
            self.idle[eng] = self.cycles - b - stall
        return self


class TimingWalker:
    """Forward-pass scheduler over one device's compiled stages.  With a
    functional Machine attached, instructions execute semantically in the
    same pass, so the emitted token and the timed schedule come from one
    walk."""

    def __init__(self, compiled: CompiledProgram, device: DeviceConfig,
                 sync_model=None, machine=None):
        self.compiled = compiled
        self.device = device
        self.sync_model = sync_model        # callable(walker, tx_info) -> (arrival, exposed)
        self.machine = machine
        self.regions = compiled.region_by_id()
        meta = compiled.meta["model_config"]
        self.d_model = meta["d_model"]
        self.head_dim = meta["d_model"] // meta["num_heads"]
        self.vocab = meta["vocab_size"]
        self.rate = device.tile_bytes / device.bytes_per_cycle()

    def _stream_shape(self, region, pos):
        """(tiles, column sets) for one streamed matrix at a position."""
        if region.kind == KIND_KV_K:
            cs = -(-(pos + 1) // region.l)
            return region.row_tiles * cs, cs
        if region.kind == KIND_KV_V:
            rt = -(-(pos + 1) // region.v)
            return rt * region.col_tiles, region.col_tiles
        return region.n_tiles, region.col_tiles

    def _vmm_out_len(self, region, pos):
        if region.kind == KIND_KV_K:
            return pos + 1
        return region.cols

    def _vxe_cycles(self, op, n):
        lanes = self.device.vxe_lanes
        return (_PASSES.get(op, 1) * math.ceil(max(n, 1) / lanes)
                + self.device.vxe_const_cycles)

    def walk(self, stage_name: str, position: int, es: EngineState | None = None):
        """Schedule one stage iteration with the position register at
        `position`.  Returns (SimReport, taken branch target or None)."""
        dev = self.device
        chains = self.compiled.chains[stage_name]
        insts, deps = chains.instructions, chains.deps
        es = es or EngineState(dev)
        t0 = es.horizon
        rep = SimReport(position=position)
        rep.busy = {"sma": 0.0, "sxe": 0.0, "vxe": 0.0, "icp": 0.0, "net": 0.0}
        rep.stalls = {"operand_wait": 0.0, "scoreboard": 0.0, "sync": 0.0}
        rep.engine_stalls = {"sma": 0.0, "sxe": 0.0, "vxe": 0.0, "icp": 0.0,
                             "net": 0.0}
        result_at = [0.0] * len(insts)
        pending = []                 # unresolved stream reads
        vlen = {}                    # symbolic register lengths for op sizing
        last_sxe = (t0, t0, 1)
        tx_info = {}
        end_time = t0
        bpc = dev.bytes_per_cycle()
        Q, ii, issue = dev.oiu_queue_tiles, 1.0, dev.oiu_issue_cycles
        max_live = 0
        branch = None

        if self.machine is not None:
            self.machine.branch = None

        for i, inst in enumerate(insts):
            op = inst.opcode
            dr = t0
            for j in deps[i]:
                if result_at[j] > dr:
                    dr = result_at[j]

            if op in (Op.RD_WEIGHT, Op.RD_KV):
                region = self.regions[inst.imm & 0xFFFF]
                n, cs = self._stream_shape(region, position)
                mem_start = max(es.mem_free, dr)
                pending.append((region, n, cs, mem_start))
                result_at[i] = mem_start + self.rate

            elif op in (Op.VMM, Op.VMM_ACC):
                if not pending:
                    raise LpuError("streaming compute with no pending memory read")
                region, n, col_sets, mem_start = pending.pop(0)
                first = mem_start + self.rate
                base = max(es.sxe_free, dr)
                c0 = max(base, first) + issue
                rep.stalls["operand_wait"] += max(0.0, first - base)
                rep.engine_stalls["sxe"] += max(0.0, c0 - issue - es.sxe_free)
                rep.stalls["scoreboard"] += max(0.0, dr - max(es.sxe_free, first))
                if mem_start + (Q + 1) * self.rate < c0:   # queue filled, SMA stalled
                    end = c0 + max((n - 1) * ii, (n - Q) * self.rate)
                    stream_end = max(mem_start + n * self.rate, end)
                else:
                    end = max(c0 + (n - 1) * ii, mem_start + n * self.rate)
                    stream_end = mem_start + n * self.rate
                es.sxe_free = end
                es.mem_free = max(es.mem_free, stream_end)
                es.channel_free[:] = es.mem_free
                rep.busy["sxe"] += n * ii
                rep.busy["sma"] += n * self.rate
                rep.bytes_read += n * dev.tile_bytes
                max_live = max(max_live, 1)   # one column set of partial sums
                last_sxe = (c0, end, col_sets)
                result_at[i] = end + dev.sxe_pipeline_depth
                _, _, dst_start = isa.split_slice(inst.imm)
                out_len = self._vmm_out_len(region, position)
                prev = vlen.get(inst.dst, 0) if dst_start else 0
                vlen[inst.dst] = max(prev, dst_start + out_len)
                end_time = max(end_time, result_at[i])

            elif op == Op.ROPE:
                n = vlen.get(inst.src0, self.d_model)
                start = max(es.sxe_free, dr) + issue
                dur = math.ceil(n / dev.vector_dim)
                es.sxe_free = start + dur
                rep.busy["sxe"] += dur
                result_at[i] = start + dur + dev.sxe_pipeline_depth
                vlen[inst.dst] = n
                end_time = max(end_time, result_at[i])

            elif op == Op.WR_KV:
                bytes_w = vlen.get(inst.src0, self.d_model) * FP16_BYTES
                start = max(es.mem_free, dr)
                dur = bytes_w / bpc + 4
                es.mem_free = start + dur
                rep.busy["sma"] += bytes_w / bpc
                rep.bytes_written += bytes_w
                result_at[i] = start + dur
                end_time = max(end_time, result_at[i])

            elif op in (Op.RD_VEC, Op.WR_VEC):
                region = self.regions[inst.imm & 0xFFFF]
                nbytes = max(region.cols, 1) * FP16_BYTES
                bursts = math.ceil(nbytes / dev.burst_bytes)
                start = max(es.mem_free, dr)
                dur = bursts * dev.burst_bytes / bpc + 4
                es.mem_free = start + dur
                rep.busy["sma"] += bursts * dev.burst_bytes / bpc
                if op == Op.RD_VEC:
                    rep.bytes_read += bursts * dev.burst_bytes
                    vlen[inst.dst] = region.cols
                else:
                    rep.bytes_written += dev.burst_bytes
                result_at[i] = start + dur
                end_time = max(end_time, result_at[i])

            elif op == Op.EMBED:
                region = self.regions[inst.imm & 0xFFFF]
                nbytes = region.cols * FP16_BYTES
                mem_start = max(es.mem_free, dr)
                mdur = nbytes / bpc + 4
                es.mem_free = mem_start + mdur
                rep.busy["sma"] += nbytes / bpc
                rep.bytes_read += nbytes
                start = max(es.vxe_free, mem_start + mdur)
                dur = self._vxe_cycles(op, region.cols)
                es.vxe_free = start + dur
                rep.busy["vxe"] += dur
                result_at[i] = start + dur
                vlen[inst.dst] = region.cols
                end_time = max(end_time, result_at[i])

            elif op == Op.SAMPLE or op in _VXE_OPS:
                if op == Op.SOFTMAX:
                    n = position + 1
                elif op == Op.SAMPLE:
                    n = vlen.get(inst.src0, self.vocab)
                else:
                    n = vlen.get(inst.src0, self.d_model)
                start = max(es.vxe_free, dr)
                rep.stalls["scoreboard"] += max(0.0, dr - es.vxe_free)
                rep.engine_stalls["vxe"] += max(0.0, start - es.vxe_free)
                dur = self._vxe_cycles(op, n)
                es.vxe_free = start + dur
                rep.busy["vxe"] += dur
                result_at[i] = start + dur
                if inst.dst != isa.R_NONE and isa.is_vreg(inst.dst):
                    vlen[inst.dst] = n
                end_time = max(end_time, result_at[i])

            elif op == Op.TX_PART:
                sid, mode, elems = isa.split_sync(inst.imm)
                ser = elems * FP16_BYTES * dev.freq_hz / dev.link_bandwidth
                start = max(es.net_free, dr)
                es.net_free = start + ser
                rep.busy["net"] += ser
                tx_info[sid] = (dr, last_sxe, elems, mode)
                result_at[i] = start

            elif op == Op.RX_PART:
                if self.sync_model is None:
                    raise LpuError("network op without a cluster sync model")
                sid, mode, elems = isa.split_sync(inst.imm)
                if sid not in tx_info:
                    raise LpuError(f"receive before transmit for sync {sid}")
                arrival, exposed = self.sync_model(self, tx_info[sid])
                rep.stalls["sync"] += exposed
                rep.engine_stalls["net"] += exposed
                rep.exposed_sync += exposed
                result_at[i] = arrival
                _, mode_, elems_ = isa.split_sync(inst.imm)
                vlen[inst.dst] = self.vocab if mode_ == isa.SYNC_CONCAT else elems_
                end_time = max(end_time, arrival)

            elif op in _CTRL_OPS:
                start = max(es.icp_free, dr)
                es.icp_free = start + 1
                rep.busy["icp"] += 1
                result_at[i] = start + 1
                end_time = max(end_time, result_at[i])

            else:
                raise LpuError(f"no timing rule for {op.name}")

            if self.machine is not None:
                self.machine.execute(inst)
                if self.machine.halted or self.machine.branch is not None:
                    branch = self.machine.branch
                    break

        if pending:
            raise LpuError(f"{len(pending)} stream reads never consumed")
        end_time = max(end_time, es.mem_free, es.sxe_free, es.vxe_free)
        rep.cycles = end_time - t0
        rep.bytes_streamed = rep.bytes_read + rep.bytes_written
        rep.max_live_partial_sets = max_live
        if self.machine is not None:
            rep.nan_flag = self.machine.nan_flag
            rep.token = self.machine.sregs[isa.S_TOKEN]
        rep.finalize(self.device)
        return rep, branch


def simulate_token(compiled: CompiledProgram, device: DeviceConfig,
                   position: int, machine=None, sync_model=None,
                   es: EngineState | None = None):
    """Timing (and optionally functional) execution of one generation pass
    with the KV cache holding `position` entries.
    Returns (token or None, SimReport)."""
    walker = TimingWalker(compiled, device, sync_model=sync_model,
                          machine=machine)
    if machine is not None:
        machine.sregs[isa.S_POS] = position
    rep, _ = walker.walk(STAGE_GENERATE, position, es=es)
    return rep.token, rep
