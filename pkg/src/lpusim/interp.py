"""Functional execution of compiled programs: FP16 storage with widened
(float64) accumulation and a single rounding at each writeback, the vector
engine's operation semantics, and the token sampler."""

import math
from dataclasses import dataclass

import numpy as np

from . import isa
from .arch import DeviceConfig
from .codegen import STAGE_GENERATE, STAGE_SUMMARIZE
from .compiler import CompiledProgram, ChainSet
from .errors import Deadlock, IndexOutOfRange, InvalidSamplingParams, LpuError
from .isa import Instruction, Op
from .mapper import (KIND_IO, KIND_KV_K, KIND_KV_V, KIND_VEC, KIND_WEIGHT,
                     matrix_to_stream, partition_model, Region)
from .model import ModelConfig, ParamStore

LN_EPS = 1e-5
F16 = np.float16
F64 = np.float64


# --- vector-engine semantics -------------------------------------------------

def _gelu(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def _silu(x):
    return x / (1.0 + np.exp(-x))


def vxe_exec(op: Op, *vecs, scale: float = 1.0):
    """Vector-engine op on float64 inputs, rounded to FP16 on writeback.

    SOFTMAX is max-subtracted; LAYERNORM/RMSNORM take (x, gamma[, beta]);
    ADD/MUL are elementwise; EMBED is a plain row passthrough.
    """
    a = np.asarray(vecs[0], dtype=F64)
    if op == Op.SOFTMAX:
        e = np.exp(a * scale - np.max(a * scale))
        out = e / e.sum()
    elif op == Op.LAYERNORM:
        g, b = (np.asarray(v, dtype=F64) for v in vecs[1:3])
        mu = a.mean()
        var = ((a - mu) ** 2).mean()
        out = g * (a - mu) / math.sqrt(var + LN_EPS) + b
    elif op == Op.RMSNORM:
        g = np.asarray(vecs[1], dtype=F64)
        out = g * a / math.sqrt(float((a ** 2).mean()) + LN_EPS)
    elif op == Op.ADD:
        out = a + np.asarray(vecs[1], dtype=F64)
    elif op == Op.MUL:
        out = a * np.asarray(vecs[1], dtype=F64)
    elif op == Op.RELU:
        out = np.maximum(a, 0.0)
    elif op == Op.GELU:
        out = _gelu(a)
    elif op == Op.SILU:
        out = _silu(a)
    elif op == Op.EMBED:
        out = a
    else:
        raise LpuError(f"not a vector-engine op: {op.name}")
    return out.astype(F16)


def _rope(x: np.ndarray, pos: int, head_dim: int) -> np.ndarray:
    half = head_dim // 2
    inv = 10000.0 ** (-2.0 * np.arange(half) / head_dim)
    ang = pos * inv
    cos, sin = np.cos(ang), np.sin(ang)
    pairs = x.astype(F64).reshape(-1, half, 2)
    a, b = pairs[..., 0], pairs[..., 1]
    out = np.stack([a * cos - b * sin, a * sin + b * cos], axis=-1)
    return out.reshape(x.shape).astype(F16)


def sample(logits, temperature: float, top_k, top_p: float, rng_seed=None,
           rng=None) -> int:
    """Sort-truncate-renormalize sampler.  Ties break toward the lower id.
    temperature == 0 short-circuits to argmax and draws no randomness."""
    logits = np.asarray(logits, dtype=F64)
    n = len(logits)
    if top_k is None:
        top_k = n
    if top_k < 1 or not (0.0 < top_p <= 1.0) or temperature < 0:
        raise InvalidSamplingParams(
            f"temperature={temperature} top_k={top_k} top_p={top_p}")
    if not np.isfinite(logits).all():
        raise InvalidSamplingParams("non-finite logits")
    if temperature == 0.0:
        return int(np.argmax(logits))
    probs = np.exp(logits / temperature - np.max(logits / temperature))
    probs /= probs.sum()
    order = np.lexsort((np.arange(n), -probs))
    keep = order[:min(top_k, n)]
    cum = np.cumsum(probs[keep])
    cut = int(np.searchsorted(cum, min(top_p, cum[-1]) - 1e-12)) + 1
    keep = keep[:cut]
    p = probs[keep] / probs[keep].sum()
    if rng is None:
        rng = np.random.default_rng(rng_seed)
    u = rng.random()
    return int(keep[np.searchsorted(np.cumsum(p), u)])


@dataclass
class SamplingParams:
    temperature: float = 0.0
    top_k: int | None = None
    top_p: float = 1.0
    seed: int = 0


# --- machine state and instruction semantics ---------------------------------

class Machine:
    """Functional state of one device: region memory, register files, the
    streamed-operand FIFO, and a NaN guard flag."""

    def __init__(self, compiled: CompiledProgram, device: DeviceConfig,
                 sampling: SamplingParams | None = None):
        self.compiled = compiled
        self.device = device
        self.model = ModelConfig.from_dict(compiled.meta["model_config"])
        self.device_id = compiled.meta["device_id"]
        self.n_devices = compiled.meta["n_devices"]
        self.partition = partition_model(self.model, self.n_devices)
        self.regions = compiled.region_by_id()
        self.by_key = compiled.region_by_key()
        self.mem = {}
        self._mat_cache = {}
        self.vregs = [None] * device.lmu_vector_regs
        self.sregs = [0] * isa.NUM_ARCH_SREGS
        self.stream_q = []
        self.nan_flag = False
        self.branch = None
        self.halted = False
        self.sampling = sampling or SamplingParams()
        self.rng = np.random.default_rng(self.sampling.seed)
        self.trace = []
        self.logits_trace = []   # pre-sampler logits, one entry per emitted token
        self.net = None          # cluster mailbox hookup, set by ClusterSession

    # -- memory image ---------------------------------------------------------

    def load_params(self, params: ParamStore):
        """Materialize this device's shard into region buffers through the
        tile serializer, so functional reads exercise the memory map."""
        part, dev_id = self.partition, self.device_id
        c = self.model
        hd = c.head_dim
        h0, h1 = part.head_ranges[dev_id]
        f0, f1 = part.fc1_col_ranges[dev_id]
        v0, v1 = part.lmhead_col_ranges[dev_id]
        col_slices = {"wq": (h0 * hd, h1 * hd), "wk": (h0 * hd, h1 * hd),
                      "wv": (h0 * hd, h1 * hd), "fc1": (f0, f1)}
        for region in self.regions.values():
            if region.kind == KIND_WEIGHT:
                role = region.key.split(".")[0]
                if role == "lmhead":
                    full = params.lm_head()
                    m = full[:, v0:v1]
                elif role in col_slices:
                    full = params.get(region.key)
                    a, b = col_slices[role]
                    m = full[:, a:b]
                    if m.shape[1] < region.cols:           # padded heads
                        m = np.pad(m, ((0, 0), (0, region.cols - m.shape[1])))
                elif role == "wo":
                    full = params.get(region.key)
                    m = full[h0 * hd:h1 * hd, :] if h1 * hd <= full.shape[0] else \
                        np.pad(full[h0 * hd:, :], ((0, h1 * hd - full.shape[0]), (0, 0)))
                elif role == "fc2":
                    r0, r1 = part.fc2_row_ranges[dev_id]
                    m = params.get(region.key)[r0:r1, :]
                else:
                    raise LpuError(f"unknown weight role {role}")
                self.mem[region.region_id] = matrix_to_stream(region, m)
            elif region.kind == KIND_VEC:
                role = region.key.split(".")[0]
                full = params.get(region.key)
                if role in ("bq", "bk", "bv"):
                    m = full[:, h0 * hd:h1 * hd]
                    if m.shape[1] < region.cols:
                        m = np.pad(m, ((0, 0), (0, region.cols - m.shape[1])))
                elif role == "bfc1":
                    m = full[:, f0:f1]
                else:
                    m = full
                self.mem[region.region_id] = np.ascontiguousarray(m, dtype=F16).reshape(-1)
            elif region.kind in (KIND_KV_K, KIND_KV_V):
                self.mem[region.region_id] = np.zeros(
                    region.n_tiles * region.v * region.l, dtype=F16)
            elif region.kind == KIND_IO:
                self.mem[region.region_id] = np.zeros(region.rows, dtype=np.int64)

    def _matrix(self, region: Region) -> np.ndarray:
        """Assembled padded matrix in float64; weights cached, KV never."""
        if region.kind == KIND_WEIGHT and region.region_id in self._mat_cache:
            return self._mat_cache[region.region_id]
        buf = self.mem[region.region_id]
        m = (buf.reshape(region.col_tiles, region.row_tiles, region.l, region.v)
             .transpose(1, 3, 0, 2)
             .reshape(region.row_tiles * region.v, region.col_tiles * region.l)
             .astype(F64))
        if region.kind == KIND_WEIGHT:
            self._mat_cache[region.region_id] = m
        return m

    # -- operand helpers ------------------------------------------------------

    def _vec(self, operand) -> np.ndarray:
        v = self.vregs[isa.reg_index(operand)]
        if v is None:
            raise LpuError(f"read of undefined v{isa.reg_index(operand)}")
        return v

    def _set_vec(self, operand, value: np.ndarray, dst_start: int = 0,
                 width: int = 0):
        i = isa.reg_index(operand)
        value = value.astype(F16)
        if dst_start or width:
            cur = self.vregs[i]
            need = max(width, dst_start + len(value))
            if cur is None or len(cur) < need:
                grown = np.zeros(need, dtype=F16)
                if cur is not None:
                    grown[:len(cur)] = cur
                cur = grown
            cur[dst_start:dst_start + len(value)] = value
            self.vregs[i] = cur
        else:
            self.vregs[i] = value
        if np.isnan(value).any():
            self.nan_flag = True

    def _dyn_len(self) -> int:
        return self.sregs[isa.S_POS] + 1

    # -- the instruction semantics --------------------------------------------

    def execute(self, inst: Instruction):
        op = inst.opcode
        if op in (Op.RD_WEIGHT, Op.RD_KV):
            rid = inst.imm & 0xFFFF
            self.stream_q.append(self.regions[rid])
        elif op == Op.WR_KV:
            self._wr_kv(inst)
        elif op == Op.RD_VEC:
            self._rd_vec(inst)
        elif op == Op.WR_VEC:
            rid, mode = isa.split_region(inst.imm)
            row = self.sregs[isa.reg_index(inst.src1)] if mode else 0
            buf = self.mem[rid]
            if row >= len(buf):
                raise IndexOutOfRange(f"io row {row}")
            buf[row] = self.sregs[isa.reg_index(inst.src0)]
        elif op in (Op.VMM, Op.VMM_ACC):
            self._vmm(inst)
        elif op == Op.ROPE:
            hd, _, _ = isa.split_slice(inst.imm)
            x = self._vec(inst.src0)
            self._set_vec(inst.dst, _rope(x, self.sregs[isa.S_POS], hd))
        elif op == Op.SOFTMAX:
            _, ln, flags = isa.split_slice(inst.imm)
            n = self._dyn_len() if ln == isa.LEN_DYN else (ln or None)
            x = self._vec(inst.src0)[:n]
            scale = 1.0 / math.sqrt(self.model.head_dim) if flags & 1 else 1.0
            self._set_vec(inst.dst, vxe_exec(op, x, scale=scale))
        elif op == Op.LAYERNORM:
            beta, _, _ = isa.split_slice(inst.imm)
            out = vxe_exec(op, self._vec(inst.src0), self._vec(inst.src1),
                           self.vregs[beta])
            self._set_vec(inst.dst, out)
        elif op == Op.RMSNORM:
            self._set_vec(inst.dst, vxe_exec(op, self._vec(inst.src0),
                                             self._vec(inst.src1)))
        elif op in (Op.ADD, Op.MUL):
            self._set_vec(inst.dst, vxe_exec(op, self._vec(inst.src0),
                                             self._vec(inst.src1)))
        elif op in (Op.RELU, Op.GELU, Op.SILU):
            self._set_vec(inst.dst, vxe_exec(op, self._vec(inst.src0)))
        elif op == Op.EMBED:
            rid, _ = isa.split_region(inst.imm)
            region = self.regions[rid]
            token = self.sregs[isa.reg_index(inst.src0)]
            if not 0 <= token < region.rows:
                raise IndexOutOfRange(f"token id {token}")
            row = self.mem[rid].reshape(region.rows, region.cols)[token]
            self._set_vec(inst.dst, row.copy())
        elif op == Op.SAMPLE:
            logits = self._vec(inst.src0).astype(F64)
            self.logits_trace.append(logits.copy())
            if not np.isfinite(logits).all():
                # NaN guard: flag and sample over the surviving entries
                self.nan_flag = True
                logits = np.where(np.isfinite(logits), logits, -1e30)
            s = self.sampling
            token = sample(logits, s.temperature, s.top_k, s.top_p, rng=self.rng)
            self.sregs[isa.S_TOKEN] = token
            eos = self.model.eos_token_id
            self.sregs[isa.S_EOS] = int(eos is not None and token == eos)
        elif op in (Op.TX_PART, Op.RX_PART):
            if self.net is None:
                raise LpuError("network op outside a cluster session")
            self.net(self, inst)
        elif op == Op.ADDI:
            self.sregs[isa.reg_index(inst.dst)] = \
                self.sregs[isa.reg_index(inst.src0)] + inst.imm
        elif op == Op.MOVS:
            self.sregs[isa.reg_index(inst.dst)] = inst.imm
        elif op == Op.BR:
            cond, target, cmp_sreg = isa.split_br(inst.imm)
            a = self.sregs[isa.reg_index(inst.src0)]
            b = self.sregs[cmp_sreg]
            taken = a < b if cond == isa.COND_LT else a != b
            if taken and self.branch is None:   # first taken branch wins
                self.branch = target
        elif op == Op.JMP:
            self.branch = inst.imm & 0xFF
        elif op == Op.HLT:
            self.halted = True
        else:
            raise LpuError(f"unhandled opcode {op.name}")

    def _rd_vec(self, inst):
        rid, mode = isa.split_region(inst.imm)
        region = self.regions[rid]
        row = self.sregs[isa.reg_index(inst.src0)] if mode else 0
        if not 0 <= row < region.rows:
            raise IndexOutOfRange(f"row {row} of {region.key}")
        buf = self.mem[rid]
        if isa.is_sreg(inst.dst):
            self.sregs[isa.reg_index(inst.dst)] = int(buf[row])
        else:
            table = buf.reshape(region.rows, region.cols)
            self._set_vec(inst.dst, table[row].copy())

    def _wr_kv(self, inst):
        layer = inst.imm & 0xFFFF
        which = (inst.imm >> 16) & 0xFF
        vec = self._vec(inst.src0)
        pos = self.sregs[isa.S_POS]
        hd = self.model.head_dim
        kind = "kv_k" if which == 0 else "kv_v"
        for i, head in enumerate(self.partition.heads_of(self.device_id)):
            region = self.by_key.get(f"{kind}.{layer}.h{head}")
            if region is None:
                raise IndexOutOfRange(f"no KV region {kind}.{layer}.h{head}")
            buf = self.mem[region.region_id]
            e = np.arange(hd)
            seg = vec[i * hd:(i + 1) * hd] if (i + 1) * hd <= len(vec) else \
                np.zeros(hd, dtype=F16)
            if which == 0:      # transposed Key: element -> row, position -> col
                t = (pos // region.l) * region.row_tiles + e // region.v
                intra = (pos % region.l) * region.v + e % region.v
            else:               # Value: position -> row, element -> col
                t = (e // region.l) * region.row_tiles + pos // region.v
                intra = (e % region.l) * region.v + pos % region.v
            buf[t * region.v * region.l + intra] = seg

    def _vmm(self, inst):
        if not self.stream_q:
            raise Deadlock("streaming op with empty operand queue")
        region = self.stream_q.pop(0)
        src_start, src_len, dst_start = isa.split_slice(inst.imm)
        m = self._matrix(region)
        if region.kind == KIND_KV_K:
            n_ctr, n_out = region.rows, self._dyn_len()
        elif region.kind == KIND_KV_V:
            n_ctr, n_out = self._dyn_len(), region.cols
        else:
            n_ctr, n_out = region.rows, region.cols
        x = self._vec(inst.src0)
        if src_len == isa.LEN_DYN:
            x = x[:self._dyn_len()]
        elif src_len:
            x = x[src_start:src_start + src_len]
        xp = np.zeros(m.shape[0], dtype=F64)
        xp[:min(n_ctr, len(x))] = x[:n_ctr].astype(F64)
        acc = xp @ m[:, :n_out]
        if inst.opcode == Op.VMM_ACC:
            acc = acc + self._vec(inst.src1).astype(F64)[:n_out]
        self._set_vec(inst.dst, acc.astype(F16), dst_start=dst_start)


# --- stage walking -----------------------------------------------------------

def walk_stage(machine: Machine, chains: ChainSet, schedule_rng=None) -> int | None:
    """Execute one iteration of a stage.  Sequential program order by default;
    with schedule_rng, a random interleaving that respects chain order and
    derived dependencies (must compute identical results).
    Returns the taken branch target, or None."""
    machine.branch = None
    insts, deps = chains.instructions, chains.deps
    if schedule_rng is None:
        for inst in insts:
            machine.execute(inst)
            if machine.branch is not None or machine.halted:
                break
    else:
        # A taken branch redirects the control stream: the CTRL chain stops
        # issuing, while the other chains drain their outstanding work.
        done = [False] * len(insts)
        cursors = {g: 0 for g in chains.chain_indices}
        while True:
            ready = []
            for g, idxs in chains.chain_indices.items():
                if g == isa.Group.CTRL and (machine.branch is not None
                                            or machine.halted):
                    continue
                c = cursors[g]
                if c < len(idxs):
                    i = idxs[c]
                    if all(done[j] for j in deps[i]):
                        ready.append((g, i))
            if not ready:
                pending = any(
                    cursors[g] < len(idxs)
                    for g, idxs in chains.chain_indices.items()
                    if not (g == isa.Group.CTRL and (machine.branch is not None
                                                     or machine.halted)))
                if pending:
                    raise Deadlock("no runnable instruction in any chain")
                break
            g, i = ready[int(schedule_rng.integers(len(ready)))]
            machine.execute(insts[i])
            done[i] = True
            cursors[g] += 1
    return machine.branch


class Session:
    """Single-device functional run: context ingest then generation."""

    def __init__(self, compiled: CompiledProgram, device: DeviceConfig,
                 params: ParamStore, sampling: SamplingParams | None = None):
        self.machine = Machine(compiled, device, sampling)
        self.machine.load_params(params)
        self.compiled = compiled

    def generate(self, input_tokens, n_out: int, schedule_rng=None,
                 trace: bool = False):
        m = self.machine
        if len(input_tokens) < 2:
            raise ValueError("need at least two input tokens")
        io_in = self.compiled.region_by_key()["io_in"]
        m.mem[io_in.region_id][:len(input_tokens)] = input_tokens
        m.sregs[isa.S_POS] = 0
        m.sregs[isa.S_TOKCNT] = 0
        m.sregs[isa.S_EOS] = 0
        m.sregs[isa.S_LIMIT] = n_out
        m.sregs[isa.S_INLEN] = len(input_tokens) - 1
        summ = self.compiled.chains[STAGE_SUMMARIZE]
        while True:
            br = walk_stage(m, summ, schedule_rng)
            if br != isa.BR_LOOP:
                break
        m.sregs[isa.S_TOKEN] = int(input_tokens[-1])
        gen = self.compiled.chains[STAGE_GENERATE]
        out = []
        while not m.halted:
            br = walk_stage(m, gen, schedule_rng)
            out.append(m.sregs[isa.S_TOKEN])
            if trace:
                m.trace.append([None if v is None else v.copy() for v in m.vregs])
            if br != isa.BR_LOOP:
                break
        return out


def interpret(compiled: CompiledProgram, device: DeviceConfig, params: ParamStore,
              input_tokens, n_out: int,
              sampling: SamplingParams | None = None):
    """Pure functional execution; returns the emitted tokens."""
    return Session(compiled, device, params, sampling).generate(input_tokens, n_out)
