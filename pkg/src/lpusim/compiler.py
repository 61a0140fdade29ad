"""Compilation passes: linear-scan register allocation over segregated
scalar/vector banks, group chaining with scoreboard-derived dependencies,
and lossless binary emission."""

import json
import struct
from dataclasses import dataclass, field

from . import isa
from .codegen import Program, STAGE_GENERATE, STAGE_SUMMARIZE
from .errors import CyclicDependency, MalformedBinary, RegisterPressureExceeded
from .isa import Instruction, Op, Group
from .mapper import Region

MAGIC = b"LPUB"
VERSION = 1

# Ops whose dynamic length makes them implicit readers of the position register.
_POS_READERS = {Op.RD_KV, Op.WR_KV, Op.SOFTMAX}


def _imm_reg_operand(inst: Instruction):
    """LAYERNORM carries its beta register in imm.src_start."""
    if inst.opcode == Op.LAYERNORM:
        beta, _, _ = isa.split_slice(inst.imm)
        return isa.vreg(beta)
    return None


def _reads(inst: Instruction):
    regs = []
    for operand in (inst.src0, inst.src1):
        if operand != isa.R_NONE:
            regs.append(operand)
    extra = _imm_reg_operand(inst)
    if extra is not None:
        regs.append(extra)
    if inst.opcode in _POS_READERS:
        regs.append(isa.sreg(isa.S_POS))
    if inst.opcode in isa.STREAMING_OPS:
        _, length, _ = isa.split_slice(inst.imm)
        if length == isa.LEN_DYN:
            regs.append(isa.sreg(isa.S_POS))
    if inst.opcode == Op.EMBED:
        pass  # token id is src0 already
    if inst.opcode == Op.BR:
        _, _, cmp_sreg = isa.split_br(inst.imm)
        regs.append(isa.sreg(cmp_sreg))
    return regs


def _writes(inst: Instruction):
    regs = []
    if inst.dst != isa.R_NONE:
        regs.append(inst.dst)
    if inst.opcode == Op.SAMPLE:
        regs.append(isa.sreg(isa.S_EOS))
    return regs


def allocate_registers(program: Program, lmu_vector_regs: int,
                       lmu_scalar_regs: int) -> Program:
    """Linear-scan allocation of virtual vector registers onto the vector
    bank, stage by stage.  Scalar registers are the architectural control
    set and are only checked against the scalar bank size.  No spill path:
    overflow raises RegisterPressureExceeded."""
    if isa.NUM_ARCH_SREGS > lmu_scalar_regs:
        raise RegisterPressureExceeded(
            f"{isa.NUM_ARCH_SREGS} control registers > {lmu_scalar_regs} scalar bank")
    out = Program(model=program.model, device_id=program.device_id,
                  n_devices=program.n_devices)
    peak = 0
    for name, insts in program.stages.items():
        mapped, used = _allocate_stage(insts, lmu_vector_regs)
        out.stages[name] = mapped
        peak = max(peak, used)
    out.num_vregs = peak
    return out


def _allocate_stage(insts, bank_size):
    starts, ends = {}, {}
    for i, inst in enumerate(insts):
        for r in _reads(inst):
            if isa.is_vreg(r):
                ends[r] = i
                starts.setdefault(r, i)
        for r in _writes(inst):
            if isa.is_vreg(r):
                starts.setdefault(r, i)
                ends.setdefault(r, i)
    order = sorted(starts, key=lambda r: (starts[r], isa.reg_index(r)))
    free = list(range(bank_size - 1, -1, -1))
    active = []            # (end, vreg) sorted by end
    mapping = {}
    used = 0
    for r in order:
        s = starts[r]
        while active and active[0][0] < s:
            _, dead = active.pop(0)
            free.append(mapping[dead])
        if not free:
            raise RegisterPressureExceeded(
                f"live vector registers exceed bank of {bank_size}")
        phys = free.pop()
        mapping[r] = phys
        used = max(used, len(active) + 1)
        e = ends[r]
        k = 0
        while k < len(active) and active[k][0] <= e:
            k += 1
        active.insert(k, (e, r))
    return [_rewrite(inst, mapping) for inst in insts], used


def _rewrite(inst: Instruction, mapping) -> Instruction:
    def mop(operand):
        if isa.is_vreg(operand):
            return isa.vreg(mapping[operand])
        return operand

    imm = inst.imm
    if inst.opcode == Op.LAYERNORM:
        beta, ln, ds = isa.split_slice(imm)
        imm = isa.imm_slice(mapping[isa.vreg(beta)], ln, ds)
    return Instruction(inst.opcode, dst=mop(inst.dst), src0=mop(inst.src0),
                       src1=mop(inst.src1), imm=imm, chain=int(inst.group),
                       tag=inst.tag)


def derive_deps(insts) -> list:
    """Dependency edges per instruction, derived the way the hardware
    scoreboard sees them: register RAW/WAR/WAW, FIFO pairing of streamed
    operands with their MEM reads, and explicit tag tokens for memory
    ordering.  All edges point backwards; forward tags are rejected."""
    last_write = {}
    readers_since = {}
    pending_streams = []
    deps = [set() for _ in insts]
    for i, inst in enumerate(insts):
        d = deps[i]
        for r in _reads(inst):
            if r in last_write:
                d.add(last_write[r])
            readers_since.setdefault(r, []).append(i)
        for r in _writes(inst):
            if r in last_write:
                d.add(last_write[r])
            for j in readers_since.get(r, ()):
                if j != i:
                    d.add(j)
            readers_since[r] = []
            last_write[r] = i
        if inst.opcode in isa.MEM_STREAM_OPS:
            pending_streams.append(i)
        elif inst.opcode in isa.STREAMING_OPS:
            if not pending_streams:
                raise CyclicDependency(
                    f"streaming op at {i} has no pending memory read")
            d.add(pending_streams.pop(0))
        if inst.tag:
            j = i - inst.tag
            if j < 0:
                raise CyclicDependency(f"tag at {i} points past program start")
            d.add(j)
    return [tuple(sorted(s)) for s in deps]


@dataclass
class ChainSet:
    """Instructions split into the four group chains.  Order within a chain
    is program order; cross-chain ordering exists only through deps."""

    stage: str
    instructions: list
    deps: list
    chain_indices: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.chain_indices:
            for g in Group:
                self.chain_indices[g] = [
                    i for i, inst in enumerate(self.instructions) if inst.group == g]
        self.validate()

    def validate(self):
        for i, dep in enumerate(self.deps):
            for j in dep:
                if j >= i:
                    raise CyclicDependency(f"edge {j} -> {i} not backwards")

    def chain(self, group: Group):
        return [self.instructions[i] for i in self.chain_indices[group]]


def chain_instructions(program: Program) -> dict:
    """Split each stage into its four chains with derived dependencies.
    Expects a register-allocated program."""
    return {name: ChainSet(name, insts, derive_deps(insts))
            for name, insts in program.stages.items()}


@dataclass
class CompiledProgram:
    """Binary-serializable artifact: metadata, region table, chained stages."""

    meta: dict
    regions: list
    chains: dict

    def region_by_id(self):
        return {r.region_id: r for r in self.regions}

    def region_by_key(self):
        return {r.key: r for r in self.regions}


_KINDS = ("weight", "vec", "kv_k", "kv_v", "io")
_STAGE_ORDER = (STAGE_SUMMARIZE, STAGE_GENERATE)
_REGION_FMT = "<HBBhhQIIIIHH24s"
_REGION_SIZE = struct.calcsize(_REGION_FMT)


def emit_binary(compiled: CompiledProgram) -> bytes:
    meta_blob = json.dumps(compiled.meta, sort_keys=True,
                           separators=(",", ":")).encode()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HHIIH", VERSION, 0, len(meta_blob), len(compiled.regions),
                       len(compiled.chains))
    for name in _STAGE_ORDER:
        if name in compiled.chains:
            out += struct.pack("<8sI", name[:8].ljust(8).encode(),
                               len(compiled.chains[name].instructions))
    out += meta_blob
    for r in compiled.regions:
        key = r.key.encode()
        if len(key) > 24:
            raise ValueError(f"region key too long: {r.key}")
        out += struct.pack(_REGION_FMT, r.region_id, _KINDS.index(r.kind),
                           r.device_id, r.layer, r.head, r.base, r.rows, r.cols,
                           r.row_tiles, r.col_tiles, r.v, r.l, key.ljust(24))
    for name in _STAGE_ORDER:
        if name in compiled.chains:
            for inst in compiled.chains[name].instructions:
                out += inst.encode()
    return bytes(out)


def disassemble(data: bytes) -> CompiledProgram:
    if len(data) < 16 or data[:4] != MAGIC:
        raise MalformedBinary("bad magic")
    off = 4
    try:
        version, _flags, meta_len, n_regions, n_stages = struct.unpack_from(
            "<HHIIH", data, off)
    except struct.error:
        raise MalformedBinary("truncated header") from None
    if version != VERSION:
        raise MalformedBinary(f"unsupported version {version}")
    off += struct.calcsize("<HHIIH")
    stage_counts = []
    for _ in range(n_stages):
        try:
            raw, count = struct.unpack_from("<8sI", data, off)
        except struct.error:
            raise MalformedBinary("truncated stage directory") from None
        stage_counts.append((raw.decode().strip(), count))
        off += struct.calcsize("<8sI")
    if off + meta_len > len(data):
        raise MalformedBinary("truncated metadata")
    try:
        meta = json.loads(data[off:off + meta_len])
    except json.JSONDecodeError:
        raise MalformedBinary("corrupt metadata") from None
    off += meta_len
    regions = []
    for _ in range(n_regions):
        try:
            (rid, kind_i, dev, layer, head, base, rows, cols, rt, ct, v, l,
             key) = struct.unpack_from(_REGION_FMT, data, off)
        except struct.error:
            raise MalformedBinary("truncated region table") from None
        if kind_i >= len(_KINDS):
            raise MalformedBinary(f"bad region kind {kind_i}")
        regions.append(Region(rid, _KINDS[kind_i], key.decode().rstrip(), dev,
                              base, rows, cols, rt, ct, v, l, layer, head))
        off += _REGION_SIZE
    chains = {}
    for prefix, count in stage_counts:
        name = next((s for s in _STAGE_ORDER if s.startswith(prefix)), None)
        if name is None:
            raise MalformedBinary(f"unknown stage {prefix!r}")
        end = off + 16 * count
        if end > len(data):
            raise MalformedBinary("truncated instruction section")
        insts = [Instruction.decode(data[i:i + 16]) for i in range(off, end, 16)]
        chains[name] = ChainSet(name, insts, derive_deps(insts))
        off = end
    if off != len(data):
        raise MalformedBinary(f"{len(data) - off} trailing bytes")
    return CompiledProgram(meta=meta, regions=regions, chains=chains)


def compile_program(program: Program, mm, device) -> CompiledProgram:
    """Full pipeline: allocate registers, chain, attach region table."""
    allocated = allocate_registers(program, device.lmu_vector_regs,
                                   device.lmu_scalar_regs)
    chains = chain_instructions(allocated)
    meta = {
        "model": program.model.name,
        "model_config": {
            "name": program.model.name,
            "num_layers": program.model.num_layers,
            "d_model": program.model.d_model,
            "num_heads": program.model.num_heads,
            "ffn_dim": program.model.ffn_dim,
            "vocab_size": program.model.vocab_size,
            "max_seq": program.model.max_seq,
            "pos_encoding": program.model.pos_encoding,
            "norm_kind": program.model.norm_kind,
            "activation": program.model.activation,
            "tie_embeddings": program.model.tie_embeddings,
            "eos_token_id": program.model.eos_token_id,
        },
        "device_id": program.device_id,
        "n_devices": program.n_devices,
        "num_vregs": allocated.num_vregs,
    }
    regions = sorted(mm.regions.values(), key=lambda r: r.region_id)
    return CompiledProgram(meta=meta, regions=regions, chains=chains)
