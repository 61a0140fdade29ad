"""Program generation: expands a model + memory map + cluster into the
instruction blocks of the two inference stages (context ingest and
autoregressive generation), inserting sync blocks for multi-device runs."""

from dataclasses import dataclass, field

from . import isa
from .arch import ClusterConfig
from .errors import UnknownBlock, UnmappedTensor
from .isa import Instruction, Op
from .mapper import MemoryMap, Partition
from .model import ModelConfig

STAGE_SUMMARIZE = "summarize"
STAGE_GENERATE = "generate"

_ACT_OP = {"relu": Op.RELU, "gelu": Op.GELU, "silu": Op.SILU}


@dataclass
class Program:
    """Per-device instruction lists for both stages plus loop metadata.

    Instructions are in program order with virtual vector registers; the
    compiler assigns physical registers and splits the lists into chains.
    The generate stage ends with a CTRL branch back to its entry, taken
    while the token counter is under budget and no end-of-sequence fired.
    """

    model: ModelConfig
    device_id: int
    n_devices: int
    stages: dict = field(default_factory=dict)
    num_vregs: int = 0

    def stage(self, name: str) -> list:
        return self.stages[name]

    def counts_by_group(self, stage_name: str) -> dict:
        counts = {g.name: 0 for g in isa.Group}
        for inst in self.stages[stage_name]:
            counts[inst.group.name] += 1
        return counts


class _RegAlloc:
    """Hands out virtual vector register ids."""

    def __init__(self):
        self.next = 0

    def vec(self) -> int:
        r = isa.vreg(self.next)
        self.next += 1
        return r


class _Emitter:
    def __init__(self, config: ModelConfig, mm: MemoryMap, partition: Partition,
                 device_id: int):
        self.config = config
        self.mm = mm
        self.partition = partition
        self.device_id = device_id
        self.regs = _RegAlloc()
        self.out = []
        self.n = partition.n_devices
        self._sync_id = 0
        # index of the most recent KV write per (layer, which)
        self._kv_write_at = {}

    def emit(self, inst: Instruction) -> int:
        self.out.append(inst)
        return len(self.out) - 1

    def region_id(self, key: str) -> int:
        return self.mm.region(key).region_id

    def rd_weight(self, key: str):
        r = self.mm.region(key)
        self.emit(Instruction(Op.RD_WEIGHT, imm=isa.imm_tiles(r.region_id, r.n_tiles)))

    def rd_vec(self, key: str, row_sreg=None) -> int:
        """Load one row of a vector-path region into a fresh register."""
        dst = self.regs.vec()
        mode = 1 if row_sreg is not None else 0
        src0 = isa.sreg(row_sreg) if row_sreg is not None else isa.R_NONE
        self.emit(Instruction(Op.RD_VEC, dst=dst, src0=src0,
                              imm=isa.imm_region(self.region_id(key), mode)))
        return dst

    def norm(self, gkey: str, bkey: str, x: int) -> int:
        g = self.rd_vec(gkey)
        dst = self.regs.vec()
        if self.config.norm_kind == "layernorm":
            # imm.src_start carries the beta register index (rewritten by
            # the register allocator alongside the operand fields).
            b = self.rd_vec(bkey)
            self.emit(Instruction(Op.LAYERNORM, dst=dst, src0=x, src1=g,
                                  imm=isa.imm_slice(src_start=isa.reg_index(b))))
        else:
            self.emit(Instruction(Op.RMSNORM, dst=dst, src0=x, src1=g))
        return dst

    def vmm(self, weight_key: str, x: int, bias: int = isa.R_NONE,
            imm: int = 0, tag: int = 0) -> int:
        self.rd_weight(weight_key)
        dst = self.regs.vec()
        op = Op.VMM_ACC if bias != isa.R_NONE else Op.VMM
        self.emit(Instruction(op, dst=dst, src0=x, src1=bias, imm=imm, tag=tag))
        return dst

    def sync(self, vec: int, elems: int, mode: int) -> int:
        """Transmit/receive block; empty for a single device."""
        if self.n == 1:
            return vec
        sid = self._sync_id
        self._sync_id += 1
        self.emit(Instruction(Op.TX_PART, src0=vec, imm=isa.imm_sync(sid, mode, elems)))
        dst = self.regs.vec()
        self.emit(Instruction(Op.RX_PART, dst=dst, src0=vec,
                              imm=isa.imm_sync(sid, mode, elems), tag=1))
        return dst

    def add(self, a: int, b: int) -> int:
        dst = self.regs.vec()
        self.emit(Instruction(Op.ADD, dst=dst, src0=a, src1=b))
        return dst


def expand_decoder_block(layer: int, config: ModelConfig, partition: Partition,
                         mm: MemoryMap, device_id: int, em: _Emitter, x: int) -> int:
    """One decoder layer in stream order: norm, QKV, KV write, per-head
    score/softmax/context, output projection (+sync), residual, norm,
    FC1, activation, FC2 (+sync), residual.  Returns the residual register."""
    if layer >= config.num_layers:
        raise ValueError(f"layer {layer} out of range")
    hd = config.head_dim
    heads = list(partition.heads_of(device_id))
    local_cols = len(heads) * hd

    xn = em.norm(f"ln1_g.{layer}", f"ln1_b.{layer}", x)
    qkv = {}
    for role in ("wq", "wk", "wv"):
        bias = em.rd_vec(f"b{role[1]}.{layer}")
        qkv[role] = em.vmm(f"{role}.{layer}", xn, bias)
    if config.pos_encoding == "rotary":
        for role in ("wq", "wk"):
            rot = em.regs.vec()
            em.emit(Instruction(Op.ROPE, dst=rot, src0=qkv[role],
                                src1=isa.sreg(isa.S_POS),
                                imm=isa.imm_slice(src_start=hd)))
            qkv[role] = rot

    for role, which in (("wk", 0), ("wv", 1)):
        idx = em.emit(Instruction(Op.WR_KV, src0=qkv[role],
                                  imm=(layer & 0xFFFF) | (which << 16)))
        em._kv_write_at[(layer, which)] = idx

    ctx = em.regs.vec()
    for i, head in enumerate(heads):
        rd_k = Instruction(Op.RD_KV, imm=isa.imm_region(em.region_id(f"kv_k.{layer}.h{head}")))
        rd_k.tag = len(em.out) - em._kv_write_at[(layer, 0)]
        em.emit(rd_k)
        scores = em.regs.vec()
        em.emit(Instruction(Op.VMM, dst=scores, src0=qkv["wq"],
                            imm=isa.imm_slice(src_start=i * hd, src_len=hd)))
        # dst_start=1 flags the head-dimension prescale inside the softmax.
        probs = em.regs.vec()
        em.emit(Instruction(Op.SOFTMAX, dst=probs, src0=scores,
                            imm=isa.imm_slice(src_len=isa.LEN_DYN, dst_start=1)))
        rd_v = Instruction(Op.RD_KV, imm=isa.imm_region(em.region_id(f"kv_v.{layer}.h{head}")))
        rd_v.tag = len(em.out) - em._kv_write_at[(layer, 1)]
        em.emit(rd_v)
        em.emit(Instruction(Op.VMM, dst=ctx, src0=probs,
                            imm=isa.imm_slice(src_len=isa.LEN_DYN, dst_start=i * hd)))

    attn = em.vmm(f"wo.{layer}", ctx)
    attn = em.sync(attn, config.d_model, isa.SYNC_SUM)
    bo = em.rd_vec(f"bo.{layer}")
    attn = em.add(attn, bo)
    x = em.add(x, attn)

    xn2 = em.norm(f"ln2_g.{layer}", f"ln2_b.{layer}", x)
    bfc1 = em.rd_vec(f"bfc1.{layer}")
    a1 = em.vmm(f"fc1.{layer}", xn2, bfc1)
    act = em.regs.vec()
    em.emit(Instruction(_ACT_OP[config.activation], dst=act, src0=a1))
    f2 = em.vmm(f"fc2.{layer}", act)
    f2 = em.sync(f2, config.d_model, isa.SYNC_SUM)
    bfc2 = em.rd_vec(f"bfc2.{layer}")
    f2 = em.add(f2, bfc2)
    x = em.add(x, f2)
    return x


class BlockLibrary:
    """Named macro blocks; each expands deterministically into instructions."""

    NAMES = ("input_load", "token_embed", "decoder", "lmhead", "output_store",
             "sync", "hlt")

    def __init__(self, config: ModelConfig, mm: MemoryMap, partition: Partition,
                 device_id: int):
        self.config = config
        self.mm = mm
        self.partition = partition
        self.device_id = device_id

    def expand(self, name: str, em: _Emitter, **kw):
        if name not in self.NAMES:
            raise UnknownBlock(name)
        return getattr(self, "_" + name)(em, **kw)

    def _input_load(self, em, row_sreg=isa.S_POS):
        em.emit(Instruction(Op.RD_VEC, dst=isa.sreg(isa.S_TOKEN),
                            src0=isa.sreg(row_sreg),
                            imm=isa.imm_region(em.region_id("io_in"), 1)))

    def _token_embed(self, em) -> int:
        x = em.regs.vec()
        em.emit(Instruction(Op.EMBED, dst=x, src0=isa.sreg(isa.S_TOKEN),
                            imm=isa.imm_region(em.region_id("embed"))))
        if self.config.pos_encoding == "learned":
            p = em.rd_vec("pos", row_sreg=isa.S_POS)
            x = em.add(x, p)
        return x

    def _decoder(self, em, layer, x) -> int:
        return expand_decoder_block(layer, self.config, self.partition, self.mm,
                                    self.device_id, em, x)

    def _lmhead(self, em, x) -> int:
        xn = em.norm("lnf_g", "lnf_b", x)
        logits = em.vmm("lmhead", xn)
        if em.n > 1:
            v0, v1 = self.partition.lmhead_col_ranges[self.device_id]
            logits = em.sync(logits, v1 - v0, isa.SYNC_CONCAT)
        return logits

    def _output_store(self, em, logits):
        em.emit(Instruction(Op.SAMPLE, dst=isa.sreg(isa.S_TOKEN), src0=logits))
        em.emit(Instruction(Op.WR_VEC, src0=isa.sreg(isa.S_TOKEN),
                            src1=isa.sreg(isa.S_TOKCNT),
                            imm=isa.imm_region(em.region_id("io_out"), 1)))

    def _sync(self, em, vec, elems, mode=isa.SYNC_SUM) -> int:
        return em.sync(vec, elems, mode)

    def _hlt(self, em):
        em.emit(Instruction(Op.HLT))


def block_library(config: ModelConfig, mm: MemoryMap, partition: Partition,
                  device_id: int = 0) -> BlockLibrary:
    return BlockLibrary(config, mm, partition, device_id)


def generate_program(config: ModelConfig, mm: MemoryMap, partition: Partition,
                     cluster: ClusterConfig, device_id: int = 0) -> Program:
    """Emit both stages for one device.

    Context-ingest stage: sequential single-vector passes over the input
    positions (no LM head), ending by loading the final input token for the
    first generation pass.  Generation stage: one full pass plus sampling,
    looping under CTRL control until the token budget or end-of-sequence.
    """
    if cluster.num_devices != partition.n_devices:
        raise ValueError("cluster/partition device counts differ")
    lib = block_library(config, mm, partition, device_id)
    prog = Program(model=config, device_id=device_id, n_devices=partition.n_devices)

    # --- summarization stage: one pass, looped by the trailing branch ---
    em = _Emitter(config, mm, partition, device_id)
    lib.expand("input_load", em)
    x = lib.expand("token_embed", em)
    for layer in range(config.num_layers):
        x = lib.expand("decoder", em, layer=layer, x=x)
    em.emit(Instruction(Op.ADDI, dst=isa.sreg(isa.S_POS),
                        src0=isa.sreg(isa.S_POS), imm=1))
    # S_INLEN holds the index of the last input token; that token is loaded
    # into S_TOKEN by the runtime to seed the first generation pass.
    em.emit(Instruction(Op.BR, src0=isa.sreg(isa.S_POS),
                        imm=isa.imm_br(isa.COND_LT, isa.BR_LOOP, isa.S_INLEN)))
    prog.stages[STAGE_SUMMARIZE] = em.out
    n_summarize = em.regs.next

    # --- generation stage ---
    em = _Emitter(config, mm, partition, device_id)
    x = lib.expand("token_embed", em)
    for layer in range(config.num_layers):
        x = lib.expand("decoder", em, layer=layer, x=x)
    logits = lib.expand("lmhead", em, x=x)
    lib.expand("output_store", em, logits=logits)
    em.emit(Instruction(Op.ADDI, dst=isa.sreg(isa.S_POS),
                        src0=isa.sreg(isa.S_POS), imm=1))
    em.emit(Instruction(Op.ADDI, dst=isa.sreg(isa.S_TOKCNT),
                        src0=isa.sreg(isa.S_TOKCNT), imm=1))
    if config.eos_token_id is not None:
        em.emit(Instruction(Op.BR, src0=isa.sreg(isa.S_EOS),
                            imm=isa.imm_br(isa.COND_NE, isa.BR_EXIT, isa.S_ZERO)))
    em.emit(Instruction(Op.BR, src0=isa.sreg(isa.S_TOKCNT),
                        imm=isa.imm_br(isa.COND_LT, isa.BR_LOOP, isa.S_LIMIT)))
    lib.expand("hlt", em)
    prog.stages[STAGE_GENERATE] = em.out
    prog.num_vregs = max(n_summarize, em.regs.next)
    return prog
