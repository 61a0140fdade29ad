"""Instruction set: four groups (MEM, COMP, NET, CTRL), operand encoding,
and the 128-bit binary word layout
[group:4][opcode:8][dst:16][src0:16][src1:16][imm:48][chain:8][tags:12]."""

import struct
from dataclasses import dataclass
from enum import IntEnum

from .errors import MalformedBinary


class Group(IntEnum):
    MEM = 0
    COMP = 1
    NET = 2
    CTRL = 3


class Op(IntEnum):
    # MEM
    RD_WEIGHT = 0x01
    RD_KV = 0x02
    WR_KV = 0x03
    RD_VEC = 0x04
    WR_VEC = 0x05
    # COMP, MAC-tree array
    VMM = 0x10
    VMM_ACC = 0x11
    ROPE = 0x12
    # COMP, vector engine
    SOFTMAX = 0x20
    LAYERNORM = 0x21
    RMSNORM = 0x22
    ADD = 0x23
    MUL = 0x24
    GELU = 0x25
    RELU = 0x26
    SILU = 0x27
    EMBED = 0x28
    SAMPLE = 0x29
    # NET
    TX_PART = 0x30
    RX_PART = 0x31
    # CTRL
    BR = 0x38
    JMP = 0x39
    ADDI = 0x3A
    MOVS = 0x3B
    HLT = 0x3F


GROUP_OF = {}
for _op in Op:
    if _op.value < 0x10:
        GROUP_OF[_op] = Group.MEM
    elif _op.value < 0x30:
        GROUP_OF[_op] = Group.COMP
    elif _op.value < 0x38:
        GROUP_OF[_op] = Group.NET
    else:
        GROUP_OF[_op] = Group.CTRL

# COMP opcodes served by the MAC-tree array; the rest run on the vector engine.
SXE_OPS = frozenset({Op.VMM, Op.VMM_ACC, Op.ROPE})
# COMP opcodes that consume a streamed matrix operand (FIFO-paired with the
# preceding unmatched MEM read).
STREAMING_OPS = frozenset({Op.VMM, Op.VMM_ACC})
MEM_STREAM_OPS = frozenset({Op.RD_WEIGHT, Op.RD_KV})

# Operand encoding: top two bits select the register file.
R_NONE = 0x0000
_VREG = 0x4000
_SREG = 0x8000
_MASK = 0x3FFF


def vreg(i: int) -> int:
    return _VREG | i


def sreg(i: int) -> int:
    return _SREG | i


def is_vreg(operand: int) -> bool:
    return operand & 0xC000 == _VREG


def is_sreg(operand: int) -> bool:
    return operand & 0xC000 == _SREG


def reg_index(operand: int) -> int:
    return operand & _MASK


# Architectural scalar registers (control registers of the sequencer).
S_TOKEN = 0      # current token id
S_POS = 1        # position = entries already in the KV cache
S_TOKCNT = 2     # tokens emitted so far
S_EOS = 3        # end-of-sequence flag, set by SAMPLE
S_LIMIT = 4      # output token budget
S_INLEN = 5      # index of the last input token
S_ZERO = 6       # hardwired zero
NUM_ARCH_SREGS = 7

# imm sub-field conventions ------------------------------------------------
LEN_DYN = 0xFFFF          # slice length resolved from S_POS + 1 at runtime

SYNC_SUM = 0              # partial results summed in source order
SYNC_CONCAT = 1           # shard gather

COND_LT = 0               # branch when src0 < cmp
COND_NE = 1               # branch when src0 != cmp

BR_LOOP = 0               # taken branch re-enters the stage
BR_EXIT = 1               # taken branch leaves the stage


def imm_tiles(region_id: int, n_tiles: int) -> int:
    return region_id | (n_tiles << 16)


def imm_region(region_id: int, mode: int = 0) -> int:
    return region_id | (mode << 16)


def imm_slice(src_start: int = 0, src_len: int = 0, dst_start: int = 0) -> int:
    return src_start | (src_len << 16) | (dst_start << 32)


def imm_sync(sync_id: int, mode: int, elems: int) -> int:
    return sync_id | (mode << 16) | (elems << 24)


def imm_br(cond: int, target: int, cmp_sreg: int) -> int:
    return cond | (target << 8) | (cmp_sreg << 16)


def split_tiles(imm: int):
    return imm & 0xFFFF, imm >> 16


def split_region(imm: int):
    return imm & 0xFFFF, (imm >> 16) & 0xFF


def split_slice(imm: int):
    return imm & 0xFFFF, (imm >> 16) & 0xFFFF, (imm >> 32) & 0xFFFF


def split_sync(imm: int):
    return imm & 0xFFFF, (imm >> 16) & 0xFF, imm >> 24


def split_br(imm: int):
    return imm & 0xFF, (imm >> 8) & 0xFF, imm >> 16


@dataclass(slots=True)
class Instruction:
    opcode: Op
    dst: int = R_NONE
    src0: int = R_NONE
    src1: int = R_NONE
    imm: int = 0
    chain: int = 0
    tag: int = 0      # scoreboard token: wait on the instruction `tag` slots back

    @property
    def group(self) -> Group:
        return GROUP_OF[self.opcode]

    def encode(self) -> bytes:
        if not 0 <= self.imm < (1 << 48):
            raise ValueError(f"imm out of range: {self.imm:#x}")
        if not 0 <= self.tag < (1 << 12):
            raise ValueError(f"tag out of range: {self.tag}")
        lo = (int(self.group) | (int(self.opcode) << 4) | (self.dst << 12)
              | (self.src0 << 28) | (self.src1 << 44) | ((self.imm & 0xF) << 60))
        hi = (self.imm >> 4) | (self.chain << 44) | (self.tag << 52)
        return struct.pack("<QQ", lo, hi)

    @classmethod
    def decode(cls, word: bytes) -> "Instruction":
        if len(word) != 16:
            raise MalformedBinary(f"instruction word must be 16 bytes, got {len(word)}")
        lo, hi = struct.unpack("<QQ", word)
        group = lo & 0xF
        opval = (lo >> 4) & 0xFF
        try:
            op = Op(opval)
        except ValueError:
            raise MalformedBinary(f"unknown opcode {opval:#x}") from None
        if int(GROUP_OF[op]) != group:
            raise MalformedBinary(f"group {group} inconsistent with opcode {op.name}")
        inst = cls(
            opcode=op,
            dst=(lo >> 12) & 0xFFFF,
            src0=(lo >> 28) & 0xFFFF,
            src1=(lo >> 44) & 0xFFFF,
            imm=((lo >> 60) & 0xF) | ((hi & ((1 << 44) - 1)) << 4),
            chain=(hi >> 44) & 0xFF,
            tag=(hi >> 52) & 0xFFF,
        )
        return inst

    def _fmt_operand(self, operand: int) -> str:
        if operand == R_NONE:
            return "-"
        if is_vreg(operand):
            return f"v{reg_index(operand)}"
        if is_sreg(operand):
            return f"s{reg_index(operand)}"
        return f"?{operand:#x}"

    def asm(self) -> str:
        return (f"{self.chain}:{self.group.name} {self.opcode.name} "
                f"{self._fmt_operand(self.dst)}, {self._fmt_operand(self.src0)}, "
                f"{self._fmt_operand(self.src1)}, {self.imm:#x}")


def disassemble_text(instructions) -> str:
    return "\n".join(i.asm() for i in instructions) + "\n"
