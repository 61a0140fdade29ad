import numpy as np
import pytest

from lpusim import isa
from lpusim.arch import ClusterConfig, load_device_preset
from lpusim.codegen import STAGE_GENERATE, STAGE_SUMMARIZE, Program, generate_program
from lpusim.compiler import (allocate_registers, chain_instructions,
                             compile_program, derive_deps, disassemble,
                             emit_binary)
from lpusim.errors import (CyclicDependency, MalformedBinary,
                           RegisterPressureExceeded)
from lpusim.isa import Group, Instruction, Op, sreg, vreg
from lpusim.mapper import map_device, partition_model
from lpusim.model import load_model_preset


def tiny_compiled(n=1, device_id=0, arch="hbm3-x1", model="tiny-2l"):
    dev = load_device_preset(arch)
    cfg = load_model_preset(model)
    part = partition_model(cfg, n)
    mm = map_device(part, cfg, dev, device_id)
    prog = generate_program(cfg, mm, part, ClusterConfig(dev, n), device_id)
    return compile_program(prog, mm, dev), dev, mm, prog


def straightline_program(n_ops, extra_live=0):
    """a = f(x); b = g(a); ... each value dead after its single use."""
    cfg = load_model_preset("tiny-2l")
    prog = Program(model=cfg, device_id=0, n_devices=1)
    insts = []
    prev = vreg(0)
    insts.append(Instruction(Op.RELU, dst=prev, src0=prev))
    for k in range(1, n_ops):
        cur = vreg(k)
        insts.append(Instruction(Op.RELU, dst=cur, src0=prev))
        prev = cur
    for k in range(extra_live):
        insts.append(Instruction(Op.ADD, dst=vreg(100 + k), src0=vreg(0),
                                 src1=prev))
    prog.stages["generate"] = insts
    return prog


class TestLinearScan:
    def test_chain_of_dead_values_needs_two_registers(self):
        prog = straightline_program(3)
        out = allocate_registers(prog, lmu_vector_regs=2, lmu_scalar_regs=8)
        used = {isa.reg_index(i.dst) for i in out.stages["generate"]}
        assert used <= {0, 1}

    def test_empty_program_needs_none(self):
        cfg = load_model_preset("tiny-2l")
        prog = Program(model=cfg, device_id=0, n_devices=1)
        prog.stages["generate"] = []
        out = allocate_registers(prog, 0, isa.NUM_ARCH_SREGS)
        assert out.stages["generate"] == []

    def test_pressure_error(self):
        # value 0 stays live across the whole chain: needs 3, bank holds 2
        prog = straightline_program(3, extra_live=1)
        with pytest.raises(RegisterPressureExceeded):
            allocate_registers(prog, lmu_vector_regs=2, lmu_scalar_regs=8)
        allocate_registers(prog, lmu_vector_regs=3, lmu_scalar_regs=8)

    def test_no_two_live_ranges_share_register(self):
        compiled, dev, _, prog = tiny_compiled()
        alloc = allocate_registers(prog, dev.lmu_vector_regs, dev.lmu_scalar_regs)
        for name, insts in alloc.stages.items():
            live_by_phys = {}
            writes, last_read = {}, {}
            for i, inst in enumerate(insts):
                for r in (inst.src0, inst.src1):
                    if isa.is_vreg(r):
                        last_read[isa.reg_index(r)] = i
                if isa.is_vreg(inst.dst):
                    p = isa.reg_index(inst.dst)
                    writes.setdefault(p, []).append(i)
            # a register rewritten before its prior value's last read is a bug
            for p, ws in writes.items():
                for w1, w2 in zip(ws, ws[1:]):
                    reads_between = [j for j in range(w1 + 1, w2)
                                     if _reads_phys(insts[j], p)]
                    last = max(reads_between, default=w1)
                    assert last <= w2

    def test_scalar_bank_checked(self):
        compiled, dev, _, prog = tiny_compiled()
        with pytest.raises(RegisterPressureExceeded):
            allocate_registers(prog, dev.lmu_vector_regs, 2)


def _reads_phys(inst, p):
    return any(isa.is_vreg(r) and isa.reg_index(r) == p
               for r in (inst.src0, inst.src1))


class TestChaining:
    def test_minimal_pair(self):
        """A weight read and its consumer land in different chains joined by
        a dependency edge."""
        compiled, *_ = tiny_compiled()
        cs = compiled.chains[STAGE_GENERATE]
        mem_idx = cs.chain_indices[Group.MEM]
        comp_idx = cs.chain_indices[Group.COMP]
        first_rd = next(i for i in mem_idx
                        if cs.instructions[i].opcode == Op.RD_WEIGHT)
        consumer = next(i for i in comp_idx
                        if cs.instructions[i].opcode in isa.STREAMING_OPS
                        and first_rd in cs.deps[i])
        assert consumer > first_rd

    def test_chains_partition_instructions(self):
        compiled, *_ = tiny_compiled(n=2)
        for cs in compiled.chains.values():
            all_idx = sorted(i for idxs in cs.chain_indices.values() for i in idxs)
            assert all_idx == list(range(len(cs.instructions)))
            for g, idxs in cs.chain_indices.items():
                for i in idxs:
                    assert cs.instructions[i].group == g

    def test_deps_form_dag_in_program_order(self):
        compiled, *_ = tiny_compiled(n=2)
        for cs in compiled.chains.values():
            for i, dep in enumerate(cs.deps):
                assert all(j < i for j in dep)

    def test_forward_tag_rejected(self):
        insts = [Instruction(Op.HLT, tag=5)]
        with pytest.raises(CyclicDependency):
            derive_deps(insts)

    def test_tx_overlap_contract(self):
        """Transmit depends on the producing compute; no compute instruction
        waits on the transmit (communication hides under compute)."""
        compiled, *_ = tiny_compiled(n=2)
        cs = compiled.chains[STAGE_GENERATE]
        tx_ids = {i for i in cs.chain_indices[Group.NET]
                  if cs.instructions[i].opcode == Op.TX_PART}
        assert tx_ids
        for i in tx_ids:
            assert cs.deps[i], "transmit must wait for its partial result"
        for i in cs.chain_indices[Group.COMP]:
            assert not (set(cs.deps[i]) & tx_ids)

    def test_topological_execution_order_exists(self):
        compiled, *_ = tiny_compiled(n=2)
        for cs in compiled.chains.values():
            done = [False] * len(cs.instructions)
            for i in range(len(cs.instructions)):
                assert all(done[j] for j in cs.deps[i])
                done[i] = True


class TestBinary:
    def test_round_trip_identity(self):
        compiled, *_ = tiny_compiled()
        blob = emit_binary(compiled)
        assert blob[:4] == b"LPUB"
        again = emit_binary(disassemble(blob))
        assert again == blob

    def test_round_trip_preserves_instructions(self):
        compiled, *_ = tiny_compiled(n=2)
        back = disassemble(emit_binary(compiled))
        for stage in compiled.chains:
            assert back.chains[stage].instructions == \
                compiled.chains[stage].instructions
            assert back.chains[stage].deps == compiled.chains[stage].deps
        assert [r.key for r in back.regions] == [r.key for r in compiled.regions]

    def test_truncated_binary_rejected(self):
        compiled, *_ = tiny_compiled()
        blob = emit_binary(compiled)
        for cut in (2, 10, len(blob) // 2, len(blob) - 7):
            with pytest.raises(MalformedBinary):
                disassemble(blob[:cut])

    def test_bad_magic_rejected(self):
        compiled, *_ = tiny_compiled()
        blob = bytearray(emit_binary(compiled))
        blob[0] = 0x58
        with pytest.raises(MalformedBinary):
            disassemble(bytes(blob))

    def test_trailing_garbage_rejected(self):
        compiled, *_ = tiny_compiled()
        with pytest.raises(MalformedBinary):
            disassemble(emit_binary(compiled) + b"\x00")

    def test_hlt_encoding(self):
        word = Instruction(Op.HLT).encode()
        assert len(word) == 16
        back = Instruction.decode(word)
        assert back.opcode == Op.HLT and back.group == Group.CTRL
        assert back.dst == back.src0 == back.src1 == back.imm == 0

    def test_word_field_packing(self):
        rng = np.random.default_rng(3)
        ops = list(Op)
        for _ in range(200):
            inst = Instruction(
                opcode=ops[int(rng.integers(len(ops)))],
                dst=int(rng.integers(1 << 16)),
                src0=int(rng.integers(1 << 16)),
                src1=int(rng.integers(1 << 16)),
                imm=int(rng.integers(1 << 48)),
                chain=int(rng.integers(1 << 8)),
                tag=int(rng.integers(1 << 12)))
            assert Instruction.decode(inst.encode()) == inst

    def test_asm_text_shape(self):
        compiled, *_ = tiny_compiled()
        line = compiled.chains[STAGE_GENERATE].instructions[0].asm()
        chain, rest = line.split(":", 1)
        assert chain.isdigit()
        group, op, operands = rest.split(" ", 2)
        assert group in ("MEM", "COMP", "NET", "CTRL")
        assert operands.count(",") == 3
