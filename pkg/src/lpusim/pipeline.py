"""End-to-end helpers shared by the CLI and the test suite: compile a model
preset onto an architecture, run sampled-position experiments, aggregate
reports, and sweep device counts."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import codegen, compiler, esl, isa, mapper, model as model_mod, timing
from .arch import ClusterConfig, DeviceConfig, default_partition, load_device_preset, validate_fit
from .codegen import STAGE_GENERATE, STAGE_SUMMARIZE
from .errors import LpuError
from .interp import Machine, SamplingParams
from .model import ModelConfig, kv_bytes, load_model_preset, model_bytes
from .timing import EngineState, TimingWalker

DEFAULT_IN_TOKENS = 32
DEFAULT_OUT_TOKENS = 2016
DEFAULT_POSITIONS = (32, 536, 1040, 1544, 2047)


@dataclass
class ExperimentSpec:
    model: str
    arch: str
    devices: int = 1
    partition: str = ""
    input_tokens: int = DEFAULT_IN_TOKENS
    output_tokens: int = DEFAULT_OUT_TOKENS
    positions: tuple = ()
    sampling: SamplingParams = field(default_factory=SamplingParams)
    full_decode: bool = False
    seed: int = 0

    def resolved_positions(self):
        if self.positions:
            return tuple(self.positions)
        first = self.input_tokens
        last = self.input_tokens + self.output_tokens - 1
        if (first, last) == (DEFAULT_IN_TOKENS,
                             DEFAULT_IN_TOKENS + DEFAULT_OUT_TOKENS - 1):
            return DEFAULT_POSITIONS
        pts = np.linspace(first, last, min(5, self.output_tokens))
        return tuple(int(round(p)) for p in pts)


@dataclass
class Artifacts:
    model: ModelConfig
    device: DeviceConfig
    cluster: ClusterConfig
    partition: object
    memory_maps: list
    programs: list
    compiled: list
    ring: esl.RingConfig

    @property
    def binaries(self):
        return [compiler.emit_binary(c) for c in self.compiled]


def compile_model(model_name: str, arch_name: str, n_devices: int,
                  partition: str = "") -> Artifacts:
    """Map, generate, and compile per-device programs, checking capacity
    against the full-context footprint first."""
    cfg = load_model_preset(model_name) if isinstance(model_name, str) else model_name
    dev = load_device_preset(arch_name) if isinstance(arch_name, str) else arch_name
    cluster = ClusterConfig(dev, n_devices, partition)
    validate_fit(model_bytes(cfg), kv_bytes(cfg, cfg.max_seq), cluster)
    part = mapper.partition_model(cfg, n_devices)
    ring = esl.configure_rings(n_devices, cluster.ring_partition)
    mms, programs, compiled = [], [], []
    for d in range(n_devices):
        mm = mapper.map_device(part, cfg, dev, d)
        prog = codegen.generate_program(cfg, mm, part, cluster, d)
        mms.append(mm)
        programs.append(prog)
        compiled.append(compiler.compile_program(prog, mm, dev))
    return Artifacts(cfg, dev, cluster, part, mms, programs, compiled, ring)


def trapezoid_weights(positions):
    """Weights that make the weighted sum approximate the mean over the
    position interval (latency is near-affine in position)."""
    p = list(positions)
    if len(p) == 1:
        return [1.0]
    w = []
    for i in range(len(p)):
        lo = p[i - 1] if i > 0 else p[0]
        hi = p[i + 1] if i + 1 < len(p) else p[-1]
        w.append((hi - lo) / 2.0)
    total = sum(w)
    return [x / total for x in w]


@dataclass
class AggregateReport:
    model: str
    arch: str
    devices: int
    partition: str
    ms_per_token: float
    utilization: float
    exposed_sync_us: float
    bytes_per_token: float
    cycles_per_token: float
    positions: tuple
    per_position: list

    def csv_row(self):
        return (f"{self.model},{self.devices},{self.partition},"
                f"{self.ms_per_token:.4f},{self.utilization:.4f},"
                f"{self.exposed_sync_us:.3f},{self.bytes_per_token:.3e}")

    CSV_HEADER = "model,devices,partition,ms_per_token,utilization,exposed_sync_us,bytes_per_token"


def run_experiment(spec: ExperimentSpec, artifacts: Artifacts | None = None) -> AggregateReport:
    """Sampled-position timing of the generation stage, aggregated with
    trapezoidal weighting into per-token figures."""
    art = artifacts or compile_model(spec.model, spec.arch, spec.devices,
                                     spec.partition)
    positions = [p for p in spec.resolved_positions() if p < art.model.max_seq]
    if art.cluster.num_devices == 1:
        reports = []
        for pos in positions:
            _, rep = timing.simulate_token(art.compiled[0], art.device, pos)
            reports.append(rep)
    else:
        reports = esl.run_cluster(art.compiled, art.device, art.ring, positions)
    w = trapezoid_weights(positions)
    seconds = sum(wi * r.seconds for wi, r in zip(w, reports))
    cycles = sum(wi * r.cycles for wi, r in zip(w, reports))
    bytes_tok = sum(wi * r.bytes_streamed for wi, r in zip(w, reports))
    exposed = sum(wi * r.exposed_sync for wi, r in zip(w, reports))
    util = bytes_tok / (art.device.bytes_per_cycle() * cycles)
    return AggregateReport(
        model=art.model.name, arch=art.device.name,
        devices=art.cluster.num_devices, partition=art.cluster.ring_partition,
        ms_per_token=seconds * 1e3, utilization=util,
        exposed_sync_us=exposed / art.device.freq_hz * 1e6,
        bytes_per_token=bytes_tok, cycles_per_token=cycles,
        positions=tuple(positions), per_position=reports)


def full_decode(artifacts: Artifacts, params, input_tokens, n_out,
                sampling: SamplingParams | None = None):
    """Run every position functionally and timed on a single device.
    Returns (tokens, per-token SimReports)."""
    if artifacts.cluster.num_devices != 1:
        raise LpuError("full decode runs on a single device")
    compiled, dev = artifacts.compiled[0], artifacts.device
    machine = Machine(compiled, dev, sampling)
    machine.load_params(params)
    walker = TimingWalker(compiled, dev, machine=machine)
    io_in = compiled.region_by_key()["io_in"]
    machine.mem[io_in.region_id][:len(input_tokens)] = input_tokens
    machine.sregs[isa.S_POS] = 0
    machine.sregs[isa.S_TOKCNT] = 0
    machine.sregs[isa.S_EOS] = 0
    machine.sregs[isa.S_LIMIT] = n_out
    machine.sregs[isa.S_INLEN] = len(input_tokens) - 1
    while True:
        _, br = walker.walk(STAGE_SUMMARIZE, machine.sregs[isa.S_POS])
        if br != isa.BR_LOOP:
            break
    machine.sregs[isa.S_TOKEN] = int(input_tokens[-1])
    tokens, reports = [], []
    while not machine.halted:
        rep, br = walker.walk(STAGE_GENERATE, machine.sregs[isa.S_POS])
        tokens.append(rep.token)
        reports.append(rep)
        if br != isa.BR_LOOP:
            break
    return tokens, reports


def sweep(model_name: str, arch_name: str, device_counts, spec: ExperimentSpec | None = None):
    """Scaling study: per-device-count reports plus speedups vs one device."""
    rows = []
    base_ms = None
    for n in device_counts:
        s = ExperimentSpec(model=model_name, arch=arch_name, devices=n,
                           partition=default_partition(n))
        if spec is not None:
            s.input_tokens = spec.input_tokens
            s.output_tokens = spec.output_tokens
            s.positions = spec.positions
        rep = run_experiment(s)
        if base_ms is None:
            base_ms = rep.ms_per_token
        rows.append({
            "devices": n, "partition": rep.partition,
            "ms_per_token": rep.ms_per_token,
            "speedup": base_ms / rep.ms_per_token,
            "exposed_sync_us": rep.exposed_sync_us,
            "utilization": rep.utilization,
        })
    return rows
