"""Command-line harness: compile presets, run single- and multi-device
experiments, sweep device counts, disassemble binaries, and self-test."""

import argparse
import math
import os
import sys

import numpy as np

from . import compiler, esl, model as model_mod, pipeline, reference
from .arch import default_partition, list_device_presets
from .errors import LpuError
from .interp import SamplingParams
from .isa import Group
from .model import list_model_presets, synth_params


def _add_common(p):
    p.add_argument("--model", required=True, help="model preset name")
    p.add_argument("--arch", default="hbm3-x4", help="architecture preset name")
    p.add_argument("--devices", type=int, default=1, choices=(1, 2, 4, 8))
    p.add_argument("--partition", default="", help="ring partition, e.g. 2x4")


def _spec_from_args(args) -> pipeline.ExperimentSpec:
    positions = tuple(int(p) for p in args.positions.split(",")) if args.positions else ()
    return pipeline.ExperimentSpec(
        model=args.model, arch=args.arch, devices=args.devices,
        partition=args.partition or default_partition(args.devices),
        input_tokens=args.in_tokens, output_tokens=args.out_tokens,
        positions=positions, seed=args.seed, full_decode=args.full_decode,
        sampling=SamplingParams(seed=args.seed))


def cmd_compile(args):
    art = pipeline.compile_model(args.model, args.arch, args.devices,
                                 args.partition)
    os.makedirs(args.out, exist_ok=True)
    for d, compiled in enumerate(art.compiled):
        path = os.path.join(args.out, f"{args.model}.{args.arch}.x{args.devices}.dev{d}.lpubin")
        with open(path, "wb") as f:
            f.write(compiler.emit_binary(compiled))
        print(f"wrote {path}")
        for stage, cs in compiled.chains.items():
            counts = {g.name: 0 for g in Group}
            for inst in cs.instructions:
                counts[inst.group.name] += 1
            line = " ".join(f"{k}={v}" for k, v in counts.items())
            print(f"  dev{d} {stage}: {line}")
    if args.map_dump:
        path = os.path.join(args.out, f"{args.model}.{args.arch}.map.csv")
        with open(path, "w") as f:
            art.memory_maps[0].dump_csv(f)
        print(f"wrote {path}")
    return 0


def cmd_run(args):
    spec = _spec_from_args(args)
    art = pipeline.compile_model(spec.model, spec.arch, spec.devices,
                                 spec.partition)
    if args.full_decode:
        return _run_full_decode(args, spec, art)
    rep = pipeline.run_experiment(spec, art)
    lines = [pipeline.AggregateReport.CSV_HEADER, rep.csv_row()]
    _emit_report(args.report, lines)
    print(f"{rep.model} x{rep.devices}: {rep.ms_per_token:.4f} ms/token, "
          f"utilization {rep.utilization:.1%}, exposed sync {rep.exposed_sync_us:.2f} us")
    return 0


def _run_full_decode(args, spec, art):
    params = synth_params(art.model, spec.seed)
    if params.total_bytes > 1 << 30:
        print("full decode requires a small model", file=sys.stderr)
        return 2
    rng = np.random.default_rng(spec.seed)
    inp = rng.integers(0, art.model.vocab_size, size=spec.input_tokens).tolist()
    tokens, reports = pipeline.full_decode(art, params, inp, spec.output_tokens,
                                           spec.sampling)
    mean_ms = sum(r.seconds for r in reports) / len(reports) * 1e3
    print(f"decoded {len(tokens)} tokens, mean {mean_ms:.4f} ms/token")
    if args.oracle:
        ref = reference.generate(art.model, params, inp, spec.output_tokens)
        match = tokens == ref
        print(f"oracle comparison: {'identical' if match else 'MISMATCH'}")
        if not match:
            return 1
    lines = ["position,token,cycles,utilization"]
    lines += [f"{r.position},{t},{r.cycles:.1f},{r.utilization:.4f}"
              for t, r in zip(tokens, reports)]
    _emit_report(args.report, lines)
    return 0


def cmd_sweep(args):
    counts = [int(c) for c in args.device_counts.split(",")]
    spec = _spec_from_args(args) if args.positions or args.in_tokens != 32 else None
    rows = pipeline.sweep(args.model, args.arch, counts, spec)
    lines = ["devices,partition,ms_per_token,speedup,exposed_sync_us,utilization"]
    for r in rows:
        lines.append(f"{r['devices']},{r['partition']},{r['ms_per_token']:.4f},"
                     f"{r['speedup']:.4f},{r['exposed_sync_us']:.3f},"
                     f"{r['utilization']:.4f}")
        print(f"x{r['devices']}: {r['ms_per_token']:.3f} ms/token, "
              f"speedup {r['speedup']:.2f}, sync {r['exposed_sync_us']:.1f} us")
    _emit_report(args.report, lines)
    if len(rows) > 1:
        doublings = [rows[i + 1]["speedup"] / rows[i]["speedup"]
                     for i in range(len(rows) - 1)]
        geo = math.exp(sum(math.log(d) for d in doublings) / len(doublings))
        print(f"geometric-mean per-doubling speedup: {geo:.3f}")
    return 0


def cmd_disasm(args):
    with open(args.binary, "rb") as f:
        compiled = compiler.disassemble(f.read())
    print(f"# model={compiled.meta['model']} device={compiled.meta['device_id']}"
          f"/{compiled.meta['n_devices']} regions={len(compiled.regions)}")
    for stage, cs in compiled.chains.items():
        print(f"# stage {stage}: {len(cs.instructions)} instructions")
        for inst in cs.instructions:
            print(inst.asm())
    return 0


def cmd_selftest(args):
    failures = 0

    def check(name, ok):
        nonlocal failures
        print(f"  [{'ok' if ok else 'FAIL'}] {name}")
        failures += 0 if ok else 1

    art = pipeline.compile_model("tiny-2l", "hbm3-x1", 1)
    params = synth_params(art.model, 7)
    rng = np.random.default_rng(7)
    inp = rng.integers(0, art.model.vocab_size, size=8).tolist()
    tokens, reports = pipeline.full_decode(art, params, inp, 24)
    ref = reference.generate(art.model, params, inp, 24)
    check("tiny-2l matches reference decoder", tokens == ref)
    check("utilization bounded", all(0 <= r.utilization <= 1 for r in reports))
    blob = compiler.emit_binary(art.compiled[0])
    check("binary round-trip", compiler.emit_binary(compiler.disassemble(blob)) == blob)
    art2 = pipeline.compile_model("tiny-2l", "hbm3-x1", 2)
    sess = esl.ClusterSession(art2.compiled, art2.device, params)
    toks2 = sess.generate(inp, 8)
    check("two-device session emits tokens", len(toks2) == 8)
    print("selftest:", "ok" if failures == 0 else f"{failures} failures")
    return 1 if failures else 0


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="lpusim",
        description="Compile decoder LLM presets to streamlined-processor "
                    "programs and simulate single- or multi-device inference.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("compile", help="emit per-device binaries and map dump")
    _add_common(p)
    p.add_argument("--out", default="artifacts")
    p.add_argument("--map-dump", action="store_true")
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("run", help="timed experiment at sampled positions")
    _add_common(p)
    p.add_argument("--in-tokens", type=int, default=pipeline.DEFAULT_IN_TOKENS)
    p.add_argument("--out-tokens", type=int, default=pipeline.DEFAULT_OUT_TOKENS)
    p.add_argument("--positions", default="", help="comma-separated KV positions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full-decode", action="store_true",
                   help="simulate every output token (small models)")
    p.add_argument("--oracle", action="store_true",
                   help="with --full-decode: compare against the reference decoder")
    p.add_argument("--report", default="", help="write CSV to this path")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="strong-scaling study over device counts")
    p.add_argument("--model", required=True)
    p.add_argument("--arch", default="hbm3-x4")
    p.add_argument("--device-counts", default="1,2,4,8")
    p.add_argument("--in-tokens", type=int, default=pipeline.DEFAULT_IN_TOKENS)
    p.add_argument("--out-tokens", type=int, default=pipeline.DEFAULT_OUT_TOKENS)
    p.add_argument("--positions", default="")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full-decode", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--devices", type=int, default=1, help=argparse.SUPPRESS)
    p.add_argument("--partition", default="", help=argparse.SUPPRESS)
    p.add_argument("--report", default="")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("disasm", help="print the assembly of a binary")
    p.add_argument("binary")
    p.set_defaults(fn=cmd_disasm)

    p = sub.add_parser("selftest", help="quick functional sanity checks")
    p.set_defaults(fn=cmd_selftest)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except LpuError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def _emit_report(path, lines):
    if path:
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    sys.exit(main())
