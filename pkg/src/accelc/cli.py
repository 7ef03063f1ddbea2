"""Command-line driver: compile, simulate, validate, analyze.

Exit codes: 0 success, 1 diagnostic failure (bad model, budget
exceeded, validation mismatch), 2 usage error.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import fxp, pipeline
from .codegen import CodegenError
from .machine import MachineFault
from .model_ir import ModelError
from .planner import PlanError, plan_model
from .verify import verify_program


def _write_text(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2) + "\n")


def _write_bytes(path, blob):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def _setup(args):
    graph = pipeline.load_model(args.model)
    cfg = pipeline.load_config(args.config, bw=args.bw, clock=args.clock)
    os.makedirs(args.out, exist_ok=True)
    return graph, cfg


def cmd_compile(args):
    graph, cfg = _setup(args)
    plan, prog = pipeline.compile_model(graph, cfg)
    violations = verify_program(prog, cfg)
    if violations:
        for v in violations:
            print(f"verify: {v}", file=sys.stderr)
        return 1
    _write_bytes(os.path.join(args.out, "program.bin"), prog.binary())
    _write_text(os.path.join(args.out, "program.asm"), prog.disasm())
    _write_json(os.path.join(args.out, "plan.json"),
                pipeline.plan_report(plan))
    print(f"compiled {len(plan.layers)} layers into {len(prog.banks)} "
          f"instruction banks ({prog.expected_writebacks} writebacks)")
    return 0


def cmd_simulate(args):
    graph, cfg = _setup(args)
    plan, prog = pipeline.compile_model(graph, cfg)
    weights = pipeline.load_weights(graph, args.seed)
    tin = pipeline.random_input(graph, args.seed)
    mem = pipeline.program_image(plan, prog, weights, tin)
    trace = None
    try:
        if args.trace:
            trace = open(os.path.join(args.out, "trace.log"), "w")
        m, met = pipeline.run_program(plan, prog, mem, trace=trace)
    finally:
        if trace:
            trace.close()
    rep = pipeline.metrics_report(met, cfg, plan)
    _write_json(os.path.join(args.out, "metrics.json"), rep)
    print(f"{met.total_cycles} cycles, {rep['exec_time_s'] * 1e3:.3f} ms, "
          f"{rep['achieved_gb_per_s']:.3f} GB/s, "
          f"{met.writebacks} writebacks")
    return 0


def cmd_validate(args):
    graph, cfg = _setup(args)
    plan, prog = pipeline.compile_model(graph, cfg)
    weights = pipeline.load_weights(graph, args.seed)
    tin = pipeline.random_input(graph, args.seed)
    ref = fxp.run_reference(graph, tin, weights)
    mem = pipeline.program_image(plan, prog, weights, tin)
    m, _ = pipeline.run_program(plan, prog, mem)
    rows = []
    failed = 0
    for layer in graph.layers:
        key = f"L{layer.id}:out"
        if key not in plan.regions:
            continue
        addr, size = plan.regions[key]
        got = m.mem[addr:addr + size].view("<i2")
        want = ref[layer.id].ravel()
        row = {"layer": layer.id, "kind": layer.kind, "status": "pass"}
        bad = np.nonzero(got != want)[0]
        if bad.size:
            failed += 1
            i = int(bad[0])
            ch, h, w = layer.out_shape
            row.update(status="fail", mismatches=int(bad.size),
                       channel=i % ch, y=i // (ch * w), x=(i // ch) % w,
                       got=int(got[i]), want=int(want[i]),
                       got_value=got[i] / 256.0, want_value=want[i] / 256.0)
            print(f"layer {layer.id} {layer.kind}: FAIL "
                  f"({bad.size}/{want.size} elements), first at "
                  f"ch {row['channel']} y {row['y']} x {row['x']}: "
                  f"got {row['got']} want {row['want']} (raw Q8.8)")
        else:
            print(f"layer {layer.id} {layer.kind}: pass")
        rows.append(row)
    _write_json(os.path.join(args.out, "validate.json"),
                {"seed": args.seed, "layers": rows,
                 "failed": failed})
    return 1 if failed else 0


def cmd_analyze(args):
    graph, cfg = _setup(args)
    plan = plan_model(graph, cfg)
    rep = pipeline.plan_report(plan)
    _write_json(os.path.join(args.out, "analyze.json"), rep)
    csv_path = os.path.join(args.out, "bandwidth.csv")
    tmp = csv_path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "kind", "loop_order", "required_kloop_gb_s",
                    "required_mloop_gb_s", "bandwidth_gb_s",
                    "tile_cl_percent"])
        for row in rep["layers"]:
            w.writerow([row["layer"], row["kind"], row["loop_order"],
                        f"{row['required_kloop_gb_s']:.3f}",
                        f"{row['required_mloop_gb_s']:.3f}",
                        f"{row['bandwidth_gb_s']:.3f}",
                        ";".join(str(c) for c in row["tile_cl_percent"])])
    os.replace(tmp, csv_path)
    for row in rep["layers"]:
        print(f"layer {row['layer']} {row['kind']}: {row['loop_order']} "
              f"Kloop {row['required_kloop_gb_s']:.2f} GB/s "
              f"Mloop {row['required_mloop_gb_s']:.2f} GB/s "
              f"achieved {row['bandwidth_gb_s']:.2f} GB/s")
    if not rep["layers"]:
        print("no layers")
    return 0


COMMANDS = {
    "compile": cmd_compile,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
    "analyze": cmd_analyze,
}


def _parser():
    ap = argparse.ArgumentParser(
        prog="accelc",
        description="CNN accelerator toolchain: compile models to the "
                    "vector ISA, simulate them, and check results "
                    "against the fixed-point reference.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    helps = {
        "compile": "emit program binary, disassembly, and plan report",
        "simulate": "run the cycle model and write a metrics report",
        "validate": "compare simulated output with the reference, "
                    "layer by layer",
        "analyze": "report loop orders, traffic, and load balance "
                   "without running",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--model", required=True, help="model JSON path")
        p.add_argument("--config", default=None,
                       help="JSON file of hardware-config overrides")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0,
                       help="seed for generated inputs and weights")
        p.add_argument("--bw", type=float, default=None,
                       help="memory bandwidth override, bytes/s")
        p.add_argument("--clock", type=float, default=None,
                       help="clock override, Hz")
        p.add_argument("--trace", action="store_true",
                       help="write a per-instruction issue log "
                            "(simulate only, large)")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return COMMANDS[args.cmd](args)
    except (ModelError, PlanError, CodegenError, MachineFault,
            OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
