"""Model-file plumbing shared by the CLI and the test harness.

Turns a model JSON path into a plan, a compiled program, a populated
memory image, and a finished simulation, one call per stage.
"""

import json
import os

import numpy as np

from . import fxp
from .codegen import compile_plan
from .config import HardwareConfig
from .machine import Machine
from .planner import build_memory, estimate_cycles, plan_model
from .model_ir import normalize, parse_model


def load_model(path):
    """Parse and normalize a model file.

    A relative weight-archive path is resolved against the model file's
    directory, so model + archive travel together.
    """
    with open(path) as f:
        graph = normalize(parse_model(f.read()))
    arc = graph.weight_archive_path
    if arc and not os.path.isabs(arc):
        graph.weight_archive_path = os.path.join(
            os.path.dirname(os.path.abspath(path)), arc)
    return graph


def load_config(path=None, bw=None, clock=None):
    """HardwareConfig from an optional JSON override file plus CLI knobs."""
    fields = {}
    if path:
        with open(path) as f:
            fields = json.load(f)
    if not isinstance(fields, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    if bw is not None:
        fields["mem_bandwidth_bytes_per_s"] = bw
    if clock is not None:
        fields["clock_hz"] = clock
    try:
        return HardwareConfig().with_overrides(**fields)
    except TypeError as e:
        raise ValueError(f"bad config field: {e}")


def compile_model(graph, cfg):
    plan = plan_model(graph, cfg)
    return plan, compile_plan(plan)


def load_weights(graph, seed=0):
    """Archive tensors when the model names an archive, otherwise
    deterministic stand-ins derived from the seed."""
    if graph.weight_archive_path:
        return fxp.load_weight_archive(graph)
    rng = np.random.default_rng((seed ^ 0x5EED) & 0xFFFFFFFF)
    out = {}
    for layer in graph.layers:
        if layer.weights_ref and layer.weights_ref not in out:
            out[layer.weights_ref] = rng.integers(
                -300, 300, (layer.out_ch, layer.in_ch, layer.kh, layer.kw),
                dtype=np.int64).astype(np.int16)
        if layer.bias_ref and layer.bias_ref not in out:
            out[layer.bias_ref] = rng.integers(
                -2000, 2000, layer.out_ch, dtype=np.int64).astype(np.int16)
    return out


def random_input(graph, seed=0):
    rng = np.random.default_rng(seed)
    c, h, w = graph.input_shape
    raw = rng.integers(-1024, 1024, (c, h, w),
                       dtype=np.int64).astype(np.int16)
    return fxp.Tensor.from_chw(raw)


def program_image(plan, prog, weights, tin):
    """Memory image with data regions filled and the program banks
    resident at program_base."""
    cfg = plan.cfg
    mem = build_memory(plan, weights, tin)
    base = cfg.program_base
    words = cfg.icache_words_per_bank
    bank_bytes = words * 4
    for i, bank in enumerate(prog.banks):
        blob = np.array(bank + [0] * (words - len(bank)), "<u4").tobytes()
        mem[base + i * bank_bytes:base + (i + 1) * bank_bytes] = \
            np.frombuffer(blob, np.uint8)
    return mem


def run_program(plan, prog, mem, trace=None):
    """Simulate to completion; returns (machine, metrics)."""
    marks = []
    total = 0
    for lp in plan.layers:
        total += lp.expected_writebacks
        marks.append(total)
    m = Machine(plan.cfg, mem)
    met = m.run(expected_writebacks=prog.expected_writebacks,
                layer_marks=marks, trace_out=trace)
    return m, met


def simulate_model(graph, cfg, seed=0, trace=None):
    """Full stack for one model: returns (machine, metrics, plan, prog)."""
    plan, prog = compile_model(graph, cfg)
    weights = load_weights(graph, seed)
    tin = random_input(graph, seed)
    mem = program_image(plan, prog, weights, tin)
    m, met = run_program(plan, prog, mem, trace=trace)
    return m, met, plan, prog


def metrics_report(met, cfg, plan=None) -> dict:
    """Metrics plus wall-clock time and achieved bandwidth at the
    configured clock.

    With a plan, adds per-layer rows (time span from the layer end
    marks, bytes from the traffic model, which the machine matches
    exactly) and aggregates that exclude FullyConnected layers, since
    FC time is dominated by weight streaming rather than compute.
    """
    d = met.to_dict()
    t = met.total_cycles / cfg.clock_hz
    d["clock_hz"] = cfg.clock_hz
    d["exec_time_s"] = t
    d["frames_per_s"] = (1.0 / t) if t else 0.0
    moved = met.total_bytes_loaded + met.bytes_stored
    d["achieved_gb_per_s"] = (moved / t / 1e9) if t else 0.0
    if plan is None or len(met.layer_ends) != len(plan.layers):
        return d
    rows = []
    agg = {True: [0, 0.0], False: [0, 0.0]}  # fc? -> [bytes, seconds]
    start = 0.0
    for lp, end in zip(plan.layers, met.layer_ends):
        span = (end - start) / cfg.clock_hz
        start = end
        traffic = min(lp.traffic_kloop, lp.traffic_mloop)
        rows.append({
            "layer": lp.layer_id, "kind": lp.kind,
            "time_s": span, "bytes": traffic,
            "gb_per_s": traffic / span / 1e9 if span else 0.0,
        })
        a = agg[lp.kind == "FullyConnected"]
        a[0] += traffic
        a[1] += span
    d["layers"] = rows
    bytes_nofc, t_nofc = agg[False]
    d["exec_time_s_no_fc"] = t_nofc
    d["achieved_gb_per_s_no_fc"] = \
        bytes_nofc / t_nofc / 1e9 if t_nofc else 0.0
    return d


def plan_report(plan) -> dict:
    """Per-layer planning summary: loop orders, traffic, bandwidth, C_L.

    Required bandwidth per order is the rate that would keep the compute
    units fed (traffic over the compute-bound time), so an order can
    demand more than the memory system offers.
    """
    cfg = plan.cfg
    unlimited = cfg.with_overrides(mem_bandwidth_bytes_per_s=1e18)
    layers = []
    for lp in plan.layers:
        layer = plan.graph.by_id(lp.layer_id)
        compute = estimate_cycles(layer, lp.map_tiles, lp.kernel_tiles,
                                  lp.windows, lp.loop_order, lp.mode,
                                  unlimited)
        t_compute = compute / cfg.clock_hz if compute else 0.0
        row = {
            "layer": lp.layer_id,
            "kind": lp.kind,
            "out_shape": list(layer.out_shape),
            "mode": lp.mode,
            "loop_order": lp.loop_order,
            "map_tiles": len(lp.map_tiles),
            "kernel_tiles": len(lp.kernel_tiles),
            "traffic_kloop_bytes": lp.traffic_kloop,
            "traffic_mloop_bytes": lp.traffic_mloop,
            "required_kloop_gb_s":
                lp.traffic_kloop / t_compute / 1e9 if t_compute else 0.0,
            "required_mloop_gb_s":
                lp.traffic_mloop / t_compute / 1e9 if t_compute else 0.0,
            "est_cycles": lp.est_cycles,
            "est_time_ms": lp.est_cycles / cfg.clock_hz * 1e3,
            "bandwidth_gb_s": lp.bandwidth_est / 1e9,
            "bw_exceeded": lp.bw_exceeded,
            "tile_cl_percent": [round(c, 3) for c in lp.tile_cl],
            "writebacks": lp.expected_writebacks,
        }
        layers.append(row)
    return {
        "layers": layers,
        "total_traffic_bytes": plan.total_traffic,
        "total_est_cycles": plan.total_est_cycles,
        "bandwidth_limit_gb_s": cfg.mem_bandwidth_bytes_per_s / 1e9,
    }
