"""Execution planning: mode choice, tiling, loop order, loads, memory layout.

The planner turns a validated ModelGraph into an ExecutionPlan the code
generator can walk mechanically.  Per layer it decides:

  * compute mode: COOP (16 lanes cooperate on one output) or INDP (16 lanes
    produce 16 outputs with the maps element broadcast),
  * map tiles at output-row granularity sized to one MBuf bank, with halo
    rows reloaded per tile,
  * kernel tiles: 16 kernels per iteration in COOP, 256 per tile in INDP,
  * loop order via the traffic model (Kloop reloads kernels per map tile;
    Mloop reloads maps per kernel tile),
  * window zones: one op for the unpadded interior plus one per distinct
    clipped border shape,
  * load-unit assignment (greedy LPT on stream bytes, maps streams split),
  * a flat main-memory layout with synthesized weight images and bias
    tables in the exact order the hardware streams them.

Maps memory layout is tight channel-major: all channels of a pixel are
contiguous, rows are contiguous, no padding pixels ever materialize.  Border
windows are handled by clipped trace shapes instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import HardwareConfig
from .fxp import q88_quantize
from . import isa


class PlanError(ValueError):
    """A layer cannot be planned for this configuration."""


# ------------------------------------------------------------------ types

@dataclass
class LoadDescriptor:
    dest: int                 # isa LD destination code
    mem_addr: int
    length: int               # bytes
    buf_block: int            # 32-byte blocks into the destination region
    unit: int | None = None
    tag: str = "maps"


@dataclass
class MapTile:
    layer_id: int
    out_rows: tuple           # [y0, y1)
    in_rows: tuple            # [r0, r1) including halo, clipped to the input
    channels: int
    bytes: int                # maps bytes streamed for this tile
    bypass_bytes: int = 0
    assigned_cus: int = 4
    mbuf_bank: int = 0        # tiles ping-pong between the two MBuf banks
    bypass_off: int = 0       # byte offset of the bypass rows within the bank
    loads: list = field(default_factory=list)


@dataclass
class KernelTile:
    layer_id: int
    kernel_range: tuple       # [k0, k1)
    repeat: int = 1           # loop count over this tile's kernels
    bytes_per_kernel: int = 0  # nominal in_ch*kh*kw*element_bytes
    load_bytes: int = 0       # actual streamed bytes (padded images)
    loads: list = field(default_factory=list)


@dataclass
class WindowOp:
    """One window shape, repeated over a rectangle of output positions."""

    y0: int                   # tile-local output coords of the first position
    x0: int
    repeat_y: int
    repeat_x: int
    kr0: int                  # kernel row range actually computed
    kr1: int
    kc0: int                  # kernel column range actually computed
    kc1: int
    bypass: bool = False

    @property
    def rows(self) -> int:
        return self.kr1 - self.kr0

    @property
    def cols(self) -> int:
        return self.kc1 - self.kc0

    def mac_ops(self, layer) -> int:
        # virtual count: padded positions contribute as if unclipped, so the
        # per-layer sum telescopes to out_h*out_w*in_ch*kh*kw per kernel
        return self.repeat_y * self.repeat_x * layer.kh * layer.kw * layer.in_ch


@dataclass
class LayerPlan:
    layer_id: int
    kind: str
    mode: str                 # "COOP" | "INDP"
    loop_order: str           # "Kloop" | "Mloop"
    map_tiles: list
    kernel_tiles: list
    windows: list             # per map tile: list of WindowOp
    traffic_kloop: int
    traffic_mloop: int
    est_cycles: int
    bandwidth_est: float
    bw_exceeded: bool
    tile_cl: list             # per map tile C_L in percent
    expected_writebacks: int
    wide_wbuf: bool = False
    wt_variants: list | None = None   # misaligned COOP: [(kc0,kc1,row_bytes,off)]
    kernel_img_bytes: int = 0         # per slot, per batch (or per group/INDP)
    fc_chunks: list | None = None     # INDP FC: [elems per chunk]
    regions: dict = field(default_factory=dict)
    allowed_units: tuple = (0, 1, 2, 3)
    pad_vectors: int = 0              # dummy vector instructions per tile


@dataclass
class ExecutionPlan:
    graph: object
    cfg: HardwareConfig
    layers: list
    regions: dict             # name -> (addr, bytes)
    total_traffic: int
    total_est_cycles: int

    def layer(self, layer_id) -> LayerPlan:
        for lp in self.layers:
            if lp.layer_id == layer_id:
                return lp
        raise KeyError(layer_id)


# ------------------------------------------------------ small helpers

def _row_bytes(layer, cfg) -> int:
    return layer.in_w * layer.in_ch * cfg.element_bytes


def _out_row_bytes(layer, cfg) -> int:
    _, oh, ow = layer.out_shape
    return ow * layer.out_ch * cfg.element_bytes


def _out_bytes(layer, cfg) -> int:
    oc, oh, ow = layer.out_shape
    return oc * oh * ow * cfg.element_bytes


def _in_span(layer, y0, y1):
    """Input row range feeding output rows [y0, y1), clipped to the input."""
    lo = max(0, y0 * layer.sy - layer.pad)
    hi = min(layer.in_h, (y1 - 1) * layer.sy - layer.pad + layer.kh)
    return lo, max(hi, lo)


def _is_pool_rows(layer) -> bool:
    # MaxPool distributes output rows over CUs (weights-broadcast style);
    # everything else broadcasts maps and splits kernels over vMACs
    return layer.kind == "MaxPool"


def _aligned(layer, cfg) -> bool:
    return layer.in_ch % cfg.lanes == 0


def pad32(n: int) -> int:
    return (n + 31) & ~31


# ------------------------------------------------------ kernel images

def coop_image_bytes(layer, cfg) -> int:
    """Per-kernel WBuf image size in COOP mode."""
    if _aligned(layer, cfg):
        return layer.kh * layer.kw * layer.in_ch * cfg.element_bytes
    return sum(layer.kh * rb for _, _, rb, _ in coop_variants(layer, cfg))


def coop_variants(layer, cfg):
    """Distinct horizontal clip shapes for the misaligned-channel case.

    Each variant gets its own zero-tail-padded weight image so a trace of
    whole 32-byte vectors multiplies the over-read maps elements by zero.
    Returns [(kc0, kc1, padded_row_bytes, image_offset)].
    """
    seen = {}
    order = []
    _, _, ow = layer.out_shape
    for x in range(ow):
        c0 = max(0, layer.pad - x * layer.sx)
        c1 = layer.kw - max(0, x * layer.sx + layer.kw - layer.pad - layer.in_w)
        if (c0, c1) not in seen:
            seen[(c0, c1)] = True
            order.append((c0, c1))
    out = []
    off = 0
    for c0, c1 in order:
        rb = pad32((c1 - c0) * layer.in_ch * cfg.element_bytes)
        out.append((c0, c1, rb, off))
        off += layer.kh * rb
    return out


def indp_image_bytes(layer, cfg) -> int:
    """Per lane-group WBuf image size in INDP mode (position-major vectors)."""
    n = layer.kh * layer.kw * layer.in_ch
    if layer.kind == "FullyConnected":
        n = layer.in_ch
    return n * cfg.vector_bytes


# ------------------------------------------------------ mode choice

def _coop_feasible(layer, cfg) -> bool:
    if layer.kind == "FullyConnected":
        return False
    if layer.kh * layer.kw * layer.in_ch > cfg.acc_guard_products:
        return False
    row_vec = math.ceil(layer.kw * layer.in_ch / cfg.lanes)
    if row_vec > cfg.max_trace_vectors:
        return False
    return coop_image_bytes(layer, cfg) <= cfg.wbuf_bytes * cfg.wbuf_banks


def _indp_feasible(layer, cfg) -> bool:
    if layer.kind == "FullyConnected":
        return layer.in_ch <= cfg.acc_guard_products
    if layer.kh * layer.kw * layer.in_ch > cfg.acc_guard_products:
        return False
    if layer.kw * layer.in_ch > cfg.max_trace_vectors:
        return False
    return indp_image_bytes(layer, cfg) <= cfg.wbuf_bytes


def choose_mode(layer, cfg: HardwareConfig) -> str:
    if layer.kind == "FullyConnected":
        return "INDP"
    if layer.kind in ("MaxPool", "AvgPool"):
        return "COOP"
    coop_ok = _coop_feasible(layer, cfg)
    indp_ok = _indp_feasible(layer, cfg)
    if (indp_ok and layer.out_ch >= cfg.lanes
            and layer.in_ch * layer.kh * layer.kw < cfg.lanes):
        return "INDP"
    if coop_ok and indp_ok:
        ck = _quick_cycles(layer, cfg, "COOP")
        ik = _quick_cycles(layer, cfg, "INDP")
        return "COOP" if ck < ik else "INDP"
    if coop_ok:
        return "COOP"
    if indp_ok:
        return "INDP"
    raise PlanError(f"layer {layer.id}: kernel {layer.kh}x{layer.kw}x"
                    f"{layer.in_ch} fits neither compute mode")


def _quick_cycles(layer, cfg, mode) -> int:
    tiles = tile_maps(layer, cfg, mode)
    kts = tile_kernels(layer, cfg, mode)
    wins = [build_windows(layer, t, mode, cfg) for t in tiles]
    return estimate_cycles(layer, tiles, kts, wins, "Kloop", mode, cfg)


# ------------------------------------------------------ tiling

def _bias_blocks(layer, cfg) -> int:
    if layer.kind == "MaxPool":
        return 0
    if layer.kind == "AvgPool":
        return math.ceil(layer.out_ch / cfg.lanes)
    # one block per 16 kernels in COOP, 16 blocks per 256 in INDP: same count
    return math.ceil(layer.out_ch / cfg.lanes)


def _ceil_block(n, cfg) -> int:
    b = cfg.vector_bytes
    return -(-n // b) * b


def _vband_edges(layer, oh):
    """Output rows where the vertical clip shape changes."""
    edges = set()
    prev = None
    for y in range(oh):
        kr0 = max(0, layer.pad - y * layer.sy)
        kr1 = layer.kh - max(0, y * layer.sy + layer.kh - layer.pad - layer.in_h)
        if (kr0, kr1) != prev:
            edges.add(y)
            prev = (kr0, kr1)
    return edges


def tile_maps(layer, cfg: HardwareConfig, mode: str) -> list:
    """Cover the output rows with tiles that each fit one MBuf bank.

    Consecutive tiles alternate banks so the next tile can stream while the
    current one computes.  Every used bank ends with a copy of the bias
    table, and bypass rows for a tile sit just below that, so maps, bypass
    and bias must fit a bank together.  Tiles additionally split where the
    vertical clip shape changes, so each tile's instruction block has a
    single row structure.
    """
    _, oh, ow = layer.out_shape
    rb = _row_bytes(layer, cfg)
    budget = cfg.mbuf_bytes_per_bank - cfg.vector_bytes * 2  # trace slack
    if _is_pool_rows(layer):
        return _tile_pool_rows(layer, cfg, oh, rb, budget)
    edges = _vband_edges(layer, oh)
    orb = _out_row_bytes(layer, cfg)
    bias_tail = _bias_blocks(layer, cfg) * cfg.vector_bytes
    if bias_tail >= budget:
        raise PlanError(f"layer {layer.id}: bias table exceeds the bank")
    tiles = []
    y = 0
    while y < oh:
        rows = 0
        for cand in range(1, oh - y + 1):
            if cand > 1 and (y + cand - 1) in edges:
                break
            lo, hi = _in_span(layer, y, y + cand)
            need = (hi - lo) * rb + bias_tail
            if layer.bypass_source is not None:
                need += _ceil_block(cand * orb, cfg)
            if need > budget:
                break
            rows = cand
        if rows == 0:
            raise PlanError(f"layer {layer.id}: one output row's input span "
                            f"exceeds the maps bank")
        lo, hi = _in_span(layer, y, y + rows)
        byp = rows * orb if layer.bypass_source is not None else 0
        tiles.append(MapTile(layer.id, (y, y + rows), (lo, hi), layer.in_ch,
                             (hi - lo) * rb, bypass_bytes=byp,
                             mbuf_bank=len(tiles) % 2,
                             bypass_off=(cfg.mbuf_bytes_per_bank - bias_tail
                                         - _ceil_block(byp, cfg))))
        y += rows
    return tiles


def _tile_pool_rows(layer, cfg, oh, rb, budget):
    """MaxPool: output rows spread over CUs, grouped by vertical clip shape."""
    shapes = []
    for y in range(oh):
        kr0 = max(0, layer.pad - y * layer.sy)
        kr1 = layer.kh - max(0, y * layer.sy + layer.kh - layer.pad - layer.in_h)
        if shapes and shapes[-1][0] == (kr0, kr1):
            shapes[-1][1].append(y)
        else:
            shapes.append(((kr0, kr1), [y]))
    tiles = []
    for (kr0, kr1), ys in shapes:
        strip = (kr1 - kr0) * rb
        if strip > budget:
            raise PlanError(f"layer {layer.id}: pool strip exceeds maps bank")
        for i in range(0, len(ys), cfg.num_cus):
            group = ys[i:i + cfg.num_cus]
            y0, y1 = group[0], group[-1] + 1
            lo, _ = _in_span(layer, y0, y0 + 1)
            _, hi = _in_span(layer, y1 - 1, y1)
            tiles.append(MapTile(layer.id, (y0, y1), (lo, hi), layer.in_ch,
                                 strip * len(group), assigned_cus=len(group),
                                 mbuf_bank=len(tiles) % 2))
    return tiles


def tile_kernels(layer, cfg: HardwareConfig, mode: str) -> list:
    if layer.kind == "MaxPool":
        return []
    bpk = layer.kh * layer.kw * layer.in_ch * cfg.element_bytes
    if layer.kind == "FullyConnected":
        bpk = layer.in_ch * cfg.element_bytes
    if layer.kind == "AvgPool":
        groups = math.ceil(layer.out_ch / cfg.lanes)
        img = layer.kh * layer.kw * cfg.vector_bytes
        return [KernelTile(layer.id, (0, cfg.lanes), repeat=groups,
                           bytes_per_kernel=layer.kh * layer.kw * 2,
                           load_bytes=cfg.vmac_slots * img)]
    if mode == "COOP":
        per, img = cfg.vmac_slots, coop_image_bytes(layer, cfg)
        load = cfg.vmac_slots * img
    else:
        per = cfg.vmac_slots * cfg.lanes
        img = indp_image_bytes(layer, cfg)
        load = cfg.vmac_slots * img
    tiles = []
    for k in range(0, layer.out_ch, per):
        k1 = min(layer.out_ch, k + per)
        tiles.append(KernelTile(layer.id, (k, k1), repeat=1,
                                bytes_per_kernel=bpk, load_bytes=load))
    return tiles


# ------------------------------------------------------ windows

def _bands(n, clip_of):
    """Merge consecutive output indices with identical clip shapes."""
    bands = []
    for i in range(n):
        c = clip_of(i)
        if bands and bands[-1][0] == c:
            bands[-1][2] = i + 1
        else:
            bands.append([c, i, i + 1])
    return bands


def build_windows(layer, tile: MapTile, mode: str, cfg) -> list:
    """Window zones for one map tile: interior merged, borders separate."""
    if layer.kind == "FullyConnected":
        return [WindowOp(0, 0, 1, 1, 0, 1, 0, 1,
                         bypass=layer.bypass_source is not None)]
    _, oh, ow = layer.out_shape
    y0, y1 = tile.out_rows

    def vclip(i):
        y = y0 + i
        kr0 = max(0, layer.pad - y * layer.sy)
        kr1 = layer.kh - max(0, y * layer.sy + layer.kh - layer.pad - layer.in_h)
        return kr0, kr1

    def hclip(x):
        kc0 = max(0, layer.pad - x * layer.sx)
        kc1 = layer.kw - max(0, x * layer.sx + layer.kw - layer.pad - layer.in_w)
        return kc0, kc1

    byp = layer.bypass_source is not None
    ops = []
    for (kr0, kr1), r0, r1 in _bands(y1 - y0, vclip):
        for (kc0, kc1), c0, c1 in _bands(ow, hclip):
            ops.append(WindowOp(r0, c0, r1 - r0, c1 - c0,
                                kr0, kr1, kc0, kc1, bypass=byp))
    return ops


def zone_traces(layer, op: WindowOp, mode: str, cfg) -> list:
    """Per-instruction trace lengths for one window of this zone.

    COOP counts 32-byte vectors, INDP counts elements; pools emit one
    trace-1 instruction per window pixel.
    """
    if layer.kind == "FullyConnected":
        chunks = fc_chunk_list(layer, cfg)
        return chunks
    if layer.kind in ("MaxPool", "AvgPool"):
        return [1] * (op.rows * op.cols)
    elems = op.cols * layer.in_ch
    if mode == "COOP":
        return [math.ceil(elems / cfg.lanes)] * op.rows
    return [elems] * op.rows


def fc_chunk_list(layer, cfg) -> list:
    per = cfg.wbuf_bytes // cfg.vector_bytes   # vectors per WBuf bank
    out = []
    left = layer.in_ch
    while left > 0:
        out.append(min(per, left))
        left -= per
    return out


# ------------------------------------------------------ traffic model

def _bias_bytes(layer, cfg) -> int:
    return _bias_blocks(layer, cfg) * cfg.vector_bytes


def estimate_traffic(layer, map_tiles, kernel_tiles, order: str, cfg) -> int:
    """Total main-memory bytes moved for one loop order.

    Kloop keeps each map tile resident and re-streams every kernel tile per
    map tile; Mloop is the converse.  Output bytes stream out exactly once
    either way.  Bias tables ride in a reserved tail of each ping-pong bank
    and survive map reloads, so they count once per bank used.
    """
    maps = sum(t.bytes + t.bypass_bytes for t in map_tiles)
    kern = sum(t.load_bytes for t in kernel_tiles)
    bias = _bias_bytes(layer, cfg) * min(len(map_tiles), 2)
    out = _out_bytes(layer, cfg)
    if order == "Kloop":
        return maps + bias + len(map_tiles) * kern + out
    return kern + bias + len(kernel_tiles) * maps + out


def choose_loop_order(layer, map_tiles, kernel_tiles, cfg):
    k = estimate_traffic(layer, map_tiles, kernel_tiles, "Kloop", cfg)
    if not kernel_tiles:
        # nothing to re-stream, the orders coincide
        return "Kloop", k, k
    m = estimate_traffic(layer, map_tiles, kernel_tiles, "Mloop", cfg)
    return ("Mloop" if m < k else "Kloop"), k, m


# ------------------------------------------------------ load balancing

def imbalance(loads) -> float:
    """C_L = (L_max / mean - 1) * 100, over all units including idle ones."""
    loads = list(loads)
    mean = sum(loads) / len(loads)
    if mean == 0:
        return 0.0
    return (max(loads) / mean - 1.0) * 100.0


def split_maps_descriptor(d: LoadDescriptor, pieces: int) -> list:
    """Break one maps stream into 32-byte-aligned pieces for parallel units."""
    if pieces <= 1 or d.length <= 32:
        return [d]
    blocks = d.length // 32
    tail = d.length - blocks * 32
    per = blocks // pieces
    if per == 0:
        return [d]
    out = []
    off = 0
    for i in range(pieces):
        n = per * 32
        if i == pieces - 1:
            n = d.length - off
        out.append(LoadDescriptor(d.dest, d.mem_addr + off, n,
                                  d.buf_block + off // 32, None, d.tag))
        off += n
    assert off == d.length and tail < 32
    return out


def balance_loads(descriptors, cfg, allowed_units=(0, 1, 2, 3)) -> list:
    """Split broadcast maps streams, then greedy LPT onto allowed units."""
    units = list(allowed_units)
    expanded = []
    for d in descriptors:
        if d.tag == "maps" and d.dest in (24, 25):
            expanded.extend(split_maps_descriptor(d, len(units)))
        else:
            expanded.append(d)
    totals = {u: 0 for u in units}
    for d in sorted(expanded, key=lambda d: -d.length):
        u = min(totals, key=lambda k: (totals[k], k))
        d.unit = u
        totals[u] += d.length
    return expanded


# ------------------------------------------------------ cycle model

def _vmovs_per_pass(layer, mode, cfg) -> int:
    if layer.kind == "MaxPool":
        return 0
    if mode == "INDP":
        return cfg.vmac_slots
    return 1


def _k_passes(layer, kernel_tiles, cfg) -> int:
    if layer.kind == "MaxPool":
        return math.ceil(layer.in_ch / cfg.lanes)
    return sum(t.repeat for t in kernel_tiles)


def estimate_cycles(layer, map_tiles, kernel_tiles, windows, order, mode,
                    cfg) -> int:
    """Overlap model: streams hide under compute except the first tile.

    Map tiles double-buffer across the MBuf banks, so steady-state cycles
    are max(total compute, total stream time); the first tile's stream is
    exposed before any compute can start.
    """
    bpc = cfg.bytes_per_cycle
    kern = sum(t.load_bytes for t in kernel_tiles)
    bias = _bias_bytes(layer, cfg)
    passes = _k_passes(layer, kernel_tiles, cfg)
    vm = _vmovs_per_pass(layer, mode, cfg)
    n_mt = len(map_tiles)
    total_compute = 0
    total_load = 0
    for ti, (tile, ops) in enumerate(zip(map_tiles, windows)):
        vec = 0
        positions = 0
        for op in ops:
            per = sum(zone_traces(layer, op, mode, cfg))
            if layer.kind == "MaxPool":
                # tile rows execute in parallel, one per CU
                reps = op.repeat_x
            else:
                reps = op.repeat_y * op.repeat_x
            vec += per * reps
            positions += reps
        compute = vec * passes + vm * passes
        if layer.bypass_source is not None:
            compute += positions * passes * (cfg.vmac_slots
                                             if mode == "INDP" else 1)
        total_compute += compute
        total_load += tile.bytes + tile.bypass_bytes \
            + (kern if order == "Kloop" else kern / n_mt) \
            + (bias if ti < 2 else 0)
    if bpc <= 0:
        return 10 ** 12
    lead = map_tiles[0].bytes + map_tiles[0].bypass_bytes + bias
    return max(total_compute, math.ceil(total_load / bpc)) \
        + math.ceil(lead / bpc)


# ------------------------------------------------------ memory layout

ALIGN = 64


def _align(a):
    return (a + ALIGN - 1) & ~(ALIGN - 1)


PROGRAM_REGION_BYTES = 256 * 2048   # generous reservation, checked by codegen


def plan_model(graph, cfg: HardwareConfig) -> ExecutionPlan:
    """Plan every layer and lay out main memory."""
    regions = {"program": (cfg.program_base, PROGRAM_REGION_BYTES)}
    cursor = _align(cfg.program_base + PROGRAM_REGION_BYTES)
    c, h, w = graph.input_shape
    regions["input"] = (cursor, c * h * w * cfg.element_bytes)
    cursor = _align(cursor + regions["input"][1])
    for layer in graph.layers:
        regions[f"L{layer.id}:out"] = (cursor, _out_bytes(layer, cfg))
        cursor = _align(cursor + _out_bytes(layer, cfg))
    plans = []
    for layer in graph.layers:
        lp = _plan_layer(graph, layer, cfg, regions, cursor)
        cursor = lp.regions["_cursor"]
        del lp.regions["_cursor"]
        plans.append(lp)
    if cursor > cfg.mem_bytes:
        raise PlanError(f"memory layout needs {cursor} bytes, have "
                        f"{cfg.mem_bytes}")
    total_traffic = sum(min(p.traffic_kloop, p.traffic_mloop) for p in plans)
    total_cycles = sum(p.est_cycles for p in plans)
    return ExecutionPlan(graph, cfg, plans, regions, total_traffic,
                         total_cycles)


def _plan_layer(graph, layer, cfg, regions, cursor) -> LayerPlan:
    mode = choose_mode(layer, cfg)
    map_tiles = tile_maps(layer, cfg, mode)
    kernel_tiles = tile_kernels(layer, cfg, mode)
    windows = [build_windows(layer, t, mode, cfg) for t in map_tiles]
    order, tk, tm = choose_loop_order(layer, map_tiles, kernel_tiles, cfg)
    est = estimate_cycles(layer, map_tiles, kernel_tiles, windows, order,
                          mode, cfg)
    traffic = min(tk, tm)
    bw = traffic / (est / cfg.clock_hz) if est else 0.0
    lp = LayerPlan(
        layer_id=layer.id, kind=layer.kind, mode=mode, loop_order=order,
        map_tiles=map_tiles, kernel_tiles=kernel_tiles, windows=windows,
        traffic_kloop=tk, traffic_mloop=tm, est_cycles=est,
        bandwidth_est=bw, bw_exceeded=bw > cfg.mem_bandwidth_bytes_per_s,
        tile_cl=[], expected_writebacks=_expected_writebacks(
            layer, map_tiles, kernel_tiles, windows, mode, cfg))
    if layer.kind in ("Conv", "FullyConnected", "AvgPool"):
        if mode == "COOP" and layer.kind != "AvgPool":
            lp.kernel_img_bytes = coop_image_bytes(layer, cfg)
            lp.wide_wbuf = lp.kernel_img_bytes > cfg.wbuf_bytes
            if not _aligned(layer, cfg):
                lp.wt_variants = coop_variants(layer, cfg)
        elif layer.kind == "AvgPool":
            lp.kernel_img_bytes = layer.kh * layer.kw * cfg.vector_bytes
        else:
            lp.kernel_img_bytes = indp_image_bytes(layer, cfg)
            if layer.kind == "FullyConnected":
                lp.fc_chunks = fc_chunk_list(layer, cfg)
    # weight blob + bias table regions
    if layer.kind != "MaxPool":
        blob = sum(t.load_bytes for t in kernel_tiles)
        lp.regions["weights"] = (cursor, blob)
        cursor = _align(cursor + blob)
        bias = _bias_bytes(layer, cfg)
        lp.regions["bias"] = (cursor, bias)
        cursor = _align(cursor + bias)
    lp.regions["out"] = regions[f"L{layer.id}:out"]
    prod = graph.producer_of(layer)
    lp.regions["in"] = regions["input"] if prod is None else \
        regions[f"L{prod.id}:out"]
    if layer.bypass_source is not None:
        lp.regions["bypass"] = regions[f"L{layer.bypass_source}:out"]
    lp.regions["_cursor"] = cursor
    _attach_tile_loads(graph, layer, lp, cfg)
    return lp


def _expected_writebacks(layer, map_tiles, kernel_tiles, windows, mode, cfg):
    if layer.kind == "MaxPool":
        # one writeback event per x position per channel group per tile;
        # each event covers the tile's CU rows at once
        groups = math.ceil(layer.in_ch / cfg.lanes)
        _, _, ow = layer.out_shape
        return len(map_tiles) * ow * groups
    total = 0
    passes = _k_passes(layer, kernel_tiles, cfg)
    for ops in windows:
        total += sum(op.repeat_y * op.repeat_x for op in ops) * passes
    return total


def _attach_tile_loads(graph, layer, lp: LayerPlan, cfg):
    """Build per-map-tile load descriptors and balance them across units.

    Each tile streams into its own bank; bypass rows land just below the
    bias tail of the same bank.  The first two tiles also carry the bias
    table, seeding both banks once.
    """
    in_base, _ = lp.regions["in"]
    rb = _row_bytes(layer, cfg)
    for i, tile in enumerate(lp.map_tiles):
        b = tile.mbuf_bank
        descs = []
        if _is_pool_rows(layer):
            y0, y1 = tile.out_rows
            for c, y in enumerate(range(y0, y1)):
                lo, hi = _in_span(layer, y, y + 1)
                descs.append(LoadDescriptor(
                    isa.ld_mbuf(c, b), in_base + lo * rb, (hi - lo) * rb, 0,
                    tag="maps"))
        else:
            lo, hi = tile.in_rows
            descs.append(LoadDescriptor(
                isa.ld_mbuf_bcast(b), in_base + lo * rb, (hi - lo) * rb, 0,
                tag="maps"))
        if tile.bypass_bytes:
            bb, _ = lp.regions["bypass"]
            orb = _out_row_bytes(layer, cfg)
            y0, y1 = tile.out_rows
            descs.append(LoadDescriptor(
                isa.ld_mbuf_bcast(b), bb + y0 * orb, (y1 - y0) * orb,
                tile.bypass_off // cfg.vector_bytes, tag="bypass"))
        if i < 2 and layer.kind != "MaxPool":
            ba, bn = lp.regions["bias"]
            if bn:
                tail_block = (cfg.mbuf_bytes_per_bank - bn) \
                    // cfg.vector_bytes
                descs.append(LoadDescriptor(isa.ld_mbuf_bcast(b), ba, bn,
                                            tail_block, tag="bias"))
        tile.loads = balance_loads(descs, cfg, lp.allowed_units)
        per_unit = {u: 0 for u in range(cfg.load_units)}
        for d in tile.loads:
            per_unit[d.unit] += d.length
        for kt in lp.kernel_tiles:
            for j in range(cfg.vmac_slots):
                u = lp.allowed_units[j % len(lp.allowed_units)]
                per_unit[u] += kt.load_bytes // cfg.vmac_slots
        lp.tile_cl.append(imbalance(per_unit.values()))


# ------------------------------------------------------ memory image

def kernel_blob(layer, lp: LayerPlan, weights: dict, cfg) -> np.ndarray:
    """Synthesize the streamed weight-image blob for one layer."""
    if layer.kind == "MaxPool":
        return np.zeros(0, dtype=np.int16)
    if layer.kind == "AvgPool":
        q = q88_quantize(1.0 / (layer.kh * layer.kw))
        img = np.zeros((cfg.vmac_slots, layer.kh * layer.kw, cfg.lanes),
                       dtype=np.int16)
        for s in range(cfg.vmac_slots):
            img[s, :, s] = q
        return img.ravel()
    w = np.asarray(weights[layer.weights_ref], dtype=np.int16)
    if layer.kind == "FullyConnected":
        w = w.reshape(layer.out_ch, layer.in_ch, 1, 1)
    else:
        w = w.reshape(layer.out_ch, layer.in_ch, layer.kh, layer.kw)
    parts = []
    if lp.mode == "COOP":
        per = cfg.vmac_slots
        padded = math.ceil(layer.out_ch / per) * per
        wz = np.zeros((padded,) + w.shape[1:], dtype=np.int16)
        wz[:layer.out_ch] = w
        for k in range(padded):
            if lp.wt_variants is None:
                # row-major, each row pixel-major with channels contiguous
                parts.append(np.transpose(wz[k], (1, 2, 0)).ravel())
            else:
                for kc0, kc1, rbytes, _ in lp.wt_variants:
                    rows = np.transpose(wz[k, :, :, kc0:kc1], (1, 2, 0))
                    buf = np.zeros((layer.kh, rbytes // 2), dtype=np.int16)
                    flat = rows.reshape(layer.kh, -1)
                    buf[:, :flat.shape[1]] = flat
                    parts.append(buf.ravel())
    else:
        group = cfg.lanes
        per = cfg.vmac_slots * group
        padded = math.ceil(layer.out_ch / per) * per
        wz = np.zeros((padded,) + w.shape[1:], dtype=np.int16)
        wz[:layer.out_ch] = w
        for k0 in range(0, padded, group):
            # position-major vectors: lane l holds kernel k0+l's weight
            parts.append(np.transpose(wz[k0:k0 + group], (2, 3, 1, 0)).ravel())
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int16)


def bias_table(layer, lp: LayerPlan, weights: dict, cfg) -> np.ndarray:
    blocks = _bias_blocks(layer, cfg)
    if blocks == 0:
        return np.zeros(0, dtype=np.int16)
    table = np.zeros((blocks, cfg.lanes), dtype=np.int16)
    if layer.kind == "AvgPool":
        return table.ravel()
    b = np.asarray(weights[layer.bias_ref], dtype=np.int16)
    flat = table.ravel()
    flat[:b.size] = b
    return flat


def build_memory(plan: ExecutionPlan, weights: dict,
                 input_tensor=None) -> np.ndarray:
    """Materialize the flat main-memory byte image for simulation."""
    cfg = plan.cfg
    mem = np.zeros(cfg.mem_bytes, dtype=np.uint8)

    def put(addr, arr):
        raw = arr.astype("<i2").tobytes()
        mem[addr:addr + len(raw)] = np.frombuffer(raw, dtype=np.uint8)

    for lp in plan.layers:
        layer = plan.graph.by_id(lp.layer_id)
        if "weights" in lp.regions:
            addr, size = lp.regions["weights"]
            blob = kernel_blob(layer, lp, weights, cfg)
            assert blob.size * 2 == size, (lp.layer_id, blob.size * 2, size)
            put(addr, blob)
            baddr, bsize = lp.regions["bias"]
            table = bias_table(layer, lp, weights, cfg)
            assert table.size * 2 == bsize
            put(baddr, table)
    if input_tensor is not None:
        addr, size = plan.regions["input"]
        raw = input_tensor.tobytes()
        assert len(raw) == size
        mem[addr:addr + size] = np.frombuffer(raw, dtype=np.uint8)
    return mem
