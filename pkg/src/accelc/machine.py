"""Cycle-approximate machine model for compiled programs.

Values and timing are tracked separately.  Every architectural effect
(register writes, buffer fills, accumulation, stores) is applied the
moment an instruction issues, in program order, so results are exact.
Cycle times are computed on the side: each instruction gets an issue
time from the scalar pipeline model, vector work is scheduled per
compute unit behind that, and load streams are scheduled per load unit
at a fixed share of memory bandwidth.  The model is approximate where
the pipeline is (issue-order effects, queue granularity) and exact
where the data is.

Timing rules:

  * one instruction issues per cycle, in order; a read of a register
    written by an earlier instruction waits until writer issue + 2
    (+1 with forwarding enabled), including the address registers a
    writeback implicitly reads
  * vector instructions are broadcast to the compute units named by the
    active-count register; each unit starts after its previous vector
    op and after the buffer ranges it reads have finished streaming,
    and runs for the trace length in cycles (1 for vmov)
  * a per-unit trace queue (depth from config) backpressures issue when
    full; load units have the same via their stream FIFOs
  * a load stream starts dma_latency_cycles after issue, serialized
    behind its unit's previous stream and behind pending stores to the
    same memory pages, then moves at bandwidth / load_units bytes per
    second ("per_unit_cap"; "equal_active" splits the total across the
    units busy when the stream starts)
  * instruction fetch from a cache slot waits for the stream that
    filled it

The loaded-too-soon hazard is also enforced dynamically: a load into an
MBuf bank that has been read, but by fewer than vmac_slots vector
instructions since its previous load, raises CoherenceFault, mirroring
the window the compiler pads for.  Consecutive loads into an unread
bank are one stream and need no window between them.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import isa

# registers with architectural meaning to the vector units
R_OUT = 3        # writeback base address
R_CUSTRIDE = 4   # writeback per-unit stride
R_ACT = 26       # active compute unit count
R_RELU = 27      # nonzero: clamp negative outputs to zero
R_CUT = 30       # number of leading slots / lanes written back

WB_READS = (R_OUT, R_CUSTRIDE, R_ACT, R_RELU, R_CUT)

PAGE_SHIFT = 12  # store/load ordering granularity

Q16_MIN = -32768
Q16_MAX = 32767


class MachineFault(RuntimeError):
    """The program did something the hardware would reject."""


class CoherenceFault(MachineFault):
    """A load overwrote buffer contents still inside the consume window."""


class BudgetError(MachineFault):
    """A configured budget (cycles, steps, bandwidth) was exceeded."""


def _s32(x):
    return ((x + 0x80000000) & 0xFFFFFFFF) - 0x80000000


@dataclass
class Metrics:
    """Counters accumulated over one program run."""

    total_cycles: int = 0
    instructions: int = 0
    opcounts: dict = field(default_factory=dict)
    writebacks: int = 0
    decode_raw_stalls: int = 0
    fetch_stalls: int = 0
    trace_queue_stalls: int = 0
    ld_queue_stalls: int = 0
    cu_data_stalls: int = 0
    cu_starvation_stalls: int = 0
    bytes_loaded: list = field(default_factory=list)
    icache_bytes: int = 0
    bytes_stored: int = 0
    acc_overflows: int = 0
    layer_ends: list = field(default_factory=list)

    @property
    def total_bytes_loaded(self) -> int:
        return int(sum(self.bytes_loaded))

    def to_dict(self) -> dict:
        d = {
            "total_cycles": int(self.total_cycles),
            "instructions": int(self.instructions),
            "opcounts": {k: int(v) for k, v in sorted(self.opcounts.items())},
            "writebacks": int(self.writebacks),
            "decode_raw_stalls": int(self.decode_raw_stalls),
            "fetch_stalls": int(self.fetch_stalls),
            "trace_queue_stalls": int(self.trace_queue_stalls),
            "ld_queue_stalls": int(self.ld_queue_stalls),
            "cu_data_stalls": int(self.cu_data_stalls),
            "cu_starvation_stalls": int(self.cu_starvation_stalls),
            "bytes_loaded": [int(b) for b in self.bytes_loaded],
            "total_bytes_loaded": self.total_bytes_loaded,
            "icache_bytes": int(self.icache_bytes),
            "bytes_stored": int(self.bytes_stored),
            "acc_overflows": int(self.acc_overflows),
            "layer_ends": [float(t) for t in self.layer_ends],
        }
        return d


class Machine:
    """One-shot interpreter: construct with a memory image, call run().

    The image is copied; results (stores) land in self.mem.  Programs
    start at icache slot 0, preloaded free of charge from program_base.
    """

    def __init__(self, cfg, mem_image, program_base=None):
        self.cfg = cfg
        self.base = cfg.program_base if program_base is None else program_base
        self.mem = np.zeros(cfg.mem_bytes, dtype=np.uint8)
        img = np.asarray(mem_image, dtype=np.uint8)
        if img.nbytes > cfg.mem_bytes:
            raise MachineFault(f"image {img.nbytes} bytes exceeds memory "
                               f"{cfg.mem_bytes}")
        self.mem[:img.size] = img

        nc, nv = cfg.num_cus, cfg.vmacs_per_cu
        self.mbuf_size = cfg.mbuf_bytes_per_bank * cfg.mbuf_banks
        self.wbuf_size = cfg.wbuf_bytes * cfg.wbuf_banks
        self.mbuf = [np.zeros(self.mbuf_size, np.uint8) for _ in range(nc)]
        self.wbuf = [[np.zeros(self.wbuf_size, np.uint8) for _ in range(nv)]
                     for _ in range(nc)]
        self.gacc = np.zeros((nc, nv), np.int64)
        self.acc = np.zeros((nc, nv, cfg.lanes), np.int64)
        self.bias_coop = np.zeros((nc, nv), np.int64)
        self.bias_indp = np.zeros((nc, nv, cfg.lanes), np.int64)
        self.retained = np.full((nc, cfg.lanes), Q16_MIN, np.int16)

        self.regs = [0] * 32
        self.metrics = Metrics(bytes_loaded=[0] * cfg.load_units)
        self._ran = False

        words = cfg.icache_words_per_bank
        self.islot = [self._decode_words(self.mem[self.base:
                                                  self.base + words * 4])]
        self.islot += [[None] * words for _ in range(cfg.icache_banks - 1)]
        self.slot_ready = [0.0] * cfg.icache_banks

    @staticmethod
    def _decode_words(blob):
        out = []
        for w in np.frombuffer(blob.tobytes(), dtype="<u4"):
            w = int(w)
            if w == 0:
                out.append(None)
            else:
                try:
                    out.append(isa.decode(w))
                except isa.DecodeError:
                    out.append(w)
        return out

    # ------------------------------------------------------------ run

    def run(self, expected_writebacks=None, step_budget=400_000_000,
            layer_marks=(), trace_out=None):
        """Execute until the writeback target is met, a zero word is
        fetched (clean halt only when no target was given), or a budget
        trips.  Returns the Metrics; stores are visible in self.mem.

        layer_marks: ascending cumulative writeback counts.  When the
        running count crosses a mark, the finishing instruction's end
        time is appended to metrics.layer_ends, which splits one
        continuous run into per-layer cycle spans.

        trace_out: writable text stream; one line per issued
        instruction (issue cycle, pc, disassembly).  Large for real
        programs."""
        if self._ran:
            raise RuntimeError("machine instances run once")
        self._ran = True

        cfg = self.cfg
        met = self.metrics
        opcounts = met.opcounts
        regs = self.regs
        mem = self.mem
        nc = cfg.num_cus
        nv = cfg.vmacs_per_cu
        lanes = cfg.lanes
        mbuf_bank = cfg.mbuf_bytes_per_bank
        wbuf_bank = cfg.wbuf_bytes
        lat = 1 if cfg.forwarding else 2
        acc_limit = 1 << 31
        words_per_slot = cfg.icache_words_per_bank
        total_words = words_per_slot * cfg.icache_banks

        reg_ready = [0.0] * 32
        cu_end = [0.0] * nc
        cu_busy = [False] * nc
        tq = [deque() for _ in range(nc)]
        ldq = [deque() for _ in range(cfg.load_units)]
        unit_end = [0.0] * cfg.load_units
        page_end = {}
        mbuf_ready = {}
        wbuf_ready = {}
        coh = {}
        consumed = set()
        pend_count = 0
        pend_target = -1
        pc = 0
        last_issue = -1.0
        max_end = 0.0
        steps = 0
        marks = sorted(layer_marks)
        mark_idx = 0

        def store(addr, vals16, t_end):
            n = vals16.size * 2
            if addr < 0 or addr + n > mem.nbytes:
                raise MachineFault(f"store at {addr:#x}+{n} outside memory")
            mem[addr:addr + n] = vals16.astype("<i2").view(np.uint8)
            met.bytes_stored += n
            for pg in range(addr >> PAGE_SHIFT,
                            ((addr + n - 1) >> PAGE_SHIFT) + 1):
                if page_end.get(pg, 0.0) < t_end:
                    page_end[pg] = t_end

        def sat_store(vals, relu, addr, t_end):
            out = np.clip(vals >> 8, Q16_MIN, Q16_MAX)
            if relu:
                np.maximum(out, 0, out=out)
            store(addr, out, t_end)

        while True:
            if expected_writebacks is not None \
                    and met.writebacks >= expected_writebacks:
                break
            if not 0 <= pc < total_words:
                raise MachineFault(f"pc {pc} outside the instruction cache")
            slot = pc // words_per_slot
            ins = self.islot[slot][pc % words_per_slot]
            if ins is None:
                if expected_writebacks is None:
                    break
                raise BudgetError(
                    f"program ended after {met.writebacks} of "
                    f"{expected_writebacks} writebacks")
            if isinstance(ins, int):
                raise isa.DecodeError(f"invalid word {ins:#010x} at pc {pc}")

            steps += 1
            if steps > step_budget:
                raise BudgetError(f"step budget {step_budget} exceeded")

            cand = last_issue + 1.0
            if self.slot_ready[slot] > cand:
                met.fetch_stalls += self.slot_ready[slot] - cand
                cand = self.slot_ready[slot]

            op = ins.op
            vector = ins.is_vector
            wb = (op in ("mac", "max")) and ins.writeback

            # registers read at issue time
            if op in ("add", "mul", "ble", "bgt", "beq", "ld"):
                reads = (ins.rs1, ins.rs2)
            elif op in ("addi", "muli", "mov"):
                reads = (ins.rs1,)
            elif op == "movi":
                reads = ()
            elif op == "mac":
                reads = (ins.rs1, ins.rs2, R_ACT)
            elif op == "max":
                reads = (ins.rs1, R_ACT)
            else:  # vmov
                reads = (R_ACT,) if ins.vmov_target == "clear" \
                    else (ins.rs1, R_ACT)
            pre = cand
            for r in reads:
                if reg_ready[r] > cand:
                    cand = reg_ready[r]
            if wb:
                for r in WB_READS:
                    if reg_ready[r] > cand:
                        cand = reg_ready[r]
            if cand > pre:
                met.decode_raw_stalls += cand - pre

            if vector:
                active = min(max(regs[R_ACT], 0), nc)
                pre = cand
                for cu in range(active):
                    q = tq[cu]
                    while q and q[0] <= cand:
                        q.popleft()
                    if len(q) >= cfg.trace_queue_depth:
                        if q[0] > cand:
                            cand = q[0]
                        q.popleft()
                if cand > pre:
                    met.trace_queue_stalls += cand - pre
            elif op == "ld":
                q = ldq[ins.ld_unit]
                pre = cand
                while q and q[0] <= cand:
                    q.popleft()
                if len(q) >= cfg.ld_queue_depth:
                    if q[0] > cand:
                        cand = q[0]
                    q.popleft()
                if cand > pre:
                    met.ld_queue_stalls += cand - pre

            issue = cand
            last_issue = issue
            if trace_out is not None:
                trace_out.write(f"{issue:12.0f}  {pc:6d}  "
                                f"{isa.asm_print_one(ins)}\n")
            if issue > cfg.max_cycles:
                raise BudgetError(f"cycle budget {cfg.max_cycles} exceeded")
            met.instructions += 1
            key = op if op != "mac" else \
                ("mac_indp" if ins.indp else "mac_coop")
            opcounts[key] = opcounts.get(key, 0) + 1
            if issue + 2 > max_end:
                max_end = issue + 2

            if op == "movi":
                if ins.rd:
                    regs[ins.rd] = _s32(ins.imm)
                    reg_ready[ins.rd] = issue + lat
            elif op == "mov":
                if ins.rd:
                    regs[ins.rd] = _s32(regs[ins.rs1] << ins.shamt)
                    reg_ready[ins.rd] = issue + lat
            elif op in ("add", "addi", "mul", "muli"):
                a = regs[ins.rs1]
                b = regs[ins.rs2] if op in ("add", "mul") else ins.imm
                v = a + b if op in ("add", "addi") else a * b
                if ins.rd:
                    regs[ins.rd] = _s32(v)
                    reg_ready[ins.rd] = issue + lat
            elif op in ("ble", "bgt", "beq"):
                if pend_count > 0:
                    raise MachineFault(f"branch at pc {pc} inside another "
                                       "branch's delay slots")
                a, b = regs[ins.rs1], regs[ins.rs2]
                hit = (a <= b) if op == "ble" else \
                      (a > b) if op == "bgt" else (a == b)
                pend_count = 4
                pend_target = pc + ins.imm if hit else -1
            elif op == "ld":
                self._exec_ld(ins, issue, regs, ldq, unit_end, page_end,
                              mbuf_ready, wbuf_ready, coh, consumed, met)
                if unit_end[ins.ld_unit] > max_end:
                    max_end = unit_end[ins.ld_unit]
            else:
                # mac / max / vmov on every active compute unit
                active = min(max(regs[R_ACT], 0), nc)
                a1 = regs[ins.rs1]
                bank = 1 if a1 >= mbuf_bank else 0
                if op != "vmov" or ins.vmov_target != "clear":
                    for cu in range(active):
                        k = (cu, bank)
                        if k in coh:
                            coh[k] += 1
                            consumed.add(k)
                dur = 1 if op == "vmov" else ins.trace
                trace = ins.trace

                if op == "mac":
                    span1 = trace * (2 if ins.indp else 32)
                    span2 = trace * 32
                    if a1 < 0 or a1 + span1 > self.mbuf_size:
                        raise MachineFault(
                            f"mac maps read {a1}+{span1} outside MBuf")
                    a2 = regs[ins.rs2]
                    if a2 < 0 or a2 + span2 > self.wbuf_size:
                        raise MachineFault(
                            f"mac weights read {a2}+{span2} outside WBuf")
                elif op == "max":
                    span1 = trace * 32
                    if a1 < 0 or a1 + span1 > self.mbuf_size:
                        raise MachineFault(
                            f"max read {a1}+{span1} outside MBuf")
                elif ins.vmov_target != "clear":
                    span1 = 32
                    if a1 < 0 or a1 + span1 > self.mbuf_size:
                        raise MachineFault(
                            f"vmov read {a1}+{span1} outside MBuf")
                else:
                    span1 = 0

                relu = bool(regs[R_RELU])
                cut = regs[R_CUT]
                out_base = regs[R_OUT]
                stride = regs[R_CUSTRIDE]
                instr_end = issue + 1.0

                for cu in range(active):
                    head = issue + 1
                    if cu_end[cu] > head:
                        head = cu_end[cu]
                    elif cu_busy[cu]:
                        met.cu_starvation_stalls += head - cu_end[cu]
                    start = head
                    if span1:
                        for b in range(a1 // mbuf_bank,
                                       (a1 + span1 - 1) // mbuf_bank + 1):
                            t = mbuf_ready.get((cu, b), 0.0)
                            if t > start:
                                start = t
                    if op == "mac":
                        a2 = regs[ins.rs2]
                        for v in range(nv):
                            for b in range(a2 // wbuf_bank,
                                           (a2 + span2 - 1) // wbuf_bank
                                           + 1):
                                t = wbuf_ready.get((cu, v, b), 0.0)
                                if t > start:
                                    start = t
                    met.cu_data_stalls += start - head
                    end = start + dur
                    cu_end[cu] = end
                    cu_busy[cu] = True
                    tq[cu].append(end)
                    if end > max_end:
                        max_end = end
                    if end > instr_end:
                        instr_end = end

                    # data path for this unit
                    mb = self.mbuf[cu]
                    if op == "mac":
                        a2 = regs[ins.rs2]
                        if ins.indp:
                            m = mb[a1:a1 + trace * 2].view("<i2") \
                                .astype(np.int64)
                            for v in range(nv):
                                w = self.wbuf[cu][v][a2:a2 + trace * 32] \
                                    .view("<i2").reshape(trace, lanes) \
                                    .astype(np.int64)
                                self.acc[cu, v] += m @ w
                                if np.any(np.abs(self.acc[cu, v])
                                          >= acc_limit):
                                    met.acc_overflows += 1
                        else:
                            m = mb[a1:a1 + trace * 32].view("<i2") \
                                .reshape(trace, lanes).astype(np.int64)
                            for v in range(nv):
                                w = self.wbuf[cu][v][a2:a2 + trace * 32] \
                                    .view("<i2").reshape(trace, lanes) \
                                    .astype(np.int64)
                                self.gacc[cu, v] += int(np.sum(m * w))
                                if abs(int(self.gacc[cu, v])) >= acc_limit:
                                    met.acc_overflows += 1
                    elif op == "max":
                        m = mb[a1:a1 + trace * 32].view("<i2") \
                            .reshape(trace, lanes)
                        np.maximum(self.retained[cu], m.max(axis=0),
                                   out=self.retained[cu])
                    else:  # vmov
                        tgt = ins.vmov_target
                        if tgt == "clear":
                            self.retained[cu].fill(Q16_MIN)
                        elif ins.slot_mode:
                            s = ins.word_select
                            if s // nv == cu:
                                vals = mb[a1:a1 + 32].view("<i2") \
                                    .astype(np.int64)
                                v = s % nv
                                if tgt == "bias":
                                    self.acc[cu, v] = vals << 8
                                    self.bias_indp[cu, v] = vals
                                else:
                                    self.acc[cu, v] += vals << 8
                        else:
                            vals = mb[a1:a1 + 32].view("<i2") \
                                .astype(np.int64)
                            part = vals[cu * nv:(cu + 1) * nv]
                            if tgt == "bias":
                                self.gacc[cu] = part << 8
                                self.bias_coop[cu] = part
                            else:
                                self.gacc[cu] += part << 8

                    if wb:
                        base = out_base + cu * stride
                        if op == "max":
                            k = min(max(cut, 0), lanes)
                            if k:
                                vals = self.retained[cu, :k] \
                                    .astype(np.int64)
                                if relu:
                                    vals = np.maximum(vals, 0)
                                store(base, vals, end)
                            self.retained[cu].fill(Q16_MIN)
                        elif ins.indp:
                            for v in range(nv):
                                k = min(max(cut - (cu * nv + v) * lanes, 0),
                                        lanes)
                                if k:
                                    sat_store(self.acc[cu, v, :k], relu,
                                              base + v * lanes * 2, end)
                                self.acc[cu, v] = self.bias_indp[cu, v] << 8
                        else:
                            k = min(max(cut - cu * nv, 0), nv)
                            if k:
                                sat_store(self.gacc[cu, :k], relu, base,
                                          end)
                            self.gacc[cu] = self.bias_coop[cu] << 8

                # shared address registers advance once
                if op == "mac":
                    regs[ins.rs1] = _s32(a1 + trace * (2 if ins.indp
                                                       else 32))
                    regs[ins.rs2] = _s32(regs[ins.rs2] + trace * 32)
                    reg_ready[ins.rs1] = issue + lat
                    reg_ready[ins.rs2] = issue + lat
                elif op == "max":
                    regs[ins.rs1] = _s32(a1 + trace * 32)
                    reg_ready[ins.rs1] = issue + lat
                elif ins.vmov_target != "clear":
                    regs[ins.rs1] = _s32(a1 + 32)
                    reg_ready[ins.rs1] = issue + lat
                if wb:
                    met.writebacks += 1
                    while mark_idx < len(marks) \
                            and met.writebacks >= marks[mark_idx]:
                        met.layer_ends.append(instr_end)
                        mark_idx += 1

            # four words after a branch always execute before the jump
            pc = pc + 1
            if not ins.is_branch and pend_count > 0:
                pend_count -= 1
                if pend_count == 0 and pend_target >= 0:
                    pc = pend_target

        met.total_cycles = int(math.ceil(max_end))
        return met

    # ------------------------------------------------------------ loads

    def _exec_ld(self, ins, issue, regs, ldq, unit_end, page_end,
                 mbuf_ready, wbuf_ready, coh, consumed, met):
        cfg = self.cfg
        unit = ins.ld_unit
        addr = regs[ins.rs1]
        length = regs[ins.rs2]
        if length < 0:
            raise MachineFault(f"negative stream length {length}")
        if addr < 0 or addr + length > self.mem.nbytes:
            raise MachineFault(f"load {addr:#x}+{length} outside memory")
        if length and cfg.mem_bandwidth_bytes_per_s <= 0:
            raise BudgetError("memory bandwidth budget is zero")

        dest = ins.rd
        off = ins.ld_offset
        nc, nv = cfg.num_cus, cfg.vmacs_per_cu
        src = self.mem[addr:addr + length]

        if dest < nc * nv:
            cu, v = dest // nv, dest % nv
            if off + length > self.wbuf_size:
                raise MachineFault(f"wbuf fill {off}+{length} overflows")
            self.wbuf[cu][v][off:off + length] = src
            keys = ()
            wkeys = [(cu, v, b) for b in
                     range(off // cfg.wbuf_bytes,
                           (max(off + length - 1, off)) // cfg.wbuf_bytes
                           + 1)]
        elif dest < 16 + cfg.mbuf_banks * nc:
            cu, bank = (dest - 16) % nc, (dest - 16) // nc
            if off + length > cfg.mbuf_bytes_per_bank:
                raise MachineFault(f"mbuf fill {off}+{length} overflows "
                                   f"bank {bank}")
            base = bank * cfg.mbuf_bytes_per_bank
            self.mbuf[cu][base + off:base + off + length] = src
            keys = ((cu, bank),)
            wkeys = ()
        elif dest < 26:
            bank = dest - 24
            if off + length > cfg.mbuf_bytes_per_bank:
                raise MachineFault(f"mbuf fill {off}+{length} overflows "
                                   f"bank {bank}")
            base = bank * cfg.mbuf_bytes_per_bank
            for cu in range(nc):
                self.mbuf[cu][base + off:base + off + length] = src
            keys = tuple((cu, bank) for cu in range(nc))
            wkeys = ()
        elif dest == 26:
            if off % cfg.bank_bytes or off // cfg.bank_bytes \
                    >= cfg.icache_banks:
                raise MachineFault(f"icache fill at offset {off} not slot "
                                   "aligned")
            if length > cfg.bank_bytes:
                raise MachineFault(f"icache fill {length} exceeds a slot")
            slot = off // cfg.bank_bytes
            blob = np.zeros(cfg.bank_bytes, np.uint8)
            blob[:length] = src
            self.islot[slot] = self._decode_words(blob)
            keys = ()
            wkeys = ()
        else:
            raise MachineFault(f"load destination code {dest} undefined")

        for k in keys:
            since = coh.get(k)
            if since is not None and k in consumed \
                    and since < cfg.vmac_slots:
                cu, bank = k
                raise CoherenceFault(
                    f"load into cu {cu} bank {bank} after only {since} "
                    f"vector instructions")
            coh[k] = 0
            consumed.discard(k)

        start = issue + cfg.dma_latency_cycles
        if unit_end[unit] > start:
            start = unit_end[unit]
        if length:
            for pg in range(addr >> PAGE_SHIFT,
                            ((addr + length - 1) >> PAGE_SHIFT) + 1):
                t = page_end.get(pg, 0.0)
                if t > start:
                    start = t

        if length:
            if cfg.bw_mode == "equal_active":
                busy = 1 + sum(1 for u in range(cfg.load_units)
                               if u != unit and unit_end[u] > start)
                rate = cfg.bytes_per_cycle / busy
            else:
                rate = cfg.bytes_per_cycle / cfg.load_units
            end = start + length / rate
        else:
            end = start
        unit_end[unit] = end
        ldq[unit].append(end)

        if dest == 26:
            self.slot_ready[slot] = end
            met.icache_bytes += length
        else:
            met.bytes_loaded[unit] += length
            for k in keys:
                mbuf_ready[k] = end
            for k in wkeys:
                wbuf_ready[k] = end
