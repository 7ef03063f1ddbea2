"""Instruction emission: ExecutionPlan -> banked program.

The emitter keeps a symbolic value for every register it manages, so
positioning a cursor for the next window collapses to the cheapest
ADDI/ADD/MOVI sequence (goto).  Loop bodies are emitted once for their
first iteration; a second iteration is then re-simulated over the
emitted instructions (following inner branches) to prove the body's
per-iteration effect on every tracked register is uniform before the
backward branch is accepted, and tracking is fast-forwarded across the
remaining iterations.

Per layer the generator walks tile/batch visits in the planned loop
order.  Kloop keeps a map tile resident and runs every kernel batch
over it; Mloop keeps a kernel batch resident in WBuf and re-streams the
map tiles.  Kernel batches are emitted straight, never looped: a block
that would overflow a 512-word bank simply ends and the next block
continues in the next bank, which the instruction cache streams while
the current bank executes.  Stream loads for the next visit are issued
at the tail of the current one so they overlap compute.

Every emission unit (a batch, a preamble, a load group) is measured by
a ghost run before being placed.  The same measurement drives bank
packing and doubles as the block-length prediction, so prediction
versus emitted length is exact by construction.

Multi-bank programs chain through the instruction cache: each bank but
the last streams its successor into the idle cache slot and ends with
an unconditional branch into it (the four delay slots are explicit
NOPs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import isa
from .planner import zone_traces, PlanError

# register roles (static assignment)
R_MAPS = 1        # maps cursor (MBuf local byte address)
R_WT = 2          # weights cursor (WBuf local)
R_OUT = 3         # writeback address (main memory)
R_CUSTRIDE = 4    # per-CU writeback stride
R_BIAS = 5        # bias table cursor (MBuf bank 1 tail)
R_BYP = 6         # bypass cursor (MBuf bank 1)
R_X = 7           # column loop counter
R_Y = 8           # row loop counter
R_K = 9           # group / batch loop counter
R_C = 10          # chunk pair loop counter
R_LADDR = 11      # load address (maps/bypass/bias streams)
R_KADDR = 12      # load address (kernel streams)
R_DUMLO = 13      # dummy-read cursor, MBuf bank 0
R_DUMHI = 14      # dummy-read cursor, MBuf bank 1
R_LLEN = 15       # load length for R_LADDR
R_KLEN = 16       # load length for R_KADDR
R_KSTRIDE = 17    # kernel image stride constant
R_CSTRIDE = 18    # chunk hop constant (fully connected)
CONST_POOL = (19, 20, 21, 22, 23, 28, 29)   # per-tile delta constants
R_ICLEN = 24      # ICache bank length constant (2048)
R_ICADDR = 25     # program stream cursor
R_ACT = 26        # active CU count
R_RELU = 27       # relu flag
R_CUT = 30        # writeback cut
R_SCRATCH = 31    # scratch for large one-off deltas

BANK_WORDS = 512
BANK_BYTES = BANK_WORDS * 4
TERMINAL_WORDS = 5          # BEQ + 4 delay slots
PREAMBLE_WORDS = 2          # ADD cursor + ICache LD
ENTRY_EXTRA = 2             # MOVI cursor constants, entry bank only
BLOCK_CAP = BANK_WORDS - PREAMBLE_WORDS - ENTRY_EXTRA - TERMINAL_WORDS

COHERENCE_MIN = 16
MOVI_MAX = (1 << 22) - 1
MBUF_BANK = 65536
FRESH = 10 ** 6             # coherence count meaning "no previous load"

ALU_OPS = ("mov", "movi", "add", "addi", "mul", "muli")

BRANCH_BUILDERS = {"ble": isa.ble, "bgt": isa.bgt, "beq": isa.beq}


class CodegenError(PlanError):
    pass


@dataclass
class CompiledLayer:
    layer_id: int
    block_range: tuple        # [first, last) indices into the block lists
    expected_writebacks: int


@dataclass
class CompiledProgram:
    banks: list               # per bank: list of encoded words
    entry_bank: int
    expected_writebacks: int
    block_predicted: list     # per block: words predicted by ghost runs
    block_emitted: list       # per block: words actually emitted
    layers: list              # CompiledLayer in program order
    plan: object

    def binary(self) -> bytes:
        return isa.encode_banks(self.banks, self.entry_bank)

    def disasm(self) -> str:
        out = []
        for i, bank in enumerate(self.banks):
            out.append(f"# bank {i}")
            out.append(isa.disasm(bank, base=(i % 2) * BANK_WORDS))
        return "\n".join(out)


# ------------------------------------------------------------------ emitter

class Emitter:
    """Instruction list builder with register value tracking.

    self.val maps register -> known value (None once unknowable).  Vector
    auto-increments fold in at emission time, so cursor math never needs
    manual bookkeeping.  self.coh counts vector instructions per
    (cu, MBuf bank) since that bank's last load, and self.cohc marks banks
    read since then; together they mirror the machine's coherence rule so
    dummy padding is emitted exactly when required.  Back-to-back loads
    into an unread bank form one reload and need no padding between them.
    """

    def __init__(self):
        self.ops = []
        self.val = {0: 0}
        self.fixups = []          # (branch index, target index), same block
        self.block_marks = [0]
        self.block_pred = []
        self._cur_pred = 0
        self.coh = {}
        self.cohc = set()
        self.active_cus = 4
        self.in_loop = 0
        self.wb_count = 0
        self.consts = {}          # delta value -> holding register
        self.collect = None       # when a dict, bump() records big deltas

    # -- shared instruction semantics ---------------------------

    def _apply(self, ins):
        """Fold one instruction into the tracked state."""
        val = self.val

        def put(r, v):
            if r != 0:
                val[r] = v

        op = ins.op
        if op == "movi":
            put(ins.rd, ins.imm)
        elif op == "mov":
            s = val.get(ins.rs1)
            put(ins.rd, None if s is None else s << ins.shamt)
        elif op in ("add", "mul"):
            a, b = val.get(ins.rs1), val.get(ins.rs2)
            v = None if a is None or b is None else \
                (a + b if op == "add" else a * b)
            put(ins.rd, v)
        elif op in ("addi", "muli"):
            a = val.get(ins.rs1)
            v = None if a is None else \
                (a + ins.imm if op == "addi" else a * ins.imm)
            put(ins.rd, v)
        elif op in ("mac", "max") or (op == "vmov"
                                      and ins.vmov_target != "clear"):
            addr = val.get(ins.rs1)
            if addr is not None:
                banks = (1 if addr >= MBUF_BANK else 0,)
            else:
                banks = (0, 1)    # unknown cursor: assume both banks read
            for cu in range(self.active_cus):
                for bank in banks:
                    k = (cu, bank)
                    if addr is not None:
                        self.coh[k] = self.coh.get(k, FRESH) + 1
                    self.cohc.add(k)
            if op == "mac":
                step = ins.trace * (2 if ins.indp else 32)
                put(ins.rs1, None if addr is None else addr + step)
                b = val.get(ins.rs2)
                put(ins.rs2, None if b is None else b + ins.trace * 32)
                if ins.writeback:
                    self.wb_count += 1
            elif op == "max":
                put(ins.rs1,
                    None if addr is None else addr + ins.trace * 32)
                if ins.writeback:
                    self.wb_count += 1
            else:
                put(ins.rs1, None if addr is None else addr + 32)
        elif op == "ld":
            for t in _ld_targets(ins.rd):
                self.coh[t] = 0
                self.cohc.discard(t)
        if op in ALU_OPS and ins.rd == R_ACT:
            v = val.get(R_ACT)
            self.active_cus = v if v is not None else 4

    def emit(self, ins):
        self._apply(ins)
        self.ops.append(ins)

    def know(self, reg):
        return self.val.get(reg)

    # -- value materialization ----------------------------------

    def mat(self, reg, value):
        """Set reg to an absolute value (up to 4 instructions)."""
        if self.val.get(reg) == value:
            return
        if -MOVI_MAX - 1 <= value <= MOVI_MAX:
            self.emit(isa.movi(reg, value))
            return
        mag = abs(value)
        self.emit(isa.movi(reg, mag >> 7))
        self.emit(isa.mov(reg, reg, 7))
        if mag & 0x7F:
            self.emit(isa.addi(reg, reg, mag & 0x7F))
        if value < 0:
            self.emit(isa.muli(reg, reg, -1))

    def bump(self, reg, delta):
        """Advance reg by a relative amount (safe inside loop bodies)."""
        if delta == 0:
            return
        if delta in self.consts:
            self.emit(isa.add(reg, reg, self.consts[delta]))
            return
        if -2048 <= delta <= 2047:
            self.emit(isa.addi(reg, reg, delta))
            return
        if self.collect is not None:
            self.collect[delta] = self.collect.get(delta, 0) + 1
        if -4096 <= delta <= 4094:
            half = delta // 2
            self.emit(isa.addi(reg, reg, half))
            self.emit(isa.addi(reg, reg, delta - half))
        else:
            self.mat(R_SCRATCH, delta)
            self.emit(isa.add(reg, reg, R_SCRATCH))

    def goto(self, reg, target):
        """Bring reg to target using the cheapest legal form."""
        cur = self.val.get(reg)
        if cur is None:
            if self.in_loop:
                raise CodegenError(f"r{reg} has no tracked value inside "
                                   f"a loop body")
            self.mat(reg, target)
            return
        delta = target - cur
        if self.in_loop or delta == 0 or delta in self.consts \
                or -4096 <= delta <= 4094:
            self.bump(reg, delta)
        elif -MOVI_MAX - 1 <= target <= MOVI_MAX:
            self.mat(reg, target)          # one MOVI beats a big bump
        else:
            self.bump(reg, delta)

    # -- ghost runs ----------------------------------------------

    def _snapshot(self):
        return (dict(self.val), dict(self.coh), self.wb_count,
                self.active_cus, set(self.cohc))

    def ghost_len(self, fn) -> int:
        """Emit fn into a throwaway buffer; all state is restored."""
        saved_ops, saved_fix = self.ops, self.fixups
        state = self._snapshot()
        self.ops, self.fixups = list(saved_ops), list(saved_fix)
        base = len(self.ops)
        try:
            fn()
            return len(self.ops) - base
        finally:
            self.ops, self.fixups = saved_ops, saved_fix
            self.val, self.coh = dict(state[0]), dict(state[1])
            self.wb_count, self.active_cus = state[2], state[3]
            self.cohc = set(state[4])

    # -- loops ---------------------------------------------------

    def loop(self, counter, n, body):
        """Emit body once under a backward branch executing it n times."""
        if n <= 0:
            return
        if n == 1:
            body()
            return
        self.mat(counter, n)
        top = len(self.ops)
        before = self._snapshot()
        self.in_loop += 1
        try:
            body()
        finally:
            self.in_loop -= 1
        after1 = self._snapshot()
        self._simulate(top, len(self.ops))
        after2 = self._snapshot()
        self._fast_forward(before, after1, after2, counter, n)
        # the decrement's effect is already part of the fast-forwarded
        # exit state, so it must not be applied again
        self.ops.append(isa.addi(counter, counter, -1))
        self.fixups.append((len(self.ops), top))
        self.ops.append(isa.bgt(counter, 0, 1))   # offset patched at link
        self._hoist_slots(counter, top)

    def _simulate(self, start, end):
        """Re-execute emitted ops [start, end) once over tracked state.

        Inner loops run for real (their branch targets come from the
        pending fixups), so the result is the machine-accurate register
        state after one more iteration of the enclosing body.
        """
        fix = {br: tgt for br, tgt in self.fixups if start <= br < end}
        i = start
        steps = 0
        while i < end:
            steps += 1
            if steps > 2_000_000:
                raise CodegenError("loop body re-simulation did not "
                                   "terminate")
            ins = self.ops[i]
            if ins.is_branch:
                if i not in fix:
                    raise CodegenError("unresolved branch inside loop body")
                a, b = self.val.get(ins.rs1), self.val.get(ins.rs2)
                if a is None or b is None:
                    raise CodegenError("branch condition unknown in loop "
                                       "body re-simulation")
                taken = {"ble": a <= b, "bgt": a > b,
                         "beq": a == b}[ins.op]
                for k in range(1, 5):
                    if i + k < end:
                        self._apply(self.ops[i + k])
                i = fix[i] if taken else i + 5
                continue
            self._apply(ins)
            i += 1

    def _fast_forward(self, before, after1, after2, counter, n):
        val = {}
        for r in set(after1[0]) | set(after2[0]):
            if r == 0:
                continue
            v1, v2 = after1[0].get(r), after2[0].get(r)
            if v1 is None or v2 is None:
                val[r] = None
                continue
            d = v2 - v1
            b = before[0].get(r)
            if d == 0:
                val[r] = v1
            elif b is not None and v1 - b != d:
                raise CodegenError(f"loop body effect on r{r} is not "
                                   f"uniform ({b} -> {v1} -> {v2})")
            else:
                val[r] = v1 + (n - 1) * d
        val[0] = 0
        val[counter] = 0
        self.val = val
        coh = {}
        for k in set(after1[1]) | set(after2[1]) | set(before[1]):
            v1 = after1[1].get(k, FRESH)
            v2 = after2[1].get(k, FRESH)
            b = before[1].get(k, FRESH)
            d = v2 - v1
            if d == 0:
                coh[k] = v1
            elif v1 - b != d:
                raise CodegenError(f"loop body coherence count for {k} is "
                                   f"not uniform")
            else:
                coh[k] = v1 + (n - 1) * d
        self.coh = coh
        # membership is monotone across iterations: the union is the
        # steady state (loop bodies never load MBuf banks)
        self.cohc = after1[4] | after2[4]
        d_wb = after2[2] - after1[2]
        if after1[2] - before[2] != d_wb:
            raise CodegenError("loop body writeback count is not uniform")
        self.wb_count = after1[2] + (n - 1) * d_wb
        if not (before[3] == after1[3] == after2[3]):
            raise CodegenError("active CU count changed inside a loop body")
        self.active_cus = after1[3]

    def _hoist_slots(self, counter, top):
        """Fill the closing branch's 4 delay slots from the body tail."""
        br = len(self.ops) - 1
        protected = set()
        for j in range(top, br):
            if self.ops[j].is_branch:
                protected.update(range(j + 1, j + 5))
        i = br - 2            # skip the decrement before the branch
        movable = []
        while i >= top and i not in protected and len(movable) < 4:
            ins = self.ops[i]
            if ins.op not in ALU_OPS:
                break
            if ins.rd == counter or counter in (ins.rs1, ins.rs2):
                break
            movable.append(ins)
            i -= 1
        movable.reverse()
        # the slot window may carry at most one true RAW pair
        while movable and _raw_pairs(movable) > 1:
            movable.pop(0)
        if movable:
            s0 = br - 1 - len(movable)
            dec, bri = self.ops[br - 1], self.ops[br]
            del self.ops[s0:]
            self.ops.append(dec)
            self.fixups[-1] = (len(self.ops), top)
            self.ops.append(bri)
            self.ops.extend(movable)
        for _ in range(4 - len(movable)):
            self.ops.append(isa.nop())

    # -- loads ---------------------------------------------------

    def guard_coherence(self, dest):
        """Pad with dummy reads so the 16-instruction reload rule holds.

        Banks untouched since their last load have no queued readers, so
        successive loads of one stream pass without padding.
        """
        targets = _ld_targets(dest)
        if not targets:
            return
        deficit = max((COHERENCE_MIN - self.coh.get(t, FRESH)
                       for t in targets if t in self.cohc), default=0)
        if deficit <= 0:
            return
        if any(cu >= self.active_cus for cu, _ in targets):
            self.mat(R_ACT, 4)
        bank = targets[0][1]
        reg = R_DUMHI if bank else R_DUMLO
        self.mat(reg, MBUF_BANK if bank else 0)
        self.mat(R_DUMLO, 0)
        for _ in range(deficit):
            self.emit(isa.mac("coop", reg, R_DUMLO, 1))

    def emit_desc(self, d, addr_reg=R_LADDR, len_reg=R_LLEN):
        self.guard_coherence(d.dest)
        self.goto(addr_reg, d.mem_addr)
        self.goto(len_reg, d.length)
        self.emit(isa.ld(d.dest, addr_reg, len_reg, d.buf_block,
                         d.unit or 0))

    # -- emission units and blocks -------------------------------

    def unit(self, fn) -> int:
        """Measure fn with a ghost run, open a new block if needed, emit."""
        n = self.ghost_len(fn)
        if n > BLOCK_CAP:
            raise CodegenError(f"emission unit of {n} words exceeds the "
                               f"{BLOCK_CAP}-word block capacity")
        cur = len(self.ops) - self.block_marks[-1]
        if cur and cur + n > BLOCK_CAP:
            self.end_block()
        fn()
        self._cur_pred += n
        return n

    def end_block(self):
        if len(self.ops) > self.block_marks[-1]:
            self.block_marks.append(len(self.ops))
            self.block_pred.append(self._cur_pred)
            self._cur_pred = 0

    def block_bounds(self):
        marks = list(self.block_marks)
        if len(self.ops) > marks[-1]:
            marks.append(len(self.ops))
        return list(zip(marks, marks[1:]))


def _ld_targets(dest):
    """(cu, MBuf bank) pairs whose coherence window a load resets."""
    if not 16 <= dest <= 25:
        return []
    if dest <= 23:
        return [((dest - 16) % 4, (dest - 16) // 4)]
    return [(cu, dest - 24) for cu in range(4)]


def _raw_pairs(instrs) -> int:
    pairs = 0
    for a in range(len(instrs)):
        wa = instrs[a].rd
        if wa == 0 or instrs[a].op not in ALU_OPS:
            continue
        for b in range(a + 1, len(instrs)):
            ib = instrs[b]
            if ib.op == "movi":
                continue
            reads = (ib.rs1, ib.rs2) if ib.op in ("add", "mul") \
                else (ib.rs1,)
            if wa in reads:
                pairs += 1
    return pairs


# ------------------------------------------------------------------ layers

@dataclass
class _Ctx:
    """Addressing context for one kernel batch or channel group."""
    tile: object
    koff: int = 0             # byte offset into each position's channel run
    bank: int = 0             # WBuf bank base for this batch
    maps_off: int = 0         # extra maps byte offset (pool channel groups)
    armed: int = 16           # vMAC slots armed for bias/bypass VMOVs


class LayerEmitter:
    """Emits one layer's visits into the shared Emitter."""

    def __init__(self, em: Emitter, plan, lp, layer, cfg):
        self.em = em
        self.plan = plan
        self.lp = lp
        self.layer = layer
        self.cfg = cfg
        self.kind = layer.kind
        self.indp = lp.mode == "INDP"
        self.sink = layer.bypass_source is not None
        self.pool = layer.kind in ("MaxPool", "AvgPool")
        self.has_wt = layer.kind != "MaxPool"
        self.out_base = lp.regions["out"][0]
        _, self.oh, self.ow = layer.out_shape
        self.ostep = layer.out_ch * cfg.element_bytes
        self.orow = self.ow * self.ostep
        self.rb = layer.in_w * layer.in_ch * cfg.element_bytes
        self.chb = layer.in_ch * cfg.element_bytes
        self.img = lp.kernel_img_bytes
        self.K = len(lp.kernel_tiles)
        self.wide = lp.wide_wbuf
        self.bank_bytes = cfg.mbuf_bytes_per_bank
        if "bias" in lp.regions and lp.regions["bias"][1]:
            self.bias_tail = self.bank_bytes - lp.regions["bias"][1]
        else:
            self.bias_tail = None
        self.mode_str = "indp" if self.indp else "coop"

    # ---- addressing targets

    def _bias_addr(self, tile):
        return tile.mbuf_bank * self.bank_bytes + self.bias_tail

    def _maps_t(self, tile, y, x, op, maps_off=0):
        row = y * self.layer.sy - self.layer.pad + op.kr0 - tile.in_rows[0]
        col = x * self.layer.sx - self.layer.pad + op.kc0
        return tile.mbuf_bank * self.bank_bytes \
            + row * self.rb + col * self.chb + maps_off

    def _strip_t(self, tile, x, op, maps_off):
        # MaxPool strips start exactly at each CU row's first needed row
        col = x * self.layer.sx - self.layer.pad + op.kc0
        return tile.mbuf_bank * self.bank_bytes + col * self.chb + maps_off

    def _out_t(self, y, x, koff):
        return self.out_base + (y * self.ow + x) * self.ostep + koff

    def _byp_t(self, tile, y, x, koff):
        return tile.mbuf_bank * self.bank_bytes + tile.bypass_off \
            + ((y - tile.out_rows[0]) * self.ow + x) * self.ostep + koff

    def _variant(self, op):
        for kc0, kc1, rbv, off in self.lp.wt_variants:
            if (kc0, kc1) == (op.kc0, op.kc1):
                return rbv, off
        raise CodegenError(f"layer {self.layer.id}: no weight image "
                           f"variant for columns {op.kc0}..{op.kc1}")

    def _wt_start(self, op):
        if self.kind == "AvgPool":
            return 0
        if self.indp:
            return (op.kr0 * self.layer.kw + op.kc0) * self.layer.in_ch * 32
        if self.lp.wt_variants is None:
            return (op.kr0 * self.layer.kw + op.kc0) * self.chb
        rbv, off = self._variant(op)
        return off + op.kr0 * rbv

    def _wstride(self, op):
        if self.kind == "AvgPool":
            return op.cols * self.cfg.vector_bytes
        if self.indp:
            return self.layer.kw * self.layer.in_ch * 32
        if self.lp.wt_variants is None:
            return self.layer.kw * self.chb
        return self._variant(op)[0]

    # ---- window emission

    def _position(self, op, y, x, ctx):
        em = self.em
        em.goto(R_OUT, self._out_t(y, x, ctx.koff))
        if self.sink:
            em.goto(R_BYP, self._byp_t(ctx.tile, y, x, ctx.koff))
        if self.kind == "MaxPool":
            em.goto(R_MAPS, self._strip_t(ctx.tile, x, op, ctx.maps_off))
        else:
            em.goto(R_MAPS, self._maps_t(ctx.tile, y, x, op, ctx.maps_off))
        if self.has_wt:
            em.goto(R_WT, ctx.bank + self._wt_start(op))

    def _emit_bypass(self, ctx):
        em = self.em
        if self.indp:
            for s in range(ctx.armed):
                em.emit(isa.vmov("bypass", R_BYP, word=s, slot_mode=True))
        else:
            em.emit(isa.vmov("bypass", R_BYP))

    def _window(self, op, y, x, ctx):
        em = self.em
        self._position(op, y, x, ctx)
        if self.pool:
            self._window_pixels(op, y, x, ctx)
            return
        traces = zone_traces(self.layer, op, self.lp.mode, self.cfg)
        m0 = self._maps_t(ctx.tile, y, x, op, ctx.maps_off)
        w0 = ctx.bank + self._wt_start(op)
        ws = self._wstride(op)
        for i in range(op.rows):
            if i:
                em.goto(R_MAPS, m0 + i * self.rb)
                em.goto(R_WT, w0 + i * ws)
            last = i == op.rows - 1
            if last and self.sink:
                self._emit_bypass(ctx)
            em.emit(isa.mac(self.mode_str, R_MAPS, R_WT, traces[i],
                            writeback=last))

    def _window_pixels(self, op, y, x, ctx):
        """Pool window: one trace-1 vector instruction per input pixel."""
        em = self.em
        if self.kind == "MaxPool":
            m0 = self._strip_t(ctx.tile, x, op, ctx.maps_off)
        else:
            m0 = self._maps_t(ctx.tile, y, x, op, ctx.maps_off)
        n = op.rows * op.cols
        p = 0
        for i in range(op.rows):
            for j in range(op.cols):
                if p:
                    em.goto(R_MAPS, m0 + i * self.rb + j * self.chb)
                p += 1
                last = p == n
                if last and self.sink:
                    self._emit_bypass(ctx)
                if self.kind == "MaxPool":
                    em.emit(isa.max_(R_MAPS, 1, writeback=last))
                else:
                    em.emit(isa.mac("coop", R_MAPS, R_WT, 1,
                                    writeback=last))

    def _band(self, op, y, ctx):
        em = self.em
        if op.repeat_x <= 3:
            for j in range(op.repeat_x):
                self._window(op, y, op.x0 + j, ctx)
            return
        self._position(op, y, op.x0, ctx)

        def cell():
            self._window(op, y, op.x0, ctx)
            self._position(op, y, op.x0 + 1, ctx)

        em.loop(R_X, op.repeat_x, cell)

    def _sweep(self, ops, ctx):
        """All positions of one tile for one batch / channel group."""
        em = self.em
        if any((op.y0, op.repeat_y) != (ops[0].y0, ops[0].repeat_y)
               for op in ops):
            raise CodegenError(f"layer {self.layer.id}: tile bands are "
                               f"not row-uniform")
        y0 = ops[0].y0 + ctx.tile.out_rows[0]
        ry = 1 if self.kind == "MaxPool" else ops[0].repeat_y
        self._position(ops[0], y0, ops[0].x0, ctx)

        def row():
            for op in ops:
                self._band(op, y0, ctx)
            if ry > 1:
                self._position(ops[0], y0 + 1, ops[0].x0, ctx)

        if ry > 1:
            em.loop(R_Y, ry, row)
        else:
            row()

    # ---- stream loads

    def _tile_streams(self, t, with_bias):
        for d in self.lp.map_tiles[t].loads:
            if d.tag == "bias" and not with_bias:
                continue
            self.em.emit_desc(d)

    def _stream_kernels(self, k, bank):
        """Queue one batch's 16 per-slot kernel images."""
        em, cfg = self.em, self.cfg
        base = self.lp.regions["weights"][0] + k * cfg.vmac_slots * self.img
        units = self.lp.allowed_units
        em.goto(R_KADDR, base)
        em.goto(R_KLEN, self.img)
        for s in range(cfg.vmac_slots):
            em.emit(isa.ld(isa.ld_wbuf(s // 4, s % 4), R_KADDR, R_KLEN,
                           bank // 32, units[s % len(units)]))
            if s + 1 < cfg.vmac_slots:
                em.emit(isa.add(R_KADDR, R_KADDR, R_KSTRIDE))

    # ---- preamble (constants, prologue, first kernel prefetch)

    def _collect_consts(self, probe):
        em = self.em
        em.consts = {}
        em.collect = {}
        try:
            em.ghost_len(probe)
        finally:
            counts = em.collect
            em.collect = None
        picks = [d for d, c in sorted(counts.items(),
                                      key=lambda kv: (-kv[1], kv[0]))
                 if c >= 2][:len(CONST_POOL)]
        em.consts = {d: CONST_POOL[i] for i, d in enumerate(picks)}

    def _preamble(self, first, t, probe, first_kernels):
        em, cfg = self.em, self.cfg
        self._collect_consts(probe)

        def unit():
            vpc = cfg.vmacs_per_cu
            if first:
                if self.kind == "MaxPool":
                    em.mat(R_CUSTRIDE, self.orow)
                elif self.indp:
                    em.mat(R_CUSTRIDE,
                           vpc * cfg.lanes * cfg.element_bytes)
                else:
                    em.mat(R_CUSTRIDE, vpc * cfg.element_bytes)
                em.mat(R_RELU, 1 if self.layer.relu else 0)
                if self.has_wt and self.img:
                    em.mat(R_KSTRIDE, self.img)
            if self.kind == "MaxPool":
                em.mat(R_ACT, self.lp.map_tiles[t].assigned_cus)
            elif first:
                em.mat(R_ACT, 4)
            for d, r in em.consts.items():
                em.mat(r, d)
            if first_kernels:
                self._stream_kernels(0, 0)

        em.unit(unit)

    # ---- conv (COOP and INDP, Kloop and Mloop)

    def emit_conv(self):
        em, lp, cfg = self.em, self.lp, self.cfg
        T = len(lp.map_tiles)
        if lp.loop_order == "Mloop":
            visits = [(t, k) for k in range(self.K) for t in range(T)]
        else:
            visits = [(t, k) for t in range(T) for k in range(self.K)]
        # WBuf parity follows the sequence of distinct kernel loads
        jidx = []
        j, last_k = -1, None
        for _, k in visits:
            if k != last_k:
                j, last_k = j + 1, k
            jidx.append(j)

        def bank_of(i):
            return 0 if self.wide else (jidx[i] % 2) * cfg.wbuf_bytes

        streamed_bias = set()

        def stream_tile(t2):
            wb = t2 < 2 and t2 not in streamed_bias
            streamed_bias.add(t2)
            em.unit(lambda: self._tile_streams(t2, with_bias=wb))

        for i, (t, k) in enumerate(visits):
            if self.wide:
                prefetch = ("self",) if i == 0 or jidx[i] != jidx[i - 1] \
                    else None
            elif i + 1 < len(visits) and jidx[i + 1] != jidx[i]:
                prefetch = (visits[i + 1][1], bank_of(i + 1))
            else:
                prefetch = None
            batch = (lambda t=t, k=k, i=i, p=prefetch:
                     self._conv_batch(t, k, bank_of(i), p))
            if i == 0 or visits[i - 1][0] != t:
                self._preamble(i == 0, t, probe=batch,
                               first_kernels=(i == 0 and not self.wide))
            if i == 0:
                stream_tile(0)
            nxt = visits[i + 1][0] if i + 1 < len(visits) else None
            flip = nxt is not None and nxt != t
            if flip and lp.map_tiles[nxt].mbuf_bank \
                    != lp.map_tiles[t].mbuf_bank:
                # next tile targets the idle bank: stream under this batch
                stream_tile(nxt)
                em.unit(batch)
            else:
                em.unit(batch)
                if flip:
                    stream_tile(nxt)

    def _conv_batch(self, t, k, bank, prefetch):
        em, lp, cfg = self.em, self.lp, self.cfg
        k0 = lp.kernel_tiles[k].kernel_range[0]
        group = cfg.vmac_slots * (cfg.lanes if self.indp else 1)
        cut = min(group, self.layer.out_ch - k0)
        armed = -(-cut // cfg.lanes) if self.indp else 1
        ctx = _Ctx(tile=lp.map_tiles[t], koff=k0 * cfg.element_bytes,
                   bank=bank, armed=armed)
        em.goto(R_BIAS, self._bias_addr(ctx.tile)
                + (k0 // cfg.lanes) * cfg.vector_bytes)
        if self.indp:
            for s in range(armed):
                em.emit(isa.vmov("bias", R_BIAS, word=s, slot_mode=True))
        else:
            em.emit(isa.vmov("bias", R_BIAS))
        em.goto(R_CUT, cut)
        if prefetch == ("self",):
            self._stream_kernels(k, 0)
        elif prefetch is not None:
            self._stream_kernels(*prefetch)
        self._sweep(lp.windows[t], ctx)

    # ---- pools

    def emit_pool(self):
        em, cfg = self.em, self.cfg
        T = len(self.lp.map_tiles)
        groups = math.ceil(self.layer.in_ch / cfg.lanes)
        partial = self.layer.in_ch % cfg.lanes
        full = groups - (1 if partial else 0)
        tiles = self.lp.map_tiles
        for t in range(T):
            self._preamble(t == 0, t,
                           probe=lambda t=t: self._pool_groups(
                               t, full, partial, probe=True),
                           first_kernels=False)
            if t == 0:
                em.unit(lambda: self._tile_streams(0, with_bias=True))
                if self.kind == "AvgPool":
                    em.unit(lambda: self._stream_kernels(0, 0))
            pre = t + 1 < T and tiles[t + 1].mbuf_bank != tiles[t].mbuf_bank
            if pre:
                em.unit(lambda t=t: self._tile_streams(t + 1,
                                                       with_bias=(t == 0)))
            em.unit(lambda t=t: self._pool_groups(t, full, partial))
            if t + 1 < T and not pre:
                em.unit(lambda t=t: self._tile_streams(t + 1,
                                                       with_bias=(t == 0)))

    def _pool_groups(self, t, full, partial, probe=False):
        em, lp, cfg = self.em, self.lp, self.cfg
        tile = lp.map_tiles[t]
        ops = lp.windows[t]
        y0 = ops[0].y0 + tile.out_rows[0]

        def ctx_of(g):
            return _Ctx(tile=tile, koff=g * cfg.vector_bytes,
                        maps_off=g * cfg.vector_bytes)

        def body(g, cut):
            em.goto(R_CUT, cut)
            if self.kind == "AvgPool":
                em.emit(isa.vmov("bias", R_BIAS))
            self._sweep(ops, ctx_of(g))
            # land the cursors on the next group's first position
            self._position(ops[0], y0, ops[0].x0, ctx_of(g + 1))

        if self.kind == "AvgPool":
            em.goto(R_BIAS, self._bias_addr(tile))
        self._position(ops[0], y0, ops[0].x0, ctx_of(0))
        if probe:
            body(0, cfg.lanes if full else partial)
            return
        if full:
            # seed the cut so the in-loop goto is a constant no-op
            em.goto(R_CUT, cfg.lanes)
            em.loop(R_K, full, lambda: body(0, cfg.lanes))
        if partial:
            body(full, partial)

    # ---- fully connected

    def emit_fc(self):
        em, lp, cfg = self.em, self.lp, self.cfg
        chunks = lp.fc_chunks
        full_bytes = chunks[0] * cfg.vector_bytes
        group = cfg.vmac_slots * cfg.lanes
        last_cut = self.layer.out_ch - lp.kernel_tiles[-1].kernel_range[0]
        peel = 1 if (self.K > 1 and last_cut != group) else 0
        loop_n = self.K - peel

        def prologue():
            em.mat(R_CUSTRIDE,
                   cfg.vmacs_per_cu * cfg.lanes * cfg.element_bytes)
            em.mat(R_RELU, 1 if self.layer.relu else 0)
            em.mat(R_ACT, 4)
            em.mat(R_KSTRIDE, self.img)
            em.mat(R_CSTRIDE, cfg.wbuf_bytes
                   - (cfg.vmac_slots - 1) * self.img)
            em.goto(R_BIAS, self._bias_addr(lp.map_tiles[0]))
            em.goto(R_OUT, self.out_base)
            if self.sink:
                em.goto(R_BYP, self._byp_t(lp.map_tiles[0], 0, 0, 0))
            em.goto(R_MAPS, 0)
            # parked past both banks: the mac pair then nets this register
            # to zero (hop to 0, two auto-increments, free hop to bank 1),
            # which the chunk loop requires
            em.goto(R_WT, cfg.wbuf_bytes * cfg.wbuf_banks)
            em.goto(R_KADDR, lp.regions["weights"][0])
            em.goto(R_KLEN, full_bytes)
            em.goto(R_CUT, group)
            for d, r in em.consts.items():
                em.mat(r, d)

        first_cut = group if self.K > 1 else last_cut
        self._collect_consts(lambda: (prologue(),
                                      self._fc_batch(first_cut)))
        em.unit(prologue)
        em.unit(lambda: self._tile_streams(0, with_bias=True))
        if self.K == 1:
            em.unit(lambda: self._fc_batch(last_cut))
            return
        if loop_n > 1:
            em.unit(lambda: em.loop(R_K, loop_n,
                                    lambda: self._fc_batch(group)))
        elif loop_n == 1:
            em.unit(lambda: self._fc_batch(group))
        if peel:
            em.unit(lambda: self._fc_batch(last_cut))

    def _fc_batch(self, cut):
        """One 256-kernel output batch.

        Cursor registers flow between batches, so the same body serves
        the batch loop and the peeled final batch.
        """
        em, lp, cfg = self.em, self.lp, self.cfg
        chunks = lp.fc_chunks
        n = len(chunks)
        group = cfg.vmac_slots * cfg.lanes
        armed = -(-cut // cfg.lanes)
        ctx = _Ctx(tile=None, armed=armed)
        for s in range(armed):
            em.emit(isa.vmov("bias", R_BIAS, word=s, slot_mode=True))
        em.goto(R_CUT, cut)

        def stream(c):
            em.goto(R_KLEN, chunks[c] * cfg.vector_bytes)
            block = (c % 2) * (cfg.wbuf_bytes // 32)
            units = lp.allowed_units
            for s in range(cfg.vmac_slots):
                em.emit(isa.ld(isa.ld_wbuf(s // 4, s % 4), R_KADDR,
                               R_KLEN, block, units[s % len(units)]))
                if s + 1 < cfg.vmac_slots:
                    em.emit(isa.add(R_KADDR, R_KADDR, R_KSTRIDE))
            em.emit(isa.add(R_KADDR, R_KADDR, R_CSTRIDE))

        def mac_one(j):
            em.goto(R_WT, (j % 2) * cfg.wbuf_bytes)
            last = j == n - 1
            if last and self.sink:
                self._emit_bypass(ctx)
            em.emit(isa.mac("indp", R_MAPS, R_WT, chunks[j],
                            writeback=last))
            if j + 2 < n:
                stream(j + 2)

        stream(0)
        if n > 1:
            stream(1)
        m = max(0, ((n - 3) // 2) * 2)
        if m >= 2:
            em.loop(R_C, m // 2, lambda: (mac_one(0), mac_one(1)))
        for j in range(m, n):
            mac_one(j)
        # flow to the next batch
        em.bump(R_BIAS, (cfg.vmac_slots - armed) * cfg.vector_bytes)
        em.bump(R_OUT, group * cfg.element_bytes)
        if self.sink:
            em.bump(R_BYP, group * cfg.element_bytes)
        em.bump(R_MAPS, -self.layer.in_ch * cfg.element_bytes)
        em.goto(R_WT, cfg.wbuf_bytes * cfg.wbuf_banks)
        em.bump(R_KADDR, cfg.vmac_slots * self.img - n * cfg.wbuf_bytes)
        em.goto(R_KLEN, chunks[0] * cfg.vector_bytes)

    # ---- entry point

    def emit(self):
        if self.kind == "FullyConnected":
            self.emit_fc()
        elif self.pool:
            self.emit_pool()
        else:
            self.emit_conv()


# ------------------------------------------------------------------ linking

def compile_plan(plan) -> CompiledProgram:
    """Emit and link the whole plan into a banked program."""
    em = Emitter()
    compiled = []
    for lp in plan.layers:
        layer = plan.graph.by_id(lp.layer_id)
        em.end_block()
        b0 = len(em.block_pred)
        wb0 = em.wb_count
        LayerEmitter(em, plan, lp, layer, plan.cfg).emit()
        em.end_block()
        got = em.wb_count - wb0
        if got != lp.expected_writebacks:
            raise CodegenError(
                f"layer {lp.layer_id}: emitted {got} writeback events, "
                f"plan expects {lp.expected_writebacks}")
        compiled.append(CompiledLayer(lp.layer_id,
                                      (b0, len(em.block_pred)),
                                      lp.expected_writebacks))
    em.end_block()
    banks = _link(em, plan)
    return CompiledProgram(
        banks=banks, entry_bank=0,
        expected_writebacks=sum(c.expected_writebacks for c in compiled),
        block_predicted=list(em.block_pred),
        block_emitted=[b - a for a, b in em.block_bounds()],
        layers=compiled, plan=plan)


def _link(em: Emitter, plan) -> list:
    bounds = em.block_bounds()
    ops = list(em.ops)
    for br, tgt in em.fixups:
        blk = next((a, b) for a, b in bounds if a <= br < b)
        if not blk[0] <= tgt < blk[1]:
            raise CodegenError("branch escapes its block")
        ins = ops[br]
        ops[br] = BRANCH_BUILDERS[ins.op](ins.rs1, ins.rs2, tgt - br)
    blocks = [ops[a:b] for a, b in bounds]
    total = sum(len(b) for b in blocks)
    if total <= BANK_WORDS:
        return [[isa.encode(i) for b in blocks for i in b]]
    # greedy packing; every bank reserves room for chain glue
    groups = [[]]
    for blk in blocks:
        cap = BLOCK_CAP + (0 if len(groups) == 1 else ENTRY_EXTRA)
        if groups[-1] and sum(len(b) for b in groups[-1]) + len(blk) > cap:
            groups.append([])
        groups[-1].append(blk)
    n = len(groups)
    base = plan.cfg.program_base
    region = plan.regions["program"][1]
    if n * BANK_BYTES > region:
        raise CodegenError(f"program needs {n * BANK_BYTES} bytes, the "
                           f"program region holds {region}")
    banks = []
    for i, group in enumerate(groups):
        body = []
        if i == 0:
            body.append(isa.movi(R_ICLEN, BANK_BYTES))
            body.append(isa.movi(R_ICADDR, base))
        if i + 1 < n:
            body.append(isa.add(R_ICADDR, R_ICADDR, R_ICLEN))
            body.append(isa.ld(isa.ld_icache(), R_ICADDR, R_ICLEN,
                               ((i + 1) % 2) * 64, 0))
        for blk in group:
            body.extend(blk)
        if i + 1 < n:
            branch_pc = (i % 2) * BANK_WORDS + len(body)
            target = ((i + 1) % 2) * BANK_WORDS
            body.append(isa.beq(0, 0, target - branch_pc))
            body.extend(isa.nop() for _ in range(4))
        if len(body) > BANK_WORDS:
            raise CodegenError(f"bank {i} packs {len(body)} words")
        banks.append([isa.encode(x) for x in body])
    return banks
