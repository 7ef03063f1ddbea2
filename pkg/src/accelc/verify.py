"""Static legality checks for linked programs.

The verifier walks the banked instruction stream without executing it, so
every rule is a program-order approximation of what the machine enforces
dynamically.  A clean report is required before simulation; the machine
still faults on the exact runtime conditions.

Checked rules:
  a. branches stay inside their bank; the only exception is the terminal
     unconditional jump that chains into the next bank's cache slot
  b. no bank exceeds the 512-word cache slot
  c. a branch's four delay slots carry at most one true RAW dependent pair
  d. an LD into a data buffer bank arrives only after at least 16 vector
     instructions since that bank's previous LD (weight and instruction
     buffers are exempt)
  e. every register read is preceded by a write, except r0
  f. accumulation runs (between writeback or bias-load resets) stay under
     the accumulator product budget
"""

from __future__ import annotations

from . import isa

BANK_WORDS = 512
ALU_WRITERS = ("mov", "movi", "add", "addi", "mul", "muli")

# registers a writeback consumes beyond the instruction's own operands
WB_READS = (3, 4, 26, 27, 30)


def _decode_bank(bank, bank_idx, out):
    """Decode one bank, tolerating trailing zero padding."""
    words = list(bank)
    while words and _word_of(words[-1]) == 0:
        words.pop()
    ops = []
    for j, w in enumerate(words):
        if isinstance(w, isa.Instr):
            ops.append(w)
            continue
        if w == 0:
            out.append(f"bank {bank_idx} word {j}: reserved all-zero word "
                       f"inside the instruction stream")
            ops.append(None)
            continue
        try:
            ops.append(isa.decode(w))
        except isa.DecodeError as e:
            out.append(f"bank {bank_idx} word {j}: {e}")
            ops.append(None)
    return ops


def _word_of(w):
    return isa.encode(w) if isinstance(w, isa.Instr) else w


def _reads(ins):
    if ins.op == "movi":
        return ()
    if ins.op in ("mov", "addi", "muli"):
        return (ins.rs1,)
    if ins.op in ("add", "mul", "ble", "bgt", "beq", "ld"):
        return (ins.rs1, ins.rs2)
    if ins.op == "mac":
        regs = [ins.rs1, ins.rs2]
    elif ins.op == "max":
        regs = [ins.rs1]
    elif ins.op == "vmov":
        return () if ins.vmov_target == "clear" else (ins.rs1,)
    else:
        return ()
    if ins.writeback:
        regs.extend(WB_READS)
    return tuple(regs)


def _writes(ins):
    if ins.op in ALU_WRITERS and ins.rd != 0:
        return (ins.rd,)
    return ()


def _raw_pairs(window):
    pairs = 0
    for i, a in enumerate(window):
        if a is None:
            continue
        written = _writes(a)
        if not written:
            continue
        for b in window[i + 1:]:
            if b is not None and any(r in written for r in _reads(b)):
                pairs += 1
                break
    return pairs


def _is_terminal_jump(ins, bank_idx, pos, bank_len, nbanks):
    if ins.op != "beq" or ins.rs1 != 0 or ins.rs2 != 0:
        return False
    if bank_idx + 1 >= nbanks or pos != bank_len - 5:
        return False
    pc = (bank_idx % 2) * BANK_WORDS + pos
    return pc + ins.imm == ((bank_idx + 1) % 2) * BANK_WORDS


def _reads_mbuf(ins):
    if ins.op in ("mac", "max"):
        return True
    return ins.op == "vmov" and ins.vmov_target != "clear"


def verify_program(prog, cfg) -> list:
    """Return a list of violation strings; an empty list means legal."""
    banks = prog.banks if hasattr(prog, "banks") else prog
    out = []
    decoded = []
    for i, bank in enumerate(banks):
        if len(bank) > BANK_WORDS:
            out.append(f"bank {i}: {len(bank)} words exceed the "
                       f"{BANK_WORDS}-word cache slot")
        decoded.append(_decode_bank(bank, i, out))

    nbanks = len(decoded)
    for i, ops in enumerate(decoded):
        base = (i % 2) * BANK_WORDS
        for j, ins in enumerate(ops):
            if ins is None or not ins.is_branch:
                continue
            target = base + j + ins.imm
            if base <= target < base + len(ops):
                pass
            elif not _is_terminal_jump(ins, i, j, len(ops), nbanks):
                out.append(f"bank {i} word {j}: branch target {target} "
                           f"leaves the bank")
            window = ops[j + 1:j + 5]
            if len(window) < 4:
                out.append(f"bank {i} word {j}: branch is missing its four "
                           f"delay slots")
            if _raw_pairs(window) > 1:
                out.append(f"bank {i} word {j}: more than one RAW "
                           f"dependent pair in the delay slots")

    # first-execution pass: every read must be covered by an earlier write
    defined = {0}
    for i, ops in enumerate(decoded):
        for j, ins in enumerate(ops):
            if ins is None:
                continue
            for r in _reads(ins):
                if r not in defined:
                    out.append(f"bank {i} word {j}: {ins.op} reads r{r} "
                               f"before any write")
                    defined.add(r)
            for r in _writes(ins):
                defined.add(r)

    _flow_scan(decoded, cfg, out)
    return out


def _ld_banks(ins, cfg):
    d = ins.rd
    if d < 16 or d == 26:
        return ()
    if d < 24:
        return (((d - 16) % cfg.num_cus, (d - 16) // cfg.num_cus),)
    bank = d - 24
    return tuple((cu, bank) for cu in range(cfg.num_cus))


class _FlowState:
    """Coherence counters and accumulation products, capped for fixed point.

    Loop trip counts are not recoverable from a static scan, so a backward
    branch's body is re-walked until the capped state stops changing.  The
    caps sit well above every check threshold, which keeps the re-walk
    bounded without weakening any verdict a single pass could reach.
    """

    MAX_PASSES = 24

    def __init__(self, cfg):
        self.cfg = cfg
        self.counter_cap = 4 * cfg.vmac_slots
        self.counters = {}
        self.consumed = set()
        self.products = 0

    def key(self):
        return (tuple(sorted(self.counters.items())),
                tuple(sorted(self.consumed)), self.products)

    def step(self, ins, where, out, seen):
        cfg = self.cfg
        if _reads_mbuf(ins):
            for k in self.counters:
                self.counters[k] = min(self.counters[k] + 1,
                                       self.counter_cap)
                self.consumed.add(k)
        if ins.op == "mac":
            # per-accumulator products: a cooperative trace vector sums one
            # product per lane, an independent one adds a single product
            self.products += ins.trace * (1 if ins.indp else cfg.lanes)
            if self.products > cfg.acc_guard_products:
                if ("acc", where) not in seen:
                    seen.add(("acc", where))
                    out.append(f"{where}: accumulation run exceeds "
                               f"{cfg.acc_guard_products} products")
                self.products = 0
        if (ins.op in ("mac", "max") and ins.writeback) or (
                ins.op == "vmov" and ins.vmov_target == "bias"):
            self.products = 0
        if ins.op == "ld":
            # loads into a bank nobody has read since its last load are
            # pieces of one stream and carry no stale-reader hazard
            for k in _ld_banks(ins, cfg):
                since = self.counters.get(k)
                if since is not None and k in self.consumed \
                        and since < cfg.vmac_slots:
                    if ("coh", where, k) not in seen:
                        seen.add(("coh", where, k))
                        cu, bk = k
                        out.append(f"{where}: LD overwrites cu {cu} buffer "
                                   f"bank {bk} after only {since} vector "
                                   f"instructions")
                self.counters[k] = 0
                self.consumed.discard(k)


def _flow_scan(decoded, cfg, out):
    state = _FlowState(cfg)
    seen = set()
    for i, ops in enumerate(decoded):
        j = 0
        while j < len(ops):
            ins = ops[j]
            if ins is not None:
                state.step(ins, f"bank {i} word {j}", out, seen)
                target = j + ins.imm
                if (ins.is_branch and ins.imm < 0 and target >= 0):
                    # delay slots run once per iteration as well
                    stop = min(j + 5, len(ops))
                    for _ in range(_FlowState.MAX_PASSES):
                        before = state.key()
                        for k in range(target, stop):
                            if ops[k] is not None and k != j:
                                state.step(ops[k], f"bank {i} word {k}",
                                           out, seen)
                        if state.key() == before:
                            break
                    j = stop
                    continue
            j += 1
