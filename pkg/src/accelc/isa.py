"""The 13-instruction set: encoding, decoding, assembly text, binary banks.

Encodings (bit positions, big end first):

    common  op[31:28] mode[27] rd[26:22] rs1[21:17] rs2[16:12] imm[11:0]
    movi    op[31:28] rd[27:23] imm[22:0]

Per-instruction field use:

    mov   rd, rs1, shamt(rs2 field)        rd = rs1 << shamt (32-bit wrap)
    movi  rd, imm23 (sign extended)
    add/addi/mul/muli                      scalar ALU, imm12 sign extended
    mac   mode=coop(0)/indp(1), rs1=maps addr reg, rs2=weights addr reg,
          imm[11]=writeback, imm[10:0]=trace length in vectors (>=1)
    max   rs1=maps addr reg, imm as mac (pool unit reads maps only)
    vmov  rd=target (0 bias, 1 bypass, 2 clear), rs1=buffer addr reg,
          mode=0 scatter one block word-per-slot / 1 whole block to the
          slot named by imm[3:0]
    ble/bgt/beq  rs1 vs rs2 signed, imm12 = word offset from the branch pc
    ld    rd=destination code, rs1=memory addr reg, rs2=stream length reg,
          imm[11:10]=load unit, (mode<<10 | imm[9:0]) = buffer offset in
          32-byte blocks

LD destination codes: 0..15 WBuf of vMAC (cu*4+v), 16+bank*4+cu one CU's
MBuf bank, 24/25 MBuf broadcast to all CUs (bank 0/1), 26 instruction cache.

The all-zero word is reserved (would be mov r0, r0, 0): encode refuses it
and decode faults, so control flow that escapes into zero-padded cache
lines fails loudly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

OPCODES = ("mov", "movi", "add", "addi", "mul", "muli", "mac", "max",
           "vmov", "ble", "bgt", "beq", "ld")
OPNUM = {name: i for i, name in enumerate(OPCODES)}

VMOV_TARGETS = ("bias", "bypass", "clear")

MAGIC = b"ACB1"


class FieldError(ValueError):
    """An instruction field is out of its encodable range."""


class DecodeError(ValueError):
    """A 32-bit word does not name a valid instruction."""


class AsmError(ValueError):
    """Assembly text error, message carries the line number."""


@dataclass(frozen=True)
class Instr:
    op: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0
    mode: int = 0

    # -- semantic accessors ------------------------------------------------
    @property
    def trace(self) -> int:
        return self.imm & 0x7FF

    @property
    def writeback(self) -> bool:
        return bool(self.imm >> 11)

    @property
    def shamt(self) -> int:
        return self.rs2

    @property
    def indp(self) -> bool:
        return bool(self.mode)

    @property
    def vmov_target(self) -> str:
        return VMOV_TARGETS[self.rd]

    @property
    def slot_mode(self) -> bool:
        return bool(self.mode)

    @property
    def word_select(self) -> int:
        return self.imm & 0xF

    @property
    def ld_unit(self) -> int:
        return (self.imm >> 10) & 0x3

    @property
    def ld_block(self) -> int:
        return (self.mode << 10) | (self.imm & 0x3FF)

    @property
    def ld_offset(self) -> int:
        return self.ld_block * 32

    @property
    def is_vector(self) -> bool:
        return self.op in ("mac", "max", "vmov")

    @property
    def is_branch(self) -> bool:
        return self.op in ("ble", "bgt", "beq")


# ---------------------------------------------------------------- builders

def _ckreg(name, v):
    if not 0 <= v < 32:
        raise FieldError(f"{name} {v} out of range 0..31")
    return v


def _cksigned(name, v, bits):
    lim = 1 << (bits - 1)
    if not -lim <= v < lim:
        raise FieldError(f"{name} {v} out of {bits}-bit signed range")
    return v


def mov(rd, rs1, shamt=0) -> Instr:
    _ckreg("rd", rd), _ckreg("rs1", rs1)
    if not 0 <= shamt < 32:
        raise FieldError(f"shamt {shamt} out of range 0..31")
    if rd == 0 and rs1 == 0 and shamt == 0:
        raise FieldError("mov r0, r0, 0 encodes the reserved all-zero word")
    return Instr("mov", rd=rd, rs1=rs1, rs2=shamt)


def movi(rd, imm) -> Instr:
    _ckreg("rd", rd)
    _cksigned("imm", imm, 23)
    return Instr("movi", rd=rd, imm=imm)


def add(rd, rs1, rs2) -> Instr:
    return Instr("add", rd=_ckreg("rd", rd), rs1=_ckreg("rs1", rs1),
                 rs2=_ckreg("rs2", rs2))


def addi(rd, rs1, imm) -> Instr:
    return Instr("addi", rd=_ckreg("rd", rd), rs1=_ckreg("rs1", rs1),
                 imm=_cksigned("imm", imm, 12))


def mul(rd, rs1, rs2) -> Instr:
    return Instr("mul", rd=_ckreg("rd", rd), rs1=_ckreg("rs1", rs1),
                 rs2=_ckreg("rs2", rs2))


def muli(rd, rs1, imm) -> Instr:
    return Instr("muli", rd=_ckreg("rd", rd), rs1=_ckreg("rs1", rs1),
                 imm=_cksigned("imm", imm, 12))


def mac(mode, maps_reg, weights_reg, trace, writeback=False) -> Instr:
    if mode not in ("coop", "indp"):
        raise FieldError(f"mac mode {mode!r}")
    if not 1 <= trace <= 2047:
        raise FieldError(f"trace {trace} out of range 1..2047")
    return Instr("mac", rs1=_ckreg("maps_reg", maps_reg),
                 rs2=_ckreg("weights_reg", weights_reg),
                 imm=(int(bool(writeback)) << 11) | trace,
                 mode=int(mode == "indp"))


def max_(maps_reg, trace, writeback=False) -> Instr:
    if not 1 <= trace <= 2047:
        raise FieldError(f"trace {trace} out of range 1..2047")
    return Instr("max", rs1=_ckreg("maps_reg", maps_reg),
                 imm=(int(bool(writeback)) << 11) | trace)


def vmov(target, addr_reg, word=0, slot_mode=False) -> Instr:
    if target not in VMOV_TARGETS:
        raise FieldError(f"vmov target {target!r}")
    if not 0 <= word < 16:
        raise FieldError(f"word select {word} out of range 0..15")
    return Instr("vmov", rd=VMOV_TARGETS.index(target),
                 rs1=_ckreg("addr_reg", addr_reg), imm=word,
                 mode=int(bool(slot_mode)))


def ble(rs1, rs2, offset) -> Instr:
    return Instr("ble", rs1=_ckreg("rs1", rs1), rs2=_ckreg("rs2", rs2),
                 imm=_cksigned("offset", offset, 12))


def bgt(rs1, rs2, offset) -> Instr:
    return Instr("bgt", rs1=_ckreg("rs1", rs1), rs2=_ckreg("rs2", rs2),
                 imm=_cksigned("offset", offset, 12))


def beq(rs1, rs2, offset) -> Instr:
    return Instr("beq", rs1=_ckreg("rs1", rs1), rs2=_ckreg("rs2", rs2),
                 imm=_cksigned("offset", offset, 12))


def ld_wbuf(cu, v) -> int:
    return cu * 4 + v


def ld_mbuf(cu, bank) -> int:
    return 16 + bank * 4 + cu


def ld_mbuf_bcast(bank) -> int:
    return 24 + bank


def ld_icache() -> int:
    return 26


def ld(dest, mem_reg, len_reg, block, unit) -> Instr:
    if not 0 <= dest <= 26:
        raise FieldError(f"ld destination code {dest} out of range")
    if not 0 <= block < 2048:
        raise FieldError(f"buffer block {block} out of range 0..2047")
    if not 0 <= unit < 4:
        raise FieldError(f"load unit {unit} out of range 0..3")
    return Instr("ld", rd=dest, rs1=_ckreg("mem_reg", mem_reg),
                 rs2=_ckreg("len_reg", len_reg),
                 imm=(unit << 10) | (block & 0x3FF), mode=block >> 10)


def nop() -> Instr:
    return addi(0, 0, 0)


# ---------------------------------------------------------------- codec

_SIGNED_IMM_OPS = ("addi", "muli", "ble", "bgt", "beq")


def encode(i: Instr) -> int:
    if i.op == "movi":
        return (OPNUM["movi"] << 28) | (i.rd << 23) | (i.imm & 0x7FFFFF)
    word = ((OPNUM[i.op] << 28) | (i.mode << 27) | (i.rd << 22)
            | (i.rs1 << 17) | (i.rs2 << 12) | (i.imm & 0xFFF))
    if word == 0:
        raise FieldError("refusing to encode the reserved all-zero word")
    return word


def decode(word: int) -> Instr:
    if word == 0:
        raise DecodeError("reserved all-zero word")
    opnum = (word >> 28) & 0xF
    if opnum >= len(OPCODES):
        raise DecodeError(f"unknown opcode {opnum} in word {word:#010x}")
    op = OPCODES[opnum]
    if op == "movi":
        imm = word & 0x7FFFFF
        if imm & 0x400000:
            imm -= 1 << 23
        return Instr("movi", rd=(word >> 23) & 0x1F, imm=imm)
    imm = word & 0xFFF
    if op in _SIGNED_IMM_OPS and imm & 0x800:
        imm -= 1 << 12
    mode = (word >> 27) & 1
    rd = (word >> 22) & 0x1F
    rs1 = (word >> 17) & 0x1F
    rs2 = (word >> 12) & 0x1F
    if op == "mac" and (imm & 0x7FF) == 0:
        raise DecodeError("mac with zero trace length")
    if op == "max" and (imm & 0x7FF) == 0:
        raise DecodeError("max with zero trace length")
    if op == "vmov" and rd >= len(VMOV_TARGETS):
        raise DecodeError(f"vmov target code {rd}")
    if op == "ld" and ((mode << 10) | 0) == 0 and rd > 26:
        raise DecodeError(f"ld destination code {rd}")
    if op == "ld" and rd > 26:
        raise DecodeError(f"ld destination code {rd}")
    return Instr(op, rd=rd, rs1=rs1, rs2=rs2, imm=imm, mode=mode)


# ---------------------------------------------------------------- assembly

def _dest_name(code: int) -> str:
    if code < 16:
        return f"w{code // 4}v{code % 4}"
    if code < 24:
        return f"m{(code - 16) % 4}b{(code - 16) // 4}"
    if code < 26:
        return f"mb{code - 24}"
    return "ic"


def _dest_code(name: str) -> int:
    if name == "ic":
        return 26
    if name.startswith("mb"):
        return 24 + int(name[2:])
    if name.startswith("m"):
        cu, bank = name[1:].split("b")
        return 16 + int(bank) * 4 + int(cu)
    if name.startswith("w"):
        cu, v = name[1:].split("v")
        return int(cu) * 4 + int(v)
    raise ValueError(name)


def asm_print_one(i: Instr) -> str:
    op = i.op
    if op == "mov":
        return f"mov r{i.rd}, r{i.rs1}, {i.shamt}"
    if op == "movi":
        return f"movi r{i.rd}, {i.imm}"
    if op in ("add", "mul"):
        return f"{op} r{i.rd}, r{i.rs1}, r{i.rs2}"
    if op in ("addi", "muli"):
        return f"{op} r{i.rd}, r{i.rs1}, {i.imm}"
    if op == "mac":
        tag = "indp" if i.indp else "coop"
        wb = ".wb" if i.writeback else ""
        return f"mac.{tag}{wb} r{i.rs1}, r{i.rs2}, {i.trace}"
    if op == "max":
        wb = ".wb" if i.writeback else ""
        return f"max{wb} r{i.rs1}, {i.trace}"
    if op == "vmov":
        slot = ".slot" if i.slot_mode else ""
        return f"vmov.{i.vmov_target}{slot} r{i.rs1}, {i.word_select}"
    if op in ("ble", "bgt", "beq"):
        return f"{op} r{i.rs1}, r{i.rs2}, {i.imm}"
    return (f"ld.{_dest_name(i.rd)} r{i.rs1}, r{i.rs2}, "
            f"@{i.ld_block}, u{i.ld_unit}")


def asm_print(instrs) -> str:
    return "\n".join(asm_print_one(i) for i in instrs) + "\n"


def _parse_reg(tok: str, lineno: int) -> int:
    if not tok.startswith("r") or not tok[1:].isdigit() or int(tok[1:]) > 31:
        raise AsmError(f"line {lineno}: bad register {tok!r}")
    return int(tok[1:])


def asm_parse(text: str):
    """Parse assembly text; labels (.name:) resolve to branch pc offsets."""
    lines = []
    labels = {}
    pc = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";")[0].split("#")[0].strip()
        if not line:
            continue
        if line.endswith(":"):
            labels[line[:-1]] = pc
            continue
        lines.append((lineno, pc, line))
        pc += 1
    out = []
    for lineno, pc, line in lines:
        head, _, rest = line.partition(" ")
        args = [a.strip() for a in rest.split(",")] if rest.strip() else []
        out.append(_parse_one(head, args, pc, labels, lineno))
    return out


def _parse_one(head, args, pc, labels, lineno):
    parts = head.split(".")
    op = parts[0]
    try:
        if op == "mov" and len(parts) == 1:
            return mov(_parse_reg(args[0], lineno), _parse_reg(args[1], lineno),
                       int(args[2]) if len(args) > 2 else 0)
        if op == "movi":
            return movi(_parse_reg(args[0], lineno), int(args[1]))
        if op in ("add", "mul"):
            f = add if op == "add" else mul
            return f(*(_parse_reg(a, lineno) for a in args))
        if op in ("addi", "muli"):
            f = addi if op == "addi" else muli
            return f(_parse_reg(args[0], lineno), _parse_reg(args[1], lineno),
                     int(args[2]))
        if op == "mac":
            mode = parts[1]
            wb = len(parts) > 2 and parts[2] == "wb"
            return mac(mode, _parse_reg(args[0], lineno),
                       _parse_reg(args[1], lineno), int(args[2]), writeback=wb)
        if op == "max":
            wb = len(parts) > 1 and parts[1] == "wb"
            return max_(_parse_reg(args[0], lineno), int(args[1]), writeback=wb)
        if op == "vmov":
            slot = len(parts) > 2 and parts[2] == "slot"
            return vmov(parts[1], _parse_reg(args[0], lineno), int(args[1]),
                        slot_mode=slot)
        if op in ("ble", "bgt", "beq"):
            f = {"ble": ble, "bgt": bgt, "beq": beq}[op]
            tgt = args[2]
            if tgt.startswith("."):
                if tgt[1:] not in labels and tgt not in labels:
                    raise AsmError(f"line {lineno}: undefined label {tgt}")
                off = labels.get(tgt[1:], labels.get(tgt)) - pc
            else:
                off = int(tgt)
            return f(_parse_reg(args[0], lineno), _parse_reg(args[1], lineno), off)
        if op == "ld" and len(parts) == 2:
            dest = _dest_code(parts[1])
            block = args[2]
            unit = args[3]
            if not block.startswith("@") or not unit.startswith("u"):
                raise AsmError(f"line {lineno}: ld wants '@block, uN' operands")
            return ld(dest, _parse_reg(args[0], lineno),
                      _parse_reg(args[1], lineno), int(block[1:]), int(unit[1:]))
    except AsmError:
        raise
    except (ValueError, IndexError, KeyError, FieldError) as e:
        raise AsmError(f"line {lineno}: {e}") from None
    raise AsmError(f"line {lineno}: unknown mnemonic {head!r}")


# ---------------------------------------------------------------- banks

def encode_banks(banks, entry_bank=0) -> bytes:
    """Pack word banks into the binary container (512 words each, padded)."""
    out = [struct.pack("<4sIIHH", MAGIC, 1, len(banks), entry_bank, 0)]
    for bank in banks:
        if len(bank) > 512:
            raise FieldError(f"bank of {len(bank)} words exceeds 512")
        padded = list(bank) + [0] * (512 - len(bank))
        out.append(struct.pack(f"<{512}I", *padded))
    return b"".join(out)


def decode_banks(blob: bytes):
    magic, version, nbanks, entry, _ = struct.unpack_from("<4sIIHH", blob, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}")
    if version != 1:
        raise DecodeError(f"unsupported container version {version}")
    banks = []
    off = 16
    for _ in range(nbanks):
        banks.append(list(struct.unpack_from(f"<{512}I", blob, off)))
        off += 512 * 4
    return banks, entry


def disasm(words, base=0) -> str:
    """One line per word: address, hex, mnemonic (or raw for pad words)."""
    lines = []
    for i, w in enumerate(words):
        try:
            text = asm_print_one(decode(w))
        except DecodeError:
            text = ".word 0" if w == 0 else f".word {w:#010x}"
        lines.append(f"{base + i:5d}: {w:08x}  {text}")
    return "\n".join(lines) + "\n"
