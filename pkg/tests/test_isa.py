"""Instruction encoding, decoding and assembly round-trip tests.

Frozen words below were computed by hand from the field layout:
common form op[31:28] mode[27] rd[26:22] rs1[21:17] rs2[16:12] imm[11:0],
MOVI form op[31:28] rd[27:23] imm[22:0].
"""

import random

import pytest

from accelc import isa
from accelc.isa import (DecodeError, FieldError, Instr, asm_parse, asm_print,
                        decode, encode)


def test_opcode_table():
    assert [isa.OPCODES[i] for i in range(13)] == [
        "mov", "movi", "add", "addi", "mul", "muli", "mac", "max",
        "vmov", "ble", "bgt", "beq", "ld"]


def test_frozen_words():
    assert encode(isa.movi(0, 0)) == 0x10000000
    assert encode(isa.addi(1, 1, -1)) == 0x30420FFF
    assert encode(isa.beq(0, 0, 4)) == 0xB0000004
    assert encode(isa.mac("coop", maps_reg=2, weights_reg=3, trace=16,
                          writeback=True)) == 0x60043810
    assert encode(isa.movi(1, -1)) == 0x10FFFFFF


def test_zero_word_reserved():
    with pytest.raises(FieldError):
        encode(isa.mov(0, 0, 0))
    with pytest.raises(DecodeError):
        decode(0)
    # any other mov is fine
    assert decode(encode(isa.mov(0, 1, 0))) == isa.mov(0, 1, 0)


def test_unknown_opcodes_fault():
    for op in (13, 14, 15):
        with pytest.raises(DecodeError):
            decode(op << 28)


def test_movi_sign_extension():
    w = encode(isa.movi(3, -(1 << 22)))
    assert decode(w).imm == -(1 << 22)
    with pytest.raises(FieldError):
        isa.movi(3, 1 << 22)  # out of 23-bit two's complement range


def test_field_overflow_checks():
    with pytest.raises(FieldError):
        isa.addi(1, 1, 2048)
    with pytest.raises(FieldError):
        isa.addi(1, 1, -2049)
    with pytest.raises(FieldError):
        isa.mac("coop", 1, 2, trace=2048)
    with pytest.raises(FieldError):
        isa.mac("coop", 1, 2, trace=0)
    with pytest.raises(FieldError):
        isa.mov(1, 1, 32)
    with pytest.raises(FieldError):
        isa.ld(isa.ld_wbuf(0, 0), 1, 2, block=2048, unit=0)
    with pytest.raises(FieldError):
        isa.ld(isa.ld_wbuf(0, 0), 1, 2, block=0, unit=4)


def _random_instr(rng):
    op = rng.choice(isa.OPCODES)
    r = lambda: rng.randrange(32)
    if op == "mov":
        while True:
            rd, rs1, sh = r(), r(), rng.randrange(32)
            if (rd, rs1, sh) != (0, 0, 0):
                return isa.mov(rd, rs1, sh)
    if op == "movi":
        return isa.movi(r(), rng.randrange(-(1 << 22), 1 << 22))
    if op in ("add", "mul"):
        return getattr(isa, op)(r(), r(), r())
    if op in ("addi", "muli"):
        return getattr(isa, op)(r(), r(), rng.randrange(-2048, 2048))
    if op == "mac":
        return isa.mac(rng.choice(["coop", "indp"]), r(), r(),
                       trace=rng.randrange(1, 2048), writeback=rng.random() < 0.5)
    if op == "max":
        return isa.max_(r(), trace=rng.randrange(1, 2048),
                        writeback=rng.random() < 0.5)
    if op == "vmov":
        return isa.vmov(rng.choice(["bias", "bypass", "clear"]), r(),
                        word=rng.randrange(16), slot_mode=rng.random() < 0.5)
    if op in ("ble", "bgt", "beq"):
        return getattr(isa, op)(r(), r(), rng.randrange(-2048, 2048))
    dest = rng.choice([isa.ld_wbuf(rng.randrange(4), rng.randrange(4)),
                       isa.ld_mbuf(rng.randrange(4), rng.randrange(2)),
                       isa.ld_mbuf_bcast(rng.randrange(2)),
                       isa.ld_icache()])
    return isa.ld(dest, r(), r(), block=rng.randrange(2048), unit=rng.randrange(4))


def test_roundtrip_100k_random():
    rng = random.Random(1234)
    for _ in range(100_000):
        i = _random_instr(rng)
        assert decode(encode(i)) == i


def test_every_opcode_roundtrips():
    samples = [isa.mov(1, 2, 3), isa.movi(4, 5), isa.add(6, 7, 8),
               isa.addi(9, 10, 11), isa.mul(12, 13, 14), isa.muli(15, 16, 17),
               isa.mac("indp", 18, 19, trace=20), isa.max_(21, trace=22),
               isa.vmov("bypass", 23, word=3), isa.ble(24, 25, 26),
               isa.bgt(27, 28, -29), isa.beq(30, 31, 0),
               isa.ld(isa.ld_icache(), 1, 2, block=100, unit=1)]
    assert len({i.op for i in samples}) == 13
    for i in samples:
        assert decode(encode(i)) == i


# ---------------------------------------------------------------- assembly

def test_asm_simple():
    prog = asm_parse("movi r5, 1024")
    assert prog == [isa.movi(5, 1024)]


def test_asm_mac_mnemonic():
    prog = asm_parse("mac.coop.wb r2, r3, 16")
    assert prog == [isa.mac("coop", 2, 3, trace=16, writeback=True)]
    assert asm_parse("mac.indp r2, r3, 5") == [isa.mac("indp", 2, 3, trace=5)]


def test_asm_label_backward():
    text = """
    .loop:
    addi r1, r1, 1
    addi r2, r2, 1
    addi r3, r3, 1
    addi r4, r4, 1
    beq r0, r0, .loop
    """
    prog = asm_parse(text)
    assert prog[-1] == isa.beq(0, 0, -4)


def test_asm_label_forward():
    text = "bgt r1, r0, .done\naddi r1, r1, -1\n.done:\nmovi r9, 0"
    prog = asm_parse(text)
    assert prog[0] == isa.bgt(1, 0, 2)


def test_asm_errors():
    with pytest.raises(isa.AsmError, match="line 1"):
        asm_parse("frobnicate r1")
    with pytest.raises(isa.AsmError, match="undefined label"):
        asm_parse("beq r0, r0, .nowhere")


def test_asm_print_parse_identity():
    rng = random.Random(99)
    prog = [_random_instr(rng) for _ in range(300)]
    text = asm_print(prog)
    assert asm_parse(text) == prog


# ---------------------------------------------------------------- binary

def test_program_container_roundtrip():
    rng = random.Random(5)
    words = [encode(_random_instr(rng)) for _ in range(700)]
    banks = [words[:512], words[512:]]
    blob = isa.encode_banks(banks, entry_bank=0)
    assert blob[:4] == isa.MAGIC
    assert len(blob) == 16 + 2 * 512 * 4
    banks2, entry = isa.decode_banks(blob)
    assert entry == 0
    assert banks2[0] == words[:512]
    assert banks2[1] == words[512:] + [0] * (512 - len(words[512:]))


def test_disassembly_mentions_mnemonics():
    text = isa.disasm([encode(isa.movi(5, 7)), encode(isa.beq(0, 0, 0))])
    assert "movi" in text and "beq" in text
