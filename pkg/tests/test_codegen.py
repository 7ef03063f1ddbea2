"""Code generation tests: emitter loops, block prediction, bank linking."""

import json
import random

import pytest

from accelc import codegen, isa
from accelc.codegen import CodegenError, Emitter, compile_plan
from accelc.config import HardwareConfig
from accelc.model_ir import parse_model
from accelc.planner import plan_model
from accelc.verify import verify_program

CFG = HardwareConfig()


def build(doc):
    plan = plan_model(parse_model(json.dumps(doc)), CFG)
    return compile_plan(plan)


def conv_doc(in_ch, out_ch, k, stride=1, pad=0, hw=16, relu=False):
    return {
        "input": [in_ch, hw, hw], "weights": "w",
        "layers": [{"id": 0, "kind": "Conv", "kh": k, "kw": k, "sy": stride,
                    "sx": stride, "pad": pad, "in_ch": in_ch,
                    "out_ch": out_ch, "relu": relu, "weights_ref": "w0",
                    "bias_ref": "b0"}],
    }


def toy_doc():
    return {
        "input": [3, 16, 16], "weights": "w",
        "layers": [
            {"id": 0, "kind": "Conv", "kh": 3, "kw": 3, "sy": 1, "sx": 1,
             "pad": 1, "in_ch": 3, "out_ch": 8, "relu": True,
             "weights_ref": "w0", "bias_ref": "b0"},
            {"id": 1, "kind": "MaxPool", "kh": 2, "kw": 2, "sy": 2,
             "sx": 2, "pad": 0, "in_ch": 8, "out_ch": 8, "relu": False},
            {"id": 2, "kind": "FullyConnected", "kh": 1, "kw": 1, "sy": 1,
             "sx": 1, "pad": 0, "in_ch": 512, "out_ch": 10, "relu": False,
             "weights_ref": "w2", "bias_ref": "b2"},
        ],
    }


class TestEmitterTracking:
    def test_mat_small_and_large(self):
        em = Emitter()
        em.mat(5, 100)
        assert em.val[5] == 100 and len(em.ops) == 1
        em.mat(6, 5_000_000)
        assert em.val[6] == 5_000_000
        em.mat(7, -300_000)
        assert em.val[7] == -300_000

    def test_bump_zero_is_free(self):
        em = Emitter()
        em.mat(5, 10)
        n = len(em.ops)
        em.bump(5, 0)
        assert len(em.ops) == n

    def test_goto_is_absolute(self):
        em = Emitter()
        em.mat(5, 10)
        em.goto(5, 300)
        assert em.val[5] == 300

    def test_vector_auto_increment_folds_in(self):
        em = Emitter()
        em.mat(1, 0)
        em.mat(2, 0)
        em.emit(isa.mac("coop", 1, 2, 3))
        assert em.val[1] == 96 and em.val[2] == 96
        em.emit(isa.mac("indp", 1, 2, 4))
        assert em.val[1] == 96 + 8 and em.val[2] == 96 + 128
        em.emit(isa.max_(1, 2))
        assert em.val[1] == 104 + 64


class TestEmitterLoops:
    def test_single_iteration_inlines(self):
        em = Emitter()
        em.mat(5, 0)
        em.loop(9, 1, lambda: em.bump(5, 4))
        assert not any(i.is_branch for i in em.ops)
        assert em.val[5] == 4

    def test_loop_extrapolates_exit_state(self):
        em = Emitter()
        em.mat(5, 0)
        em.loop(9, 10, lambda: em.bump(5, 4))
        assert em.val[5] == 40
        assert em.val[9] == 0

    def test_loop_shape(self):
        em = Emitter()
        em.mat(5, 0)
        em.loop(9, 6, lambda: em.bump(5, 2))
        branch = [i for i, op in enumerate(em.ops) if op.is_branch]
        assert len(branch) == 1
        b = branch[0]
        # decrement right before the branch, 4 slots after it
        assert em.ops[b - 1] == isa.addi(9, 9, -1)
        assert len(em.ops) == b + 5
        assert em.fixups and em.fixups[-1][0] == b

    def test_delay_slots_hoist_tail_work(self):
        em = Emitter()
        for r in (1, 2, 3, 4, 5):
            em.mat(r, 0)

        def body():
            for r in (1, 2, 3, 4, 5):
                em.bump(r, 8)

        em.loop(9, 5, body)
        b = next(i for i, op in enumerate(em.ops) if op.is_branch)
        slots = em.ops[b + 1:b + 5]
        assert sum(1 for s in slots if s != isa.nop()) > 0
        for r in (1, 2, 3, 4, 5):
            assert em.val[r] == 40

    def test_value_dependent_body_is_rejected(self):
        em = Emitter()
        em.mat(5, 0)
        em.mat(6, 10)

        def body():
            em.bump(6, 5)
            em.emit(isa.add(5, 5, 6))

        with pytest.raises(CodegenError):
            em.loop(9, 4, body)

    def test_unknown_cursor_inside_loop_is_rejected(self):
        em = Emitter()
        with pytest.raises(CodegenError):
            em.loop(9, 4, lambda: em.goto(5, 100))

    def test_nested_loops_extrapolate(self):
        em = Emitter()
        em.mat(5, 0)

        def outer():
            em.loop(8, 3, lambda: em.bump(5, 1))

        em.loop(9, 4, outer)
        assert em.val[5] == 12

    def test_oversized_unit_rejected(self):
        em = Emitter()

        def huge():
            for i in range(520):
                em.emit(isa.addi(1, 0, i % 7))

        with pytest.raises(CodegenError):
            em.unit(huge)


class TestCompiledPrograms:
    def test_toy_prediction_and_writebacks(self):
        prog = build(toy_doc())
        assert prog.block_predicted == prog.block_emitted
        per_layer = {c.layer_id: c.expected_writebacks for c in prog.layers}
        want = {lp.layer_id: lp.expected_writebacks
                for lp in prog.plan.layers}
        assert per_layer == want
        assert prog.expected_writebacks == sum(want.values())

    def test_toy_verifies_clean(self):
        prog = build(toy_doc())
        assert verify_program(prog, CFG) == []

    def test_small_program_is_one_bare_bank(self):
        prog = build(conv_doc(3, 8, 3, pad=1, hw=8))
        assert len(prog.banks) == 1
        ops = [isa.decode(w) for w in prog.banks[0]]
        assert not any(o.op == "ld" and o.rd == 26 for o in ops)
        assert not any(o.op == "beq" and o.rs1 == o.rs2 == 0 for o in ops)

    def test_bank_chain_structure(self):
        doc = {
            "input": [16, 28, 28], "weights": "w",
            "layers": [
                {"id": 0, "kind": "Conv", "kh": 3, "kw": 3, "sy": 1,
                 "sx": 1, "pad": 1, "in_ch": 16, "out_ch": 64,
                 "relu": True, "weights_ref": "w0", "bias_ref": "b0"},
                {"id": 1, "kind": "Conv", "kh": 3, "kw": 3, "sy": 1,
                 "sx": 1, "pad": 1, "in_ch": 64, "out_ch": 64,
                 "relu": True, "weights_ref": "w1", "bias_ref": "b1"},
            ],
        }
        prog = build(doc)
        assert len(prog.banks) >= 2
        for i, bank in enumerate(prog.banks):
            assert len(bank) <= 512
            ops = [isa.decode(w) for w in bank]
            ic_loads = [o for o in ops if o.op == "ld" and o.rd == 26]
            jumps = [(j, o) for j, o in enumerate(ops)
                     if o.op == "beq" and o.rs1 == o.rs2 == 0]
            if i + 1 < len(prog.banks):
                assert len(ic_loads) == 1
                assert len(jumps) == 1
                j, o = jumps[0]
                assert j == len(ops) - 5
                pc = (i % 2) * 512 + j
                assert pc + o.imm == ((i + 1) % 2) * 512
                assert ops[j + 1:] == [isa.nop()] * 4
            else:
                assert not ic_loads and not jumps

    def test_binary_round_trip(self):
        prog = build(toy_doc())
        blob = prog.binary()
        banks, entry = isa.decode_banks(blob)
        assert entry == 0
        for got, want in zip(banks, prog.banks):
            assert got[:len(want)] == list(want)
            assert all(w == 0 for w in got[len(want):])

    def test_compile_is_deterministic(self):
        a = build(toy_doc())
        b = build(toy_doc())
        assert a.banks == b.banks

    def test_disasm_mentions_every_bank(self):
        prog = build(toy_doc())
        text = prog.disasm()
        for i in range(len(prog.banks)):
            assert f"# bank {i}" in text


class TestRandomLayers:
    def test_prediction_and_legality_fuzz(self):
        rng = random.Random(11)
        for _ in range(25):
            in_ch = rng.choice([1, 3, 8, 16, 24])
            hw = rng.choice([6, 8, 14, 16])
            kind = rng.choice(["Conv", "Conv", "MaxPool", "AvgPool",
                               "FullyConnected"])
            if kind == "Conv":
                k = rng.choice([1, 3, 5])
                doc = conv_doc(in_ch, rng.choice([4, 8, 16, 32]), k,
                               stride=rng.choice([1, 2]), pad=k // 2,
                               hw=hw, relu=rng.random() < 0.5)
            elif kind == "FullyConnected":
                doc = {"input": [in_ch * hw * hw, 1, 1], "weights": "w",
                       "layers": [{"id": 0, "kind": kind, "kh": 1, "kw": 1,
                                   "sy": 1, "sx": 1, "pad": 0,
                                   "in_ch": in_ch * hw * hw,
                                   "out_ch": rng.choice([10, 30, 300]),
                                   "relu": False, "weights_ref": "w0",
                                   "bias_ref": "b0"}]}
            else:
                doc = {"input": [in_ch, hw, hw], "weights": "w",
                       "layers": [{"id": 0, "kind": kind, "kh": 2, "kw": 2,
                                   "sy": 2, "sx": 2, "pad": 0,
                                   "in_ch": in_ch, "out_ch": in_ch,
                                   "relu": False}]}
            prog = build(doc)
            assert prog.block_predicted == prog.block_emitted
            assert verify_program(prog, CFG) == []
