"""Fixed-point arithmetic and golden layer executor tests.

The reference values here are frozen from an independent pure-Python oracle
(defined below with no numpy and no imports from the package numerics), so the
package implementation is checked against arithmetic it does not share.
"""

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accelc import fxp
from accelc.model_ir import LayerNode


# ---------------------------------------------------------------- oracle

def oracle_q88(x):
    scaled = x * 256.0
    n = math.floor(abs(scaled) + 0.5)
    n = n if scaled >= 0 else -n
    return max(-32768, min(32767, n))


def oracle_writeback(acc, relu=False):
    v = acc >> 8  # python ints shift with floor semantics
    v = max(-32768, min(32767, v))
    return max(0, v) if relu else v


def oracle_dot(m, w):
    return sum(int(a) * int(b) for a, b in zip(m, w))


def oracle_conv(x, w, b, sy, sx, pad, relu, bypass=None):
    """Dense big-integer convolution, nested loops, no numpy."""
    c, ih, iw = len(x), len(x[0]), len(x[0][0])
    o, kh, kw = len(w), len(w[0][0]), len(w[0][0][0])
    oh = (ih + 2 * pad - kh) // sy + 1
    ow = (iw + 2 * pad - kw) // sx + 1
    out = [[[0] * ow for _ in range(oh)] for _ in range(o)]
    for oc in range(o):
        for y in range(oh):
            for xx in range(ow):
                acc = int(b[oc]) << 8
                for ic in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            yy = y * sy + i - pad
                            xj = xx * sx + j - pad
                            if 0 <= yy < ih and 0 <= xj < iw:
                                acc += int(x[ic][yy][xj]) * int(w[oc][ic][i][j])
                if bypass is not None:
                    acc += int(bypass[oc][y][xx]) << 8
                out[oc][y][xx] = oracle_writeback(acc, relu)
    return out


# ---------------------------------------------------------------- quantize

def test_quantize_frozen_values():
    assert fxp.q88_quantize(1.5) == 384
    assert fxp.q88_quantize(200.0) == 32767
    assert fxp.q88_quantize(-200.0) == -32768
    # 0.001953 * 256 = 0.499968 rounds down; one half-LSB up rounds away
    assert fxp.q88_quantize(0.001953) == 0
    assert fxp.q88_quantize(0.001953125) == 1
    assert fxp.q88_quantize(-0.001953125) == -1
    assert fxp.q88_quantize(0.0) == 0
    assert fxp.q88_quantize(127.99609375) == 32767


@given(st.floats(min_value=-300, max_value=300, allow_nan=False))
def test_quantize_matches_oracle(x):
    assert fxp.q88_quantize(x) == oracle_q88(x)


def test_quantize_array():
    xs = np.array([1.5, -1.5, 0.001953, 200.0, -200.0])
    got = fxp.q88_quantize(xs)
    assert got.dtype == np.int16
    assert list(got) == [384, -384, 0, 32767, -32768]


def test_to_float_roundtrip():
    for raw in (-32768, -1, 0, 1, 384, 32767):
        assert fxp.q88_quantize(fxp.q88_to_float(raw)) == raw


# ---------------------------------------------------------------- mac_reduce

def test_mac_reduce_frozen():
    one = fxp.q88_quantize(1.0)
    half = fxp.q88_quantize(0.5)
    assert fxp.mac_reduce([one], [one]) == 65536
    assert fxp.mac_reduce([half, half], [one, -one]) == 0


def test_mac_reduce_random_against_bigint():
    rng = random.Random(7)
    for _ in range(50):
        n = rng.randrange(1, 64)
        m = [rng.randrange(-32768, 32768) for _ in range(n)]
        w = [rng.randrange(-32768, 32768) for _ in range(n)]
        assert fxp.mac_reduce(m, w) == oracle_dot(m, w)


def test_mac_reduce_order_independent():
    rng = random.Random(11)
    m = [rng.randrange(-32768, 32768) for _ in range(27)]
    w = [rng.randrange(-32768, 32768) for _ in range(27)]
    perm = list(range(27))
    rng.shuffle(perm)
    assert fxp.mac_reduce(m, w) == fxp.mac_reduce([m[i] for i in perm],
                                                  [w[i] for i in perm])


# ---------------------------------------------------------------- writeback

def test_writeback_frozen():
    assert fxp.writeback(65536, relu=False) == 256
    assert fxp.writeback(-1, relu=False) == -1
    assert fxp.writeback(-65536, relu=True) == 0
    assert fxp.writeback(255, relu=False) == 0
    assert fxp.writeback(-255, relu=False) == -1
    assert fxp.writeback(1 << 30, relu=False) == 32767
    assert fxp.writeback(-(1 << 30), relu=False) == -32768


@given(st.integers(min_value=-(1 << 40), max_value=1 << 40), st.booleans())
def test_writeback_matches_oracle(acc, relu):
    assert fxp.writeback(acc, relu) == oracle_writeback(acc, relu)


def test_writeback_array():
    accs = np.array([65536, -1, -65536, 255], dtype=np.int64)
    assert list(fxp.writeback_array(accs, relu=False)) == [256, -1, -256, 0]
    assert list(fxp.writeback_array(accs, relu=True)) == [256, 0, 0, 0]


# ---------------------------------------------------------------- tensors

def test_tensor_channel_major_bytes():
    # dims (c=2, h=1, w=2): pixel (0,0) channels first, then pixel (0,1)
    t = fxp.Tensor.from_chw(np.array([[[1, 2]], [[3, 4]]], dtype=np.int16))
    assert t.dims == (2, 1, 2)
    assert list(t.ravel()) == [1, 3, 2, 4]
    back = fxp.Tensor.frombytes(t.tobytes(), t.dims)
    assert np.array_equal(back.chw(), t.chw())


def test_tensor_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    arr = rng.integers(-1000, 1000, size=(3, 4, 5), dtype=np.int16)
    t = fxp.Tensor.from_chw(arr)
    path = tmp_path / "out.bin"
    t.dump(path)
    t2 = fxp.Tensor.load(path)
    assert t2.dims == (3, 4, 5)
    assert np.array_equal(t2.chw(), arr)


# ---------------------------------------------------------------- ref_layer

def _conv_node(**kw):
    base = dict(id=0, kind="Conv", kh=3, kw=3, sy=1, sx=1, pad=0,
                in_ch=4, out_ch=2, relu=False,
                weights_ref="w", bias_ref="b", in_h=5, in_w=5)
    base.update(kw)
    n = LayerNode(**base)
    n.infer_output()
    return n


def _rand_q88(rng, shape):
    return rng.integers(-2048, 2048, size=shape, dtype=np.int16)


def test_identity_conv():
    node = _conv_node(kh=1, kw=1, in_ch=3, out_ch=3, in_h=4, in_w=4)
    rng = np.random.default_rng(0)
    x = fxp.Tensor.from_chw(_rand_q88(rng, (3, 4, 4)))
    w = np.zeros((3, 3, 1, 1), dtype=np.int16)
    for i in range(3):
        w[i, i, 0, 0] = 256  # 1.0
    b = np.zeros(3, dtype=np.int16)
    out = fxp.ref_layer(node, x, {"w": w, "b": b})
    assert np.array_equal(out.chw(), x.chw())


def test_conv_matches_bigint_oracle():
    rng = np.random.default_rng(42)
    for pad, sy, sx, relu in [(0, 1, 1, False), (1, 1, 1, True), (2, 2, 1, False),
                              (0, 2, 2, True), (1, 2, 3, False)]:
        node = _conv_node(pad=pad, sy=sy, sx=sx, relu=relu, in_h=7, in_w=8)
        x = fxp.Tensor.from_chw(_rand_q88(rng, (4, 7, 8)))
        w = _rand_q88(rng, (2, 4, 3, 3))
        b = _rand_q88(rng, (2,))
        out = fxp.ref_layer(node, x, {"w": w, "b": b})
        want = oracle_conv(x.chw().tolist(), w.tolist(), b.tolist(),
                           sy, sx, pad, relu)
        assert out.chw().tolist() == want, (pad, sy, sx, relu)


def test_conv_zero_weights_gives_bias():
    node = _conv_node(pad=1)
    rng = np.random.default_rng(5)
    x = fxp.Tensor.from_chw(_rand_q88(rng, (4, 5, 5)))
    w = np.zeros((2, 4, 3, 3), dtype=np.int16)
    b = np.array([300, -300], dtype=np.int16)
    out = fxp.ref_layer(node, x, {"w": w, "b": b}).chw()
    assert (out[0] == 300).all() and (out[1] == -300).all()


def test_conv_bypass_attachment():
    node = _conv_node(pad=1, in_ch=2, out_ch=2, in_h=4, in_w=4, relu=True)
    node.bypass_source = 99
    rng = np.random.default_rng(9)
    x = fxp.Tensor.from_chw(_rand_q88(rng, (2, 4, 4)))
    w = _rand_q88(rng, (2, 2, 3, 3))
    b = _rand_q88(rng, (2,))
    byp = fxp.Tensor.from_chw(_rand_q88(rng, (2, 4, 4)))
    out = fxp.ref_layer(node, x, {"w": w, "b": b}, bypass=byp)
    want = oracle_conv(x.chw().tolist(), w.tolist(), b.tolist(), 1, 1, 1, True,
                       bypass=byp.chw().tolist())
    assert out.chw().tolist() == want
    assert (out.chw() >= 0).all()


def test_maxpool_tiny():
    node = LayerNode(id=0, kind="MaxPool", kh=2, kw=2, sy=2, sx=2, pad=0,
                     in_ch=1, out_ch=1, in_h=2, in_w=2)
    node.infer_output()
    x = fxp.Tensor.from_chw(np.array([[[1, 2], [3, 4]]], dtype=np.int16))
    out = fxp.ref_layer(node, x, {})
    assert out.chw().tolist() == [[[4]]]


def test_maxpool_window_intersection():
    # padded positions must not contribute (all-negative input stays negative)
    node = LayerNode(id=0, kind="MaxPool", kh=3, kw=3, sy=2, sx=2, pad=1,
                     in_ch=2, out_ch=2, in_h=5, in_w=5)
    node.infer_output()
    rng = np.random.default_rng(13)
    arr = rng.integers(-3000, -1, size=(2, 5, 5), dtype=np.int16)
    out = fxp.ref_layer(node, fxp.Tensor.from_chw(arr), {}).chw()
    assert (out < 0).all()
    # brute-force check
    for c in range(2):
        for y in range(node.out_h):
            for x in range(node.out_w):
                vals = [arr[c, yy, xx]
                        for yy in range(y * 2 - 1, y * 2 + 2)
                        for xx in range(x * 2 - 1, x * 2 + 2)
                        if 0 <= yy < 5 and 0 <= xx < 5]
                assert out[c, y, x] == max(vals)


def test_avgpool_matches_quantized_weight_conv():
    node = LayerNode(id=0, kind="AvgPool", kh=2, kw=2, sy=2, sx=2, pad=0,
                     in_ch=3, out_ch=3, in_h=6, in_w=6)
    node.infer_output()
    rng = np.random.default_rng(17)
    arr = _rand_q88(rng, (3, 6, 6))
    out = fxp.ref_layer(node, fxp.Tensor.from_chw(arr), {}).chw()
    q = oracle_q88(1.0 / 4)
    for c in range(3):
        for y in range(3):
            for x in range(3):
                acc = sum(int(arr[c, yy, xx]) * q
                          for yy in range(2 * y, 2 * y + 2)
                          for xx in range(2 * x, 2 * x + 2))
                assert out[c, y, x] == oracle_writeback(acc)


def test_avgpool_close_to_float_average():
    node = LayerNode(id=0, kind="AvgPool", kh=3, kw=3, sy=3, sx=3, pad=0,
                     in_ch=1, out_ch=1, in_h=9, in_w=9)
    node.infer_output()
    rng = np.random.default_rng(19)
    arr = _rand_q88(rng, (1, 9, 9))
    out = fxp.ref_layer(node, fxp.Tensor.from_chw(arr), {}).chw()
    n = 9
    qerr = abs(1.0 / n - oracle_q88(1.0 / n) / 256.0)
    bound = n * qerr * float(np.abs(arr).max()) + (1 / 256.0)
    for y in range(3):
        for x in range(3):
            mean = arr[0, 3 * y:3 * y + 3, 3 * x:3 * x + 3].astype(float).mean() / 256
            assert abs(out[0, y, x] / 256.0 - mean) <= bound + 1e-9


def test_fc_flattens_channel_major():
    node = LayerNode(id=0, kind="FullyConnected", in_ch=8, out_ch=3,
                     weights_ref="w", bias_ref="b", in_h=1, in_w=1)
    node.kh = node.kw = node.sy = node.sx = 1
    node.infer_output()
    rng = np.random.default_rng(23)
    x = fxp.Tensor.from_chw(_rand_q88(rng, (2, 2, 2)))  # 8 features
    w = _rand_q88(rng, (3, 8))
    b = _rand_q88(rng, (3,))
    out = fxp.ref_layer(node, x, {"w": w, "b": b}).chw()
    feats = x.ravel()  # channel-major flatten is the contract
    for o in range(3):
        acc = (int(b[o]) << 8) + oracle_dot(feats, w[o])
        assert out[o, 0, 0] == oracle_writeback(acc)


def test_relu_outputs_nonnegative():
    rng = np.random.default_rng(29)
    node = _conv_node(relu=True, pad=1)
    x = fxp.Tensor.from_chw(_rand_q88(rng, (4, 5, 5)))
    w = _rand_q88(rng, (2, 4, 3, 3))
    b = _rand_q88(rng, (2,))
    out = fxp.ref_layer(node, x, {"w": w, "b": b})
    assert (out.chw() >= 0).all()


# ---------------------------------------------------------------- archive

def test_weight_archive_f32_and_q88(tmp_path):
    from accelc.model_ir import parse_model
    import json
    doc = {"input": [2, 3, 3], "weights": str(tmp_path / "arch"),
           "weights_dtype": "f32",
           "layers": [{"id": 0, "kind": "Conv", "kh": 1, "kw": 1, "sy": 1,
                       "sx": 1, "pad": 0, "in_ch": 2, "out_ch": 2,
                       "relu": False, "weights_ref": "w0", "bias_ref": "b0"}]}
    arch = tmp_path / "arch"
    arch.mkdir()
    wf = np.array([1.5, -0.25, 0.001953, 2.0], dtype="<f4")
    bf = np.array([0.5, -0.5], dtype="<f4")
    wf.tofile(arch / "w0")
    bf.tofile(arch / "b0")
    g = parse_model(json.dumps(doc))
    tensors = fxp.load_weight_archive(g)
    assert tensors["w0"].shape == (2, 2, 1, 1)
    assert tensors["w0"].ravel().tolist() == [384, -64, 0, 512]
    assert tensors["b0"].tolist() == [128, -128]

    doc["weights_dtype"] = "q88"
    np.array([384, -64, 0, 512], dtype="<i2").tofile(arch / "w0")
    np.array([128, -128], dtype="<i2").tofile(arch / "b0")
    g = parse_model(json.dumps(doc))
    tensors = fxp.load_weight_archive(g)
    assert tensors["w0"].ravel().tolist() == [384, -64, 0, 512]
