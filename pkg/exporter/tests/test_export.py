"""Exporter tests: quantization rule, batch-norm folding, exported graph
structure, and end-to-end agreement with the fixed-point reference."""

import json
import os

import numpy as np
import torch
from torch import nn

import export
from accelc import fxp, model_ir, pipeline
from accelc.cli import main as accelc_main


def load_doc(out_dir):
    with open(os.path.join(out_dir, "model.json")) as f:
        return json.load(f)


def make_toy(tmp_path, seed=3):
    """A 3-layer net whose parameters sit exactly on the Q8.8 grid."""
    torch.manual_seed(seed)
    net = nn.Sequential(
        nn.Conv2d(3, 8, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2, 2),
        nn.Flatten(),
        nn.Linear(8 * 8 * 8, 10),
    )
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.round(p * 256) / 256)
    net.eval()
    path = tmp_path / "toy.pt"
    torch.save(net, path)
    return net, path


class TestQuantizer:
    def test_matches_reference_rule(self):
        rng = np.random.default_rng(11)
        probes = np.concatenate([
            rng.uniform(-200.0, 200.0, 7000),
            rng.integers(-300 * 512, 300 * 512, 3000) / 512.0,  # exact half steps
            np.array([0.0, -0.0, 1 / 512, -1 / 512, 3 / 512, -3 / 512,
                      127.998046875, -128.0, 127.9999, 1e9, -1e9, 0.001]),
        ])
        assert probes.size >= 10000
        got = export.quantize_q88(probes)
        want = fxp.q88_quantize(probes)
        assert got.dtype == np.int16
        assert np.array_equal(got, want)

    def test_saturates(self):
        assert export.quantize_q88(np.array([1000.0]))[0] == 32767
        assert export.quantize_q88(np.array([-1000.0]))[0] == -32768


class TestBatchNormFolding:
    def test_matches_torch_eval(self):
        for seed in range(4):
            torch.manual_seed(seed)
            conv = nn.Conv2d(5, 7, 3, padding=1)
            bn = nn.BatchNorm2d(7)
            with torch.no_grad():
                bn.running_mean.uniform_(-0.4, 0.4)
                bn.running_var.uniform_(0.3, 1.4)
                bn.weight.uniform_(0.6, 1.4)
                bn.bias.uniform_(-0.3, 0.3)
            conv.eval()
            bn.eval()
            w = conv.weight.detach().numpy().astype(np.float64)
            b = conv.bias.detach().numpy().astype(np.float64)
            fw, fb = export.fold_batchnorm(w, b, bn, "t")
            x = torch.randn(2, 5, 9, 9, dtype=torch.float64)
            with torch.no_grad():
                want = bn(conv(x.float())).numpy()
                got = torch.nn.functional.conv2d(
                    x, torch.from_numpy(fw), torch.from_numpy(fb), padding=1).numpy()
            assert np.allclose(got, want, atol=1e-4)

    def test_rejects_unfoldable_norms(self, tmp_path, capsys):
        variants = [
            nn.BatchNorm2d(4, track_running_stats=False),
            nn.BatchNorm2d(4, affine=False),
        ]
        for i, bad_bn in enumerate(variants):
            net = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), bad_bn, nn.ReLU())
            net.eval()
            p = tmp_path / f"m{i}.pt"
            torch.save(net, p)
            rc = export.main(["--model", str(p), "--out", str(tmp_path / f"o{i}"),
                              "--input", "3,8,8"])
            assert rc == 1
            assert "batch norm" in capsys.readouterr().err


EXPECTED_ALEXNET = ["Conv", "MaxPool", "Conv", "MaxPool", "Conv", "Conv", "Conv",
                    "MaxPool", "FullyConnected", "FullyConnected", "FullyConnected"]


class TestAlexNetExport:
    def test_layer_sequence(self, alexnet_dir):
        doc = load_doc(alexnet_dir)
        assert [l["kind"] for l in doc["layers"]] == EXPECTED_ALEXNET
        convs = [l for l in doc["layers"] if l["kind"] == "Conv"]
        assert [c["out_ch"] for c in convs] == [64, 192, 384, 256, 256]
        assert (convs[0]["kh"], convs[0]["sy"], convs[0]["pad"]) == (11, 4, 2)
        assert all(c["relu"] for c in convs)
        fcs = [l for l in doc["layers"] if l["kind"] == "FullyConnected"]
        assert [f["in_ch"] for f in fcs] == [9216, 4096, 4096]
        assert [f["relu"] for f in fcs] == [True, True, False]

    def test_round_trip_validates(self, alexnet_dir):
        g = model_ir.parse_model(json.dumps(load_doc(alexnet_dir)))
        g = model_ir.label_dependencies(model_ir.normalize(g))
        assert model_ir.validate(g) == []
        assert g.layers[-1].out_shape == (1000, 1, 1)

    def test_archive_loads_with_expected_shapes(self, alexnet_dir):
        graph = pipeline.load_model(str(alexnet_dir / "model.json"))
        weights = pipeline.load_weights(graph)
        assert weights["l0.w"].shape == (64, 3, 11, 11)
        assert weights["l0.w"].dtype == np.int16
        assert weights["l8.w"].shape == (4096, 9216)
        assert weights["l10.b"].shape == (1000,)

    def test_first_fc_column_permutation(self, alexnet_dir):
        model, _ = export.load_source("alexnet", 0)
        lin = model.classifier[1]
        w = lin.weight.detach().numpy().astype(np.float64)
        # columns reordered from torch's (c, y, x) flatten to the
        # accelerator's channel-major (y, x, c) pixel order
        w = w.reshape(4096, 256, 6, 6).transpose(0, 2, 3, 1).reshape(4096, 9216)
        want = fxp.q88_quantize(w)
        got = np.fromfile(alexnet_dir / "weights" / "l8.w",
                          dtype="<i2").reshape(4096, 9216)
        assert np.array_equal(got, want)

    def test_manifest(self, alexnet_dir):
        with open(alexnet_dir / "export_manifest.json") as f:
            man = json.load(f)
        assert man["source"] == "alexnet"
        emitted = [r for r in man["modules"] if r["kind"] in model_ir.KINDS]
        assert len(emitted) == 11
        assert any("identity" in r["kind"] for r in man["modules"])
        assert sum("skipped" in r["kind"] for r in man["modules"]) >= 3
        errs = man["quantization"]
        assert len(errs) == 16
        assert all(0.0 <= e <= 1 / 512 + 1e-9 for e in errs.values())


class TestResNet18Export:
    def test_structure(self, resnet18_dir):
        doc = load_doc(resnet18_dir)
        kinds = [l["kind"] for l in doc["layers"]]
        assert kinds.count("Conv") == 20
        assert kinds.count("ResidualAdd") == 8
        assert kinds.count("MaxPool") == 1
        assert kinds.count("AvgPool") == 1
        assert kinds.count("FullyConnected") == 1
        shortcuts = [l for l in doc["layers"]
                     if l["kind"] == "Conv" and l["kh"] == 1
                     and l.get("input_source") is not None]
        assert len(shortcuts) == 3
        assert all(s["sy"] == 2 for s in shortcuts)
        avg = next(l for l in doc["layers"] if l["kind"] == "AvgPool")
        assert (avg["kh"], avg["sy"]) == (7, 7)
        fc = next(l for l in doc["layers"] if l["kind"] == "FullyConnected")
        assert (fc["in_ch"], fc["out_ch"]) == (512, 1000)

    def test_round_trip_validates_with_labels(self, resnet18_dir):
        g = model_ir.parse_model(json.dumps(load_doc(resnet18_dir)))
        g = model_ir.label_dependencies(model_ir.normalize(g))
        assert model_ir.validate(g) == []
        assert len(g.layers) == 23
        labels = [l.dep_label for l in g.layers]
        assert labels.count("BranchSink") == 8
        assert labels.count("BranchSource") >= 4


class TestToyEndToEnd:
    def test_cmd_validate_passes(self, tmp_path):
        _, pt = make_toy(tmp_path)
        out = tmp_path / "export"
        assert export.main(["--model", str(pt), "--out", str(out),
                            "--input", "3,16,16"]) == 0
        vout = tmp_path / "v"
        rc = accelc_main(["validate", "--model", str(out / "model.json"),
                          "--out", str(vout), "--seed", "5"])
        assert rc == 0
        with open(vout / "validate.json") as f:
            rep = json.load(f)
        assert rep["failed"] == 0
        assert len(rep["layers"]) == 3
        assert all(r["status"] == "pass" for r in rep["layers"])

    def test_matches_torch_forward(self, tmp_path):
        net, pt = make_toy(tmp_path)
        out = tmp_path / "export"
        assert export.main(["--model", str(pt), "--out", str(out),
                            "--input", "3,16,16"]) == 0
        graph = pipeline.load_model(str(out / "model.json"))
        weights = pipeline.load_weights(graph)
        rng = np.random.default_rng(9)
        raw = rng.integers(-1024, 1025, (3, 16, 16)).astype(np.int16)
        ref = fxp.run_reference(graph, fxp.Tensor.from_chw(raw), weights)
        got = ref[graph.layers[-1].id].chw().astype(np.float64).ravel() / 256.0
        with torch.no_grad():
            x = torch.from_numpy(raw.astype(np.float64) / 256.0).unsqueeze(0)
            want = net.double()(x).numpy().ravel()
        assert got.shape == want.shape
        # only the per-layer writeback floors separate the two routes
        assert np.max(np.abs(got - want)) < 0.1
        assert np.mean(np.abs(got - want)) < 0.02


class TestDiagnostics:
    def test_recurrent_module_named(self, tmp_path, capsys):
        net = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.ReLU(), nn.LSTM(8, 8))
        net.eval()
        p = tmp_path / "bad.pt"
        torch.save(net, p)
        rc = export.main(["--model", str(p), "--out", str(tmp_path / "o"),
                          "--input", "3,8,8"])
        assert rc == 1
        err = capsys.readouterr().err
        assert "LSTM" in err
        assert "2" in err

    def test_missing_file(self, tmp_path, capsys):
        rc = export.main(["--model", str(tmp_path / "nope.pt"),
                          "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "no such model" in capsys.readouterr().err

    def test_bad_input_shape(self, tmp_path, capsys):
        _, pt = make_toy(tmp_path)
        rc = export.main(["--model", str(pt), "--out", str(tmp_path / "o"),
                          "--input", "3x16x16"])
        assert rc == 1
        assert "bad input shape" in capsys.readouterr().err

    def test_flatten_size_mismatch(self, tmp_path, capsys):
        _, pt = make_toy(tmp_path)
        rc = export.main(["--model", str(pt), "--out", str(tmp_path / "o"),
                          "--input", "3,32,32"])
        assert rc == 1
        assert "flattening" in capsys.readouterr().err


class TestExportAcceptance:
    """End-to-end checks over the exported artifacts."""

    def test_round_trip_zero_diagnostics(self, alexnet_dir, resnet18_dir, capfd):
        for name, d in (("alexnet", alexnet_dir), ("resnet18", resnet18_dir)):
            g = model_ir.parse_model(json.dumps(load_doc(d)))
            g = model_ir.label_dependencies(model_ir.normalize(g))
            diags = model_ir.validate(g)
            assert diags == [], f"{name}: {diags}"
        with capfd.disabled():
            print("\nPASS exporter-round-trip: alexnet and resnet18 exports "
                  "validate with zero diagnostics")

    def test_toy_model_validates_bit_exact(self, tmp_path, capfd):
        _, pt = make_toy(tmp_path, seed=7)
        out = tmp_path / "export"
        assert export.main(["--model", str(pt), "--out", str(out),
                            "--input", "3,16,16"]) == 0
        vout = tmp_path / "v"
        assert accelc_main(["validate", "--model", str(out / "model.json"),
                            "--out", str(vout)]) == 0
        with open(vout / "validate.json") as f:
            rep = json.load(f)
        assert rep["failed"] == 0 and len(rep["layers"]) == 3
        with capfd.disabled():
            print("\nPASS exporter-toy-end-to-end: 3 exported layers simulate "
                  "bit-exactly against the fixed-point reference")
