"""Export torch CNN models to the accelerator interchange format.

Walks a model's modules in forward order, folds eval-mode batch norm into
the preceding convolution, fuses ReLU activations into their producing
layer, quantizes all parameters to Q8.8, and writes three artifacts into
the output directory:

- model.json            the interchange graph (weights_dtype "q88")
- weights/              one raw little-endian int16 file per tensor ref
- export_manifest.json  module-to-layer mapping and quantization stats

Supported sources: the torchvision alexnet and resnet18 definitions
(randomly initialized from --seed) or a path to a torch.save'd module
built from supported layer types.
"""

import argparse
import json
import os
import sys

import numpy as np
import torch
from torch import nn
from torchvision import models as tvm
from torchvision.models.resnet import BasicBlock, ResNet


class ExportError(Exception):
    """Raised when a model cannot be expressed in the interchange format."""


def quantize_q88(x):
    """Round to the nearest 1/256 step, ties away from zero, saturate to int16."""
    scaled = np.asarray(x, dtype=np.float64) * 256.0
    magnitude = np.floor(np.abs(scaled) + 0.5)
    raw = np.where(scaled < 0.0, -magnitude, magnitude)
    return np.clip(raw, -32768.0, 32767.0).astype(np.int16)


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ExportError(f"expected 2-element size, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def fold_batchnorm(weight, bias, bn, path):
    """Fold an eval-mode BatchNorm2d into the preceding conv's parameters.

    y = gamma * (x - mean) / sqrt(var + eps) + beta collapses to a per-channel
    scale on the conv weight and an adjusted bias.
    """
    if bn.running_mean is None or bn.running_var is None:
        raise ExportError(f"{path}: batch norm keeps no running statistics, cannot fold")
    if not bn.affine:
        raise ExportError(f"{path}: non-affine batch norm cannot be folded")
    mean = bn.running_mean.detach().numpy().astype(np.float64)
    var = bn.running_var.detach().numpy().astype(np.float64)
    gamma = bn.weight.detach().numpy().astype(np.float64)
    beta = bn.bias.detach().numpy().astype(np.float64)
    scale = gamma / np.sqrt(var + bn.eps)
    return weight * scale[:, None, None, None], (bias - mean) * scale + beta


class GraphBuilder:
    """Accumulates interchange layers, quantized tensors, and manifest rows."""

    def __init__(self, input_shape):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = []
        self.tensors = {}     # ref -> int16 array
        self.quant_err = {}   # ref -> max |float - quantized| in value units
        self.mapping = []
        self.shapes = {}      # layer id -> (c, h, w)
        self.prev = None      # id of the most recently emitted layer

    def _source_shape(self, src):
        if src is not None:
            return self.shapes[src]
        return self.input_shape if self.prev is None else self.shapes[self.prev]

    def _emit(self, entry, out_shape, path, src=None):
        lid = len(self.layers)
        entry = {"id": lid, **entry}
        if src is not None and src != self.prev:
            entry["input_source"] = src
        self.layers.append(entry)
        self.shapes[lid] = out_shape
        self.mapping.append({"module": path, "kind": entry["kind"], "layer": lid})
        self.prev = lid
        return lid

    def note(self, path, action, layer=None):
        self.mapping.append({"module": path, "kind": action, "layer": layer})

    def _stash(self, ref, arr):
        q = quantize_q88(arr)
        err = np.max(np.abs(np.asarray(arr, dtype=np.float64) - q.astype(np.float64) / 256.0))
        self.tensors[ref] = q
        self.quant_err[ref] = float(err)

    def add_conv(self, path, m, bn=None, relu=False, src=None):
        if m.groups != 1:
            raise ExportError(f"{path}: grouped convolution unsupported")
        if _pair(m.dilation) != (1, 1):
            raise ExportError(f"{path}: dilated convolution unsupported")
        if m.padding_mode != "zeros":
            raise ExportError(f"{path}: padding mode {m.padding_mode!r} unsupported")
        py, px = _pair(m.padding)
        if py != px:
            raise ExportError(f"{path}: asymmetric padding {m.padding} unsupported")
        c, h, w = self._source_shape(src)
        if m.in_channels != c:
            raise ExportError(f"{path}: expects {m.in_channels} input channels, got {c}")
        w_f = m.weight.detach().numpy().astype(np.float64)
        b_f = (m.bias.detach().numpy().astype(np.float64) if m.bias is not None
               else np.zeros(m.out_channels))
        if bn is not None:
            w_f, b_f = fold_batchnorm(w_f, b_f, bn, path)
        kh, kw = _pair(m.kernel_size)
        sy, sx = _pair(m.stride)
        oh = (h + 2 * py - kh) // sy + 1
        ow = (w + 2 * px - kw) // sx + 1
        if oh < 1 or ow < 1:
            raise ExportError(f"{path}: output collapses to {oh}x{ow}")
        lid = len(self.layers)
        wref, bref = f"l{lid}.w", f"l{lid}.b"
        self._stash(wref, w_f)
        self._stash(bref, b_f)
        entry = {"kind": "Conv", "kh": kh, "kw": kw, "sy": sy, "sx": sx, "pad": py,
                 "in_ch": c, "out_ch": m.out_channels, "relu": bool(relu),
                 "weights_ref": wref, "bias_ref": bref}
        return self._emit(entry, (m.out_channels, oh, ow), path, src=src)

    def add_pool(self, path, kind, kernel, stride, pad):
        kh, kw = _pair(kernel)
        sy, sx = _pair(kernel if stride is None else stride)
        py, px = _pair(pad)
        if py != px:
            raise ExportError(f"{path}: asymmetric padding {pad} unsupported")
        if py >= kh or py >= kw:
            raise ExportError(f"{path}: padding {py} >= kernel {kh}x{kw}")
        c, h, w = self._source_shape(None)
        oh = (h + 2 * py - kh) // sy + 1
        ow = (w + 2 * px - kw) // sx + 1
        if oh < 1 or ow < 1:
            raise ExportError(f"{path}: output collapses to {oh}x{ow}")
        entry = {"kind": kind, "kh": kh, "kw": kw, "sy": sy, "sx": sx, "pad": py}
        return self._emit(entry, (c, oh, ow), path)

    def add_adaptive_avg(self, path, m):
        oh, ow = _pair(m.output_size) if m.output_size is not None else (None, None)
        c, h, w = self._source_shape(None)
        if (oh, ow) == (h, w):
            self.note(path, "AdaptiveAvgPool (identity, skipped)")
            return None
        if not oh or not ow or h % oh or w % ow:
            raise ExportError(
                f"{path}: adaptive pool {h}x{w} -> {oh}x{ow} does not divide evenly")
        return self.add_pool(path, "AvgPool", (h // oh, w // ow), (h // oh, w // ow), 0)

    def add_fc(self, path, m, relu=False):
        c, h, w = self._source_shape(None)
        if m.in_features != c * h * w:
            raise ExportError(
                f"{path}: expects {m.in_features} inputs, flattening gives {c * h * w}")
        w_f = m.weight.detach().numpy().astype(np.float64)
        # torch flattens activations channel-first; the accelerator stores
        # pixels channel-major, so reorder the columns to (y, x, c)
        w_f = w_f.reshape(m.out_features, c, h, w).transpose(0, 2, 3, 1)
        w_f = w_f.reshape(m.out_features, c * h * w)
        b_f = (m.bias.detach().numpy().astype(np.float64) if m.bias is not None
               else np.zeros(m.out_features))
        lid = len(self.layers)
        wref, bref = f"l{lid}.w", f"l{lid}.b"
        self._stash(wref, w_f)
        self._stash(bref, b_f)
        entry = {"kind": "FullyConnected", "in_ch": c * h * w, "out_ch": m.out_features,
                 "relu": bool(relu), "weights_ref": wref, "bias_ref": bref}
        return self._emit(entry, (m.out_features, 1, 1), path)

    def add_residual(self, path, bypass, relu=True):
        shape = self.shapes[self.prev]
        if self.shapes[bypass] != shape:
            raise ExportError(
                f"{path}: branch shapes differ, {self.shapes[bypass]} vs {shape}")
        entry = {"kind": "ResidualAdd", "relu": bool(relu), "bypass_source": bypass}
        return self._emit(entry, shape, path)


def module_atoms(model):
    """Flatten a supported model into (path, module) pairs in forward order."""
    if isinstance(model, tvm.AlexNet):
        atoms = [(f"features.{i}", m) for i, m in enumerate(model.features)]
        atoms.append(("avgpool", model.avgpool))
        atoms.append(("flatten", nn.Flatten(1)))
        atoms.extend((f"classifier.{i}", m) for i, m in enumerate(model.classifier))
        return atoms
    if isinstance(model, ResNet):
        atoms = [("conv1", model.conv1), ("bn1", model.bn1), ("relu", model.relu),
                 ("maxpool", model.maxpool)]
        for name in ("layer1", "layer2", "layer3", "layer4"):
            atoms.extend((f"{name}.{j}", blk)
                         for j, blk in enumerate(getattr(model, name)))
        atoms.extend([("avgpool", model.avgpool), ("flatten", nn.Flatten(1)),
                      ("fc", model.fc)])
        return atoms
    if isinstance(model, nn.Sequential):
        return _flatten_sequential(model, "")
    raise ExportError(f"unsupported model class {type(model).__name__}; expected "
                      "AlexNet, ResNet, or a Sequential of supported layers")


def _flatten_sequential(seq, prefix):
    atoms = []
    for name, m in seq.named_children():
        path = f"{prefix}{name}"
        if isinstance(m, nn.Sequential):
            atoms.extend(_flatten_sequential(m, path + "."))
        else:
            atoms.append((path, m))
    return atoms


def _expand_basic_block(b, path, blk):
    if b.prev is None:
        raise ExportError(f"{path}: residual block cannot be the first layer")
    entry = b.prev
    c1 = b.add_conv(f"{path}.conv1", blk.conv1, bn=blk.bn1, relu=True)
    b.note(f"{path}.bn1", "BatchNorm (folded)", c1)
    b.note(f"{path}.relu", "ReLU (fused)", c1)
    shortcut = entry
    if blk.downsample is not None:
        mods = list(blk.downsample)
        if (len(mods) != 2 or not isinstance(mods[0], nn.Conv2d)
                or not isinstance(mods[1], nn.BatchNorm2d)):
            raise ExportError(f"{path}.downsample: expected conv + batch norm")
        # the shortcut conv runs before the block's second conv so its output
        # is already resident when the residual add consumes it
        shortcut = b.add_conv(f"{path}.downsample.0", mods[0], bn=mods[1],
                              relu=False, src=entry)
        b.note(f"{path}.downsample.1", "BatchNorm (folded)", shortcut)
    c2 = b.add_conv(f"{path}.conv2", blk.conv2, bn=blk.bn2, relu=False, src=c1)
    b.note(f"{path}.bn2", "BatchNorm (folded)", c2)
    b.add_residual(f"{path}.add", bypass=shortcut, relu=True)


def build_graph(atoms, input_shape):
    """Peephole pass over the flattened module list, emitting interchange layers."""
    b = GraphBuilder(input_shape)
    i, n = 0, len(atoms)
    while i < n:
        path, m = atoms[i]
        i += 1
        if isinstance(m, nn.Conv2d):
            bn = bn_path = relu_path = None
            relu = False
            if i < n and isinstance(atoms[i][1], nn.BatchNorm2d):
                bn_path, bn = atoms[i]
                i += 1
            if i < n and isinstance(atoms[i][1], nn.ReLU):
                relu_path = atoms[i][0]
                relu = True
                i += 1
            lid = b.add_conv(path, m, bn=bn, relu=relu)
            if bn_path is not None:
                b.note(bn_path, "BatchNorm (folded)", lid)
            if relu_path is not None:
                b.note(relu_path, "ReLU (fused)", lid)
        elif isinstance(m, nn.Linear):
            relu_path = None
            relu = False
            if i < n and isinstance(atoms[i][1], nn.ReLU):
                relu_path = atoms[i][0]
                relu = True
                i += 1
            lid = b.add_fc(path, m, relu=relu)
            if relu_path is not None:
                b.note(relu_path, "ReLU (fused)", lid)
        elif isinstance(m, nn.MaxPool2d):
            if _pair(m.dilation) != (1, 1):
                raise ExportError(f"{path}: dilated pooling unsupported")
            if m.ceil_mode:
                raise ExportError(f"{path}: ceil_mode pooling unsupported")
            b.add_pool(path, "MaxPool", m.kernel_size, m.stride, m.padding)
        elif isinstance(m, nn.AvgPool2d):
            if m.ceil_mode:
                raise ExportError(f"{path}: ceil_mode pooling unsupported")
            if _pair(m.padding) != (0, 0) and not m.count_include_pad:
                raise ExportError(f"{path}: padded average pool must count padding")
            b.add_pool(path, "AvgPool", m.kernel_size, m.stride, m.padding)
        elif isinstance(m, nn.AdaptiveAvgPool2d):
            b.add_adaptive_avg(path, m)
        elif isinstance(m, BasicBlock):
            _expand_basic_block(b, path, m)
        elif isinstance(m, (nn.Dropout, nn.Dropout2d, nn.Flatten, nn.Identity)):
            b.note(path, f"{type(m).__name__} (skipped)")
        elif isinstance(m, nn.BatchNorm2d):
            raise ExportError(f"{path}: batch norm without a preceding convolution")
        elif isinstance(m, nn.ReLU):
            raise ExportError(f"{path}: ReLU has no convolution or linear layer "
                              "to fuse into")
        else:
            raise ExportError(f"{path}: unsupported module type {type(m).__name__}")
    if not b.layers:
        raise ExportError("model contains no exportable layers")
    return b


def _randomize_bn_stats(model, seed):
    """Give freshly constructed batch norms non-trivial statistics.

    A new BatchNorm2d has mean 0, var 1, gamma 1, beta 0, which would make
    folding a near no-op; spread the values so folding is exercised.
    """
    g = torch.Generator().manual_seed(seed * 9176 + 11)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.BatchNorm2d):
                n = m.num_features
                m.running_mean.copy_(torch.empty(n).uniform_(-0.5, 0.5, generator=g))
                m.running_var.copy_(torch.empty(n).uniform_(0.25, 1.5, generator=g))
                m.weight.copy_(torch.empty(n).uniform_(0.5, 1.5, generator=g))
                m.bias.copy_(torch.empty(n).uniform_(-0.3, 0.3, generator=g))


def load_source(name, seed):
    """Return (model, fixed input shape or None) for a CLI --model argument."""
    torch.manual_seed(seed)
    if name == "alexnet":
        model = tvm.alexnet(weights=None)
        shape = (3, 224, 224)
    elif name == "resnet18":
        model = tvm.resnet18(weights=None)
        shape = (3, 224, 224)
    else:
        if not os.path.exists(name):
            raise ExportError(f"no such model: {name}")
        try:
            obj = torch.load(name, map_location="cpu", weights_only=False)
        except Exception as e:
            raise ExportError(f"{name}: cannot load, {e}") from None
        if not isinstance(obj, nn.Module):
            raise ExportError(f"{name}: not a saved torch module "
                              f"(got {type(obj).__name__})")
        model = obj
        shape = None
    if shape is not None:
        _randomize_bn_stats(model, seed)
    model.eval()
    return model, shape


def write_export(out_dir, doc, tensors, manifest):
    wdir = os.path.join(out_dir, doc["weights"])
    os.makedirs(wdir, exist_ok=True)
    for ref, arr in tensors.items():
        arr.astype("<i2").tofile(os.path.join(wdir, ref))
    model_path = os.path.join(out_dir, "model.json")
    with open(model_path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    with open(os.path.join(out_dir, "export_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return model_path


def _parse_input_shape(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise ExportError(f"bad input shape {text!r}, want C,H,W")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ExportError(f"bad input shape {text!r}, want C,H,W") from None
    if min(dims) < 1:
        raise ExportError(f"input dims must be positive, got {dims}")
    return dims


def export_model(model_arg, out_dir, input_shape="3,224,224", seed=0):
    """Export one model; returns the path of the written model.json."""
    model, fixed = load_source(model_arg, seed)
    shape = fixed if fixed is not None else _parse_input_shape(input_shape)
    with torch.no_grad():
        b = build_graph(module_atoms(model), shape)
    doc = {"input": list(b.input_shape), "weights": "weights",
           "weights_dtype": "q88", "layers": b.layers}
    source = model_arg if fixed is not None else os.path.basename(model_arg)
    manifest = {"source": source, "input": list(b.input_shape), "seed": seed,
                "modules": b.mapping,
                "quantization": {r: b.quant_err[r] for r in sorted(b.quant_err)}}
    path = write_export(out_dir, doc, b.tensors, manifest)
    total = sum(t.size for t in b.tensors.values())
    print(f"exported {len(b.layers)} layers, {len(b.tensors)} tensors "
          f"({total * 2 / 1e6:.1f} MB) -> {out_dir}")
    return path


def main(argv=None):
    ap = argparse.ArgumentParser(
        description="Export a torch CNN to the accelerator interchange format")
    ap.add_argument("--model", required=True,
                    help="alexnet, resnet18, or path to a torch.save'd module")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--input", default="3,224,224",
                    help="input shape C,H,W for file models (default 3,224,224)")
    ap.add_argument("--seed", type=int, default=0,
                    help="parameter seed for the built-in model definitions")
    args = ap.parse_args(argv)
    try:
        export_model(args.model, args.out, input_shape=args.input, seed=args.seed)
        return 0
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
