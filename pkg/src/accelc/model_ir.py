"""Model interchange format: parse, shape inference, dependency labels.

A model is an ordered list of layers forming a chain. Each layer consumes the
previous layer's output unless it names an explicit input_source, and may name
a bypass_source whose output is element-wise added into its own output
(residual attachment). The JSON document looks like::

    {"input": [C, H, W],
     "weights": "path/to/archive",
     "weights_dtype": "f32",            # or "q88" (optional, default f32)
     "layers": [{"id": 0, "kind": "Conv", "kh": 3, "kw": 3, "sy": 1,
                 "sx": 1, "pad": 1, "in_ch": 16, "out_ch": 32,
                 "relu": true, "weights_ref": "c1.w", "bias_ref": "c1.b",
                 "bypass_source": null, "input_source": null}, ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional

KINDS = ("Conv", "MaxPool", "AvgPool", "FullyConnected", "ResidualAdd")
LABELS = ("Sequential", "BranchSource", "BranchSink")

WINDOWED = ("Conv", "MaxPool", "AvgPool")


class ModelError(Exception):
    """Raised for malformed documents or impossible shapes."""


@dataclass
class LayerNode:
    id: int
    kind: str
    kh: int = 1
    kw: int = 1
    sy: int = 1
    sx: int = 1
    pad: int = 0
    in_ch: int = 0
    out_ch: int = 0
    relu: bool = False
    weights_ref: Optional[str] = None
    bias_ref: Optional[str] = None
    bypass_source: Optional[int] = None
    input_source: Optional[int] = None
    # filled by shape inference / labeling
    in_h: int = 0
    in_w: int = 0
    out_h: int = 0
    out_w: int = 0
    dep_label: str = "Sequential"

    @property
    def out_shape(self):
        return (self.out_ch, self.out_h, self.out_w)

    @property
    def in_shape(self):
        return (self.in_ch, self.in_h, self.in_w)

    def infer_output(self):
        if self.kind == "FullyConnected":
            self.out_h = self.out_w = 1
            return
        if self.kind == "ResidualAdd":
            self.out_ch, self.out_h, self.out_w = self.in_ch, self.in_h, self.in_w
            return
        self.out_h = (self.in_h + 2 * self.pad - self.kh) // self.sy + 1
        self.out_w = (self.in_w + 2 * self.pad - self.kw) // self.sx + 1


@dataclass
class ModelGraph:
    layers: list
    input_shape: tuple      # (channels, height, width)
    weight_archive_path: str = ""
    weights_dtype: str = "f32"

    def by_id(self, lid: int) -> LayerNode:
        for l in self.layers:
            if l.id == lid:
                return l
        raise KeyError(f"no layer with id {lid}")

    def producer_of(self, layer: LayerNode) -> Optional[LayerNode]:
        """The layer whose output this layer consumes (None for the first)."""
        idx = self.layers.index(layer)
        if layer.input_source is not None:
            return self.by_id(layer.input_source)
        return self.layers[idx - 1] if idx > 0 else None


_LAYER_KEYS = {"id", "kind", "kh", "kw", "sy", "sx", "pad", "in_ch", "out_ch",
               "relu", "weights_ref", "bias_ref", "bypass_source",
               "input_source"}


def parse_model(text: str) -> ModelGraph:
    """Parse an interchange document and infer every layer's shapes."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelError(f"not valid JSON: {e}") from None
    for key in ("input", "layers"):
        if key not in doc:
            raise ModelError(f"missing top-level field {key!r}")
    ish = doc["input"]
    if len(ish) != 3 or any(int(d) <= 0 for d in ish):
        raise ModelError(f"bad input shape {ish}")
    layers = []
    seen = set()
    for raw in doc["layers"]:
        unknown = set(raw) - _LAYER_KEYS
        if unknown:
            raise ModelError(f"layer {raw.get('id')}: unknown fields {sorted(unknown)}")
        if "id" not in raw or "kind" not in raw:
            raise ModelError(f"layer missing id/kind: {raw}")
        if raw["kind"] not in KINDS:
            raise ModelError(f"layer {raw['id']}: unknown kind {raw['kind']!r}")
        if raw["id"] in seen:
            raise ModelError(f"duplicate layer id {raw['id']}")
        seen.add(raw["id"])
        layers.append(LayerNode(**raw))
    g = ModelGraph(layers=layers, input_shape=tuple(int(d) for d in ish),
                   weight_archive_path=doc.get("weights", ""),
                   weights_dtype=doc.get("weights_dtype", "f32"))
    _infer_shapes(g)
    for l in g.layers:
        if l.bypass_source is not None and l.bypass_source not in seen:
            raise ModelError(f"layer {l.id}: dangling bypass_source {l.bypass_source}")
        if l.input_source is not None and l.input_source not in seen:
            raise ModelError(f"layer {l.id}: dangling input_source {l.input_source}")
    return g


def _infer_shapes(g: ModelGraph):
    for l in g.layers:
        prod = g.producer_of(l)
        src = g.input_shape if prod is None else prod.out_shape
        c, h, w = src
        if l.kind == "FullyConnected":
            # flattened feature vector; accept either channel view
            if l.in_ch != c * h * w and l.in_ch != c:
                raise ModelError(
                    f"layer {l.id}: FC in_ch {l.in_ch} != {c * h * w} flattened inputs")
            l.in_ch, l.in_h, l.in_w = c * h * w, 1, 1
            l.kh = l.kw = l.sy = l.sx = 1
            l.pad = 0
        else:
            l.in_h, l.in_w = h, w
            if l.kind in ("MaxPool", "AvgPool", "ResidualAdd"):
                l.in_ch = c
                l.out_ch = c
            elif l.in_ch == 0:
                l.in_ch = c
        l.infer_output()
        if l.out_h < 1 or l.out_w < 1:
            raise ModelError(
                f"layer {l.id}: non-positive output dims "
                f"{l.out_h}x{l.out_w} (in {l.in_h}x{l.in_w}, k {l.kh}x{l.kw}, "
                f"s {l.sy}/{l.sx}, pad {l.pad})")


def serialize_model(g: ModelGraph) -> str:
    doc = {
        "input": list(g.input_shape),
        "weights": g.weight_archive_path,
        "weights_dtype": g.weights_dtype,
        "layers": [
            {k: v for k, v in asdict(l).items() if k in _LAYER_KEYS}
            for l in g.layers
        ],
    }
    return json.dumps(doc, indent=2)


def normalize(g: ModelGraph) -> ModelGraph:
    """Fuse standalone ResidualAdd nodes into their producing Conv/FC layer.

    The hardware performs residual addition while the producing layer writes
    back, so a ResidualAdd node is only legal directly after a Conv or
    FullyConnected layer with a matching output shape.
    """
    out = []
    for l in g.layers:
        if l.kind != "ResidualAdd":
            out.append(l)
            continue
        if l.bypass_source is None:
            raise ModelError(f"layer {l.id}: ResidualAdd without bypass_source")
        if not out or out[-1].kind not in ("Conv", "FullyConnected"):
            raise ModelError(
                f"layer {l.id}: ResidualAdd must follow a Conv/FullyConnected layer")
        host = out[-1]
        if l.input_source is not None and l.input_source != host.id:
            raise ModelError(f"layer {l.id}: ResidualAdd input must be the previous layer")
        if host.bypass_source is not None:
            raise ModelError(f"layer {l.id}: producer {host.id} already has a bypass")
        if host.out_shape != l.out_shape:
            raise ModelError(
                f"layer {l.id}: ResidualAdd shape {l.out_shape} != producer "
                f"{host.out_shape}")
        host.bypass_source = l.bypass_source
        host.relu = host.relu or l.relu
        # later references to the fused node follow through to the host
        for other in g.layers:
            if other.bypass_source == l.id:
                other.bypass_source = host.id
            if other.input_source == l.id:
                other.input_source = host.id
    g.layers = out
    return g


def label_dependencies(g: ModelGraph) -> ModelGraph:
    """Assign Sequential/BranchSource/BranchSink labels (idempotent)."""
    order = {l.id: i for i, l in enumerate(g.layers)}
    sources = set()
    for i, l in enumerate(g.layers):
        if l.bypass_source is not None:
            if order[l.bypass_source] >= i:
                raise ModelError(
                    f"layer {l.id}: bypass_source {l.bypass_source} is not earlier")
            src = g.by_id(l.bypass_source)
            if src.out_shape != l.out_shape:
                raise ModelError(
                    f"layer {l.id}: bypass shape {src.out_shape} != {l.out_shape}")
            sources.add(l.bypass_source)
        if l.input_source is not None:
            if order[l.input_source] >= i:
                raise ModelError(
                    f"layer {l.id}: input_source {l.input_source} is not earlier")
            if i == 0 or g.layers[i - 1].id != l.input_source:
                sources.add(l.input_source)
    for l in g.layers:
        if l.bypass_source is not None:
            l.dep_label = "BranchSink"
        elif l.id in sources:
            l.dep_label = "BranchSource"
        else:
            l.dep_label = "Sequential"
    return g


def validate(g: ModelGraph) -> list:
    """Return one diagnostic string per invariant violation (empty = valid)."""
    diags = []
    order = {l.id: i for i, l in enumerate(g.layers)}
    for i, l in enumerate(g.layers):
        where = f"layer {l.id}"
        prod = g.producer_of(l)
        src = g.input_shape if prod is None else prod.out_shape
        c, h, w = src
        if l.kind == "FullyConnected":
            if l.in_ch != c * h * w:
                diags.append(f"{where}: FC expects {c * h * w} inputs, has in_ch {l.in_ch}")
        elif l.kind == "ResidualAdd":
            diags.append(f"{where}: un-normalized ResidualAdd node")
        else:
            if (l.in_ch, l.in_h, l.in_w) != (c, h, w):
                diags.append(f"{where}: input shape {l.in_shape} != producer output {src}")
        if l.kind in WINDOWED:
            if l.out_h < 1 or l.out_w < 1:
                diags.append(f"{where}: non-positive output dims")
            if l.pad >= l.kh or l.pad >= l.kw:
                diags.append(f"{where}: pad {l.pad} >= kernel {l.kh}x{l.kw} "
                             "(empty windows unsupported)")
            if min(l.kh, l.kw, l.sy, l.sx) < 1:
                diags.append(f"{where}: non-positive kernel/stride")
        if l.kind in ("Conv", "FullyConnected"):
            if not l.weights_ref or not l.bias_ref:
                diags.append(f"{where}: missing weights_ref/bias_ref")
        if l.kind in ("MaxPool", "AvgPool"):
            if l.weights_ref or l.bias_ref:
                diags.append(f"{where}: pooling layer carries weight refs")
            if l.out_ch != l.in_ch:
                diags.append(f"{where}: pooling must preserve channels")
        if l.bypass_source is not None:
            if l.bypass_source not in order:
                diags.append(f"{where}: dangling bypass_source {l.bypass_source}")
            elif order[l.bypass_source] >= i:
                diags.append(f"{where}: bypass_source not earlier")
            elif g.by_id(l.bypass_source).out_shape != l.out_shape:
                diags.append(f"{where}: bypass shape mismatch")
            if l.kind not in ("Conv", "FullyConnected"):
                diags.append(f"{where}: bypass attachment on non-Conv/FC layer")
    # every BranchSource must have a consumer
    labeled_sources = {l.id for l in g.layers if l.dep_label == "BranchSource"}
    consumed = {l.bypass_source for l in g.layers if l.bypass_source is not None}
    consumed |= {l.input_source for l in g.layers if l.input_source is not None}
    for lid in labeled_sources - consumed:
        diags.append(f"layer {lid}: BranchSource never consumed")
    return diags
