"""Detector graphs: layer DAG, validation, SSD/ESSD builders, forward pass.

A :class:`NetGraph` is an immutable name -> :class:`LayerSpec` map plus the
ordered list of prediction sources.  Builders produce two families:

* ``canonical300``: the classic 300x300 six-scale detector topology (weight
  layers conv1_1 .. conv11_2 with fc6/fc7 as convs).  It is a topology
  descriptor for depth analysis and ships as a JSON data file; it is never
  trained here.
* ``toy``: a small executable graph (default 96x96 input, 4 scales at grids
  12/6/3/1) with conv+bn+relu blocks, following the same structural pattern.

The extension module grafts a deconvolved deeper source onto a twice-convolved
shallower source and fuses the branches by concat, elementwise sum, or
elementwise product.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T

__all__ = [
    "LayerSpec",
    "NetGraph",
    "GraphError",
    "ToyConfig",
    "validate",
    "build_ssd",
    "build_essd",
    "make_extension_module",
    "attach_heads",
    "forward",
    "head_predictions",
    "load_descriptor",
    "save_descriptor",
    "load_canonical",
    "TOY_CLASSES",
]

KINDS = (
    "data",
    "conv",
    "deconv",
    "bn",
    "relu",
    "pool",
    "concat",
    "eltwise_sum",
    "eltwise_prod",
    "conf_head",
    "loc_head",
)

# classes of the synthetic dataset the toy profile detects
TOY_CLASSES = ("circle", "square", "triangle")


class GraphError(ValueError):
    """Raised when a graph fails validation; carries the violation list."""

    def __init__(self, violations: list[str]):
        super().__init__("invalid graph:\n  " + "\n  ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class LayerSpec:
    """One graph node: kind, hyperparameters, and named input edges."""

    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    def p(self, key, default=None):
        return self.params.get(key, default)


_ARITY = {
    "data": (0, 0),
    "conv": (1, 1),
    "deconv": (1, 1),
    "bn": (1, 1),
    "relu": (1, 1),
    "pool": (1, 1),
    "concat": (2, None),
    "eltwise_sum": (2, 2),
    "eltwise_prod": (2, 2),
    "conf_head": (1, 1),
    "loc_head": (1, 1),
}


class NetGraph:
    """Sealed DAG of layers.  Use the builders; direct construction skips sealing."""

    def __init__(self, layers: Sequence[LayerSpec], prediction_sources: Sequence[str] = ()):
        seen = {}
        for spec in layers:
            if spec.name in seen:
                raise GraphError([f"duplicate layer name '{spec.name}'"])
            seen[spec.name] = spec
        self._layers = seen
        self.prediction_sources = tuple(prediction_sources)
        self._topo: tuple[str, ...] | None = None
        self._shapes: dict[str, tuple[int, int, int]] | None = None

    @property
    def layers(self) -> Mapping[str, LayerSpec]:
        return MappingProxyType(self._layers)

    def __contains__(self, name: str) -> bool:
        return name in self._layers

    def __getitem__(self, name: str) -> LayerSpec:
        return self._layers[name]

    def topo_order(self) -> tuple[str, ...]:
        if self._topo is None:
            order, cyclic = _topo_sort(self._layers)
            if cyclic:
                raise GraphError([f"cycle through layers: {', '.join(sorted(cyclic))}"])
            self._topo = tuple(order)
        return self._topo

    def shape_of(self, name: str) -> tuple[int, int, int]:
        """(channels, height, width) of a layer's output; requires a valid graph."""
        if self._shapes is None:
            violations = validate(self)
            if violations:
                raise GraphError(violations)
        return self._shapes[name]

    @property
    def data_layer(self) -> LayerSpec:
        ds = [l for l in self._layers.values() if l.kind == "data"]
        if len(ds) != 1:
            raise GraphError([f"expected exactly one data layer, found {len(ds)}"])
        return ds[0]

    @property
    def input_size(self) -> int:
        return int(self.data_layer.p("size"))

    def consumers(self, name: str) -> list[str]:
        return [l.name for l in self._layers.values() if name in l.inputs]

    def head_pairs(self) -> list[tuple[str, str, str]]:
        """(source, conf head, loc head) triples in prediction-source order."""
        pairs = []
        for i, src in enumerate(self.prediction_sources):
            cname, lname = f"head{i}_conf", f"head{i}_loc"
            if cname not in self._layers or lname not in self._layers:
                raise GraphError([f"prediction source '{src}' has no attached heads"])
            pairs.append((src, cname, lname))
        return pairs

    def to_json(self) -> dict:
        return {
            "format": "essd-netgraph",
            "version": 1,
            "layers": [
                {
                    "name": l.name,
                    "kind": l.kind,
                    "inputs": list(l.inputs),
                    "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in l.params.items()},
                }
                for l in self._layers.values()
            ],
            "prediction_sources": list(self.prediction_sources),
        }


def _topo_sort(layers: Mapping[str, LayerSpec]) -> tuple[list[str], set[str]]:
    indeg = {}
    for spec in layers.values():
        indeg[spec.name] = sum(1 for i in spec.inputs if i in layers)
    ready = [n for n, d in indeg.items() if d == 0]
    order: list[str] = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for spec in layers.values():
            if n in spec.inputs:
                indeg[spec.name] -= spec.inputs.count(n)
                if indeg[spec.name] == 0:
                    ready.append(spec.name)
    return order, {n for n in layers if n not in order}


def _out_hw(kind: str, h: int, k: int, stride: int, pad: int) -> int:
    if kind == "deconv":
        return (h - 1) * stride - 2 * pad + k
    return (h + 2 * pad - k) // stride + 1


def validate(graph: NetGraph) -> list[str]:
    """Collect every structural violation; an empty list means the graph is well formed.

    Checks: single data layer, resolvable inputs, per-kind arity, eltwise
    weight lists, acyclicity, shape propagation, and prediction sources with
    strictly decreasing spatial size.
    """
    v: list[str] = []
    layers = graph._layers
    datas = [l.name for l in layers.values() if l.kind == "data"]
    if len(datas) != 1:
        v.append(f"expected exactly one data layer, found {len(datas)}")
    for spec in layers.values():
        if spec.kind not in KINDS:
            v.append(f"layer '{spec.name}' has unknown kind '{spec.kind}'")
            continue
        lo, hi = _ARITY[spec.kind]
        n = len(spec.inputs)
        if n < lo or (hi is not None and n > hi):
            v.append(f"layer '{spec.name}' ({spec.kind}) has {n} inputs, expected {lo}" + ("" if hi == lo else f"..{hi or 'n'}"))
        for ref in spec.inputs:
            if ref not in layers:
                v.append(f"layer '{spec.name}' references unknown input '{ref}'")
        w = spec.p("weights")
        if w is not None:
            if len(w) != len(spec.inputs):
                v.append(f"layer '{spec.name}' has {len(w)} input weights for {len(spec.inputs)} inputs")
            elif abs(sum(w) - 1.0) > 1e-9:
                v.append(f"layer '{spec.name}' input weights sum to {sum(w)}, expected 1")
    order, cyclic = _topo_sort(layers)
    if cyclic:
        v.append(f"cycle through layers: {', '.join(sorted(cyclic))}")
    shapes: dict[str, tuple[int, int, int]] = {}
    for name in order:
        spec = layers[name]
        if spec.kind not in KINDS or any(i not in shapes for i in spec.inputs):
            continue  # unresolved upstream; already reported
        if spec.kind == "data":
            if len(datas) == 1:
                shapes[name] = (int(spec.p("channels", 3)), int(spec.p("size")), int(spec.p("size")))
            continue
        ins = [shapes[i] for i in spec.inputs]
        if spec.kind in ("conv", "deconv", "conf_head", "loc_head", "pool"):
            c, h, w = ins[0]
            k = int(spec.p("kernel"))
            stride = int(spec.p("stride", 1))
            pad = int(spec.p("pad", 0))
            if spec.kind != "deconv" and (k > h + 2 * pad or k > w + 2 * pad):
                v.append(f"layer '{name}' kernel {k} exceeds padded input {h}x{w}")
                continue
            ho = _out_hw(spec.kind, h, k, stride, pad)
            wo = _out_hw(spec.kind, w, k, stride, pad)
            if ho < 1 or wo < 1:
                v.append(f"layer '{name}' produces empty output {ho}x{wo}")
                continue
            if spec.kind == "conv" or spec.kind == "deconv":
                co = int(spec.p("out_channels"))
            elif spec.kind == "conf_head":
                co = int(spec.p("boxes")) * (int(spec.p("classes")) + 1)
            elif spec.kind == "loc_head":
                co = int(spec.p("boxes")) * 4
            else:
                co = c
            shapes[name] = (co, ho, wo)
        elif spec.kind in ("bn", "relu"):
            shapes[name] = ins[0]
        elif spec.kind == "concat":
            ref = ins[0]
            ok = True
            for j, s in enumerate(ins[1:], start=1):
                if s[1:] != ref[1:]:
                    v.append(
                        f"layer '{name}' concat input {j} ('{spec.inputs[j]}') has spatial {s[1:]}, "
                        f"input 0 ('{spec.inputs[0]}') has {ref[1:]}"
                    )
                    ok = False
            if ok:
                shapes[name] = (sum(s[0] for s in ins), ref[1], ref[2])
        elif spec.kind in ("eltwise_sum", "eltwise_prod"):
            if ins[0] != ins[1]:
                v.append(
                    f"layer '{name}' elementwise inputs '{spec.inputs[0]}' {ins[0]} and "
                    f"'{spec.inputs[1]}' {ins[1]} have different shapes"
                )
            else:
                shapes[name] = ins[0]
    for src in graph.prediction_sources:
        if src not in layers:
            v.append(f"prediction source '{src}' does not exist")
    prev = None
    for src in graph.prediction_sources:
        if src in shapes:
            h = shapes[src][1]
            if prev is not None and h >= prev:
                v.append(f"prediction source '{src}' spatial size {h} does not decrease (previous {prev})")
            prev = h
    if not v:
        graph._shapes = shapes
        graph._topo = tuple(order)
    return v


def _sealed(layers: list[LayerSpec], sources: Sequence[str]) -> NetGraph:
    g = NetGraph(layers, sources)
    violations = validate(g)
    if violations:
        raise GraphError(violations)
    return g


# ---------------------------------------------------------------------------
# builders


@dataclass(frozen=True)
class ToyConfig:
    """Executable small-profile settings: input side (multiple of 16, >= 48) and stem width."""

    input_size: int = 96
    base_channels: int = 16

    def __post_init__(self):
        if self.input_size < 48 or self.input_size % 16:
            raise ValueError(f"toy input_size must be a multiple of 16 and >= 48, got {self.input_size}")
        if self.base_channels < 4:
            raise ValueError(f"toy base_channels must be >= 4, got {self.base_channels}")


def _toy_cfg(profile) -> ToyConfig:
    if isinstance(profile, ToyConfig):
        return profile
    if profile == "toy":
        return ToyConfig()
    raise ValueError(f"unknown profile {profile!r}; expected 'canonical300', 'toy', or a ToyConfig")


def build_ssd(profile) -> NetGraph:
    """Plain single-shot detector graph (no heads; see :func:`attach_heads`).

    ``canonical300`` reproduces the six-scale 300x300 topology; ``toy`` (or a
    ToyConfig) builds the executable four-scale graph.
    """
    if profile == "canonical300":
        return _build_canonical_ssd()
    return _build_toy_ssd(_toy_cfg(profile))


def _build_canonical_ssd() -> NetGraph:
    ls: list[LayerSpec] = [LayerSpec("data", "data", (), {"channels": 3, "size": 300})]
    prev = "data"

    def conv(name, out_c, k=3, stride=1, pad=1):
        nonlocal prev
        ls.append(LayerSpec(name, "conv", (prev,), {"out_channels": out_c, "kernel": k, "stride": stride, "pad": pad}))
        ls.append(LayerSpec(name + "_relu", "relu", (name,)))
        prev = name + "_relu"

    def pool(name, k, stride, pad=0):
        nonlocal prev
        ls.append(LayerSpec(name, "pool", (prev,), {"kernel": k, "stride": stride, "pad": pad}))
        prev = name

    conv("conv1_1", 64); conv("conv1_2", 64); pool("pool1", 2, 2)          # 300 -> 150
    conv("conv2_1", 128); conv("conv2_2", 128); pool("pool2", 2, 2)        # 150 -> 75
    conv("conv3_1", 256); conv("conv3_2", 256); conv("conv3_3", 256)
    pool("pool3", 2, 2, pad=1)                                             # 75 -> 38
    conv("conv4_1", 512); conv("conv4_2", 512); conv("conv4_3", 512)
    pool("pool4", 2, 2)                                                    # 38 -> 19
    conv("conv5_1", 512); conv("conv5_2", 512); conv("conv5_3", 512)
    pool("pool5", 3, 1, pad=1)                                             # 19 -> 19
    conv("fc6", 1024, k=3, pad=1)
    conv("fc7", 1024, k=1, pad=0)
    conv("conv8_1", 256, k=1, pad=0); conv("conv8_2", 512, k=3, stride=2, pad=1)   # 19 -> 10
    conv("conv9_1", 128, k=1, pad=0); conv("conv9_2", 256, k=3, stride=2, pad=1)   # 10 -> 5
    conv("conv10_1", 128, k=1, pad=0); conv("conv10_2", 256, k=3, stride=1, pad=0)  # 5 -> 3
    conv("conv11_1", 128, k=1, pad=0); conv("conv11_2", 256, k=3, stride=1, pad=0)  # 3 -> 1
    sources = ("conv4_3", "fc7", "conv8_2", "conv9_2", "conv10_2", "conv11_2")
    return _sealed(ls, sources)


def _build_toy_ssd(cfg: ToyConfig) -> NetGraph:
    c = cfg.base_channels
    ls: list[LayerSpec] = [LayerSpec("data", "data", (), {"channels": 3, "size": cfg.input_size})]
    prev = "data"

    def cbr(name, out_c, k=3, stride=1, pad=1, tap=None):
        # conv (no bias) + bn + relu; `tap` names the relu so it can be a source
        nonlocal prev
        ls.append(
            LayerSpec(name, "conv", (prev,), {"out_channels": out_c, "kernel": k, "stride": stride, "pad": pad, "bias": False})
        )
        ls.append(LayerSpec(name + "_bn", "bn", (name,)))
        rname = tap or (name + "_relu")
        ls.append(LayerSpec(rname, "relu", (name + "_bn",)))
        prev = rname
        return rname

    def pool(name, k=2, stride=2):
        nonlocal prev
        ls.append(LayerSpec(name, "pool", (prev,), {"kernel": k, "stride": stride, "pad": 0}))
        prev = name

    cbr("c1a", c); cbr("c1b", c); pool("pool1")            # S -> S/2
    cbr("c2a", 2 * c); cbr("c2b", 2 * c); pool("pool2")    # -> S/4
    cbr("c3a", 3 * c); cbr("c3b", 3 * c); pool("pool3")    # -> S/8
    cbr("c4a", 4 * c)
    s1 = cbr("c4b", 4 * c, tap="s1")                       # grid S/8
    pool("pool4")                                          # -> S/16
    cbr("fc1", 4 * c, k=3, pad=1)
    s2 = cbr("fc2", 4 * c, k=1, pad=0, tap="s2")           # grid S/16
    g2 = cfg.input_size // 16
    cbr("x1a", 2 * c, k=1, pad=0)
    s3 = cbr("x1b", 4 * c, k=3, stride=2, pad=1, tap="s3")  # grid ceil(g2/2)
    g3 = (g2 - 1) // 2 + 1
    cbr("x2a", 2 * c, k=1, pad=0)
    s4 = cbr("x2b", 4 * c, k=g3, stride=1, pad=0, tap="s4")  # grid 1
    return _sealed(ls, (s1, s2, s3, s4))


def _deconv_geometry(src_hw: int, dst_hw: int) -> tuple[int, int, int]:
    """Pick (kernel, stride, pad) so a deconv maps src spatial size onto dst."""
    if dst_hw == 2 * src_hw:
        return (2, 2, 0)
    if dst_hw == 2 * src_hw - 1:
        return (3, 2, 1)
    if src_hw == 1:
        return (dst_hw, 1, 0)
    raise GraphError(
        [f"extension module cannot upsample spatial size {src_hw} to {dst_hw}; supported: exact x2, x2-1, or from 1x1"]
    )


def make_extension_module(
    graph: NetGraph, layer_n: str, layer_n1: str, fusion: str
) -> tuple[NetGraph, str]:
    """Fuse a deconvolved deeper layer into a shallower one; returns (new graph, fused layer name).

    High branch: deconv2d(layer_n1) to layer_n's spatial size, then conv 3x3
    pad 1 + bn + relu down to layer_n's channel count.  Low branch: two conv
    3x3 pad 1 + bn + relu blocks on layer_n.  The fusion node (concat, or
    elementwise sum/prod with input weights 0.5/0.5) replaces layer_n in
    prediction_sources.
    """
    if fusion not in ("concat", "sum", "prod"):
        raise ValueError(f"fusion must be one of concat/sum/prod, got {fusion!r}")
    for nm in (layer_n, layer_n1):
        if nm not in graph:
            raise GraphError([f"extension module references unknown layer '{nm}'"])
    cn, hn, _ = graph.shape_of(layer_n)
    cd, hd, _ = graph.shape_of(layer_n1)
    k, stride, pad = _deconv_geometry(hd, hn)
    p = f"{layer_n}_ext"
    new: list[LayerSpec] = [
        LayerSpec(f"{p}_up", "deconv", (layer_n1,), {"out_channels": cd, "kernel": k, "stride": stride, "pad": pad}),
        LayerSpec(f"{p}_upconv", "conv", (f"{p}_up",), {"out_channels": cn, "kernel": 3, "stride": 1, "pad": 1, "bias": False}),
        LayerSpec(f"{p}_upconv_bn", "bn", (f"{p}_upconv",)),
        LayerSpec(f"{p}_upconv_relu", "relu", (f"{p}_upconv_bn",)),
        LayerSpec(f"{p}_lo1", "conv", (layer_n,), {"out_channels": cn, "kernel": 3, "stride": 1, "pad": 1, "bias": False}),
        LayerSpec(f"{p}_lo1_bn", "bn", (f"{p}_lo1",)),
        LayerSpec(f"{p}_lo1_relu", "relu", (f"{p}_lo1_bn",)),
        LayerSpec(f"{p}_lo2", "conv", (f"{p}_lo1_relu",), {"out_channels": cn, "kernel": 3, "stride": 1, "pad": 1, "bias": False}),
        LayerSpec(f"{p}_lo2_bn", "bn", (f"{p}_lo2",)),
        LayerSpec(f"{p}_lo2_relu", "relu", (f"{p}_lo2_bn",)),
    ]
    fuse = f"{p}_fuse"
    branches = (f"{p}_lo2_relu", f"{p}_upconv_relu")
    if fusion == "concat":
        new.append(LayerSpec(fuse, "concat", branches))
    else:
        new.append(LayerSpec(fuse, f"eltwise_{fusion}", branches, {"weights": (0.5, 0.5)}))
    sources = tuple(fuse if s == layer_n else s for s in graph.prediction_sources)
    return _sealed(list(graph._layers.values()) + new, sources), fuse


def build_essd(profile, fusion: str = "sum", extra_pred_conv: bool = True) -> NetGraph:
    """SSD plus extension modules on the first three prediction sources.

    Source i (i = 0, 1, 2) fuses with the next-deeper original source i+1.
    With ``extra_pred_conv``, a 1x1 conv (512 outputs on canonical300,
    channel-preserving on toy) is inserted between each fused source and its
    future heads.
    """
    g = build_ssd(profile)
    base_sources = g.prediction_sources
    if len(base_sources) < 4:
        raise GraphError(["extension modules need at least 4 prediction sources"])
    fused_names: list[str] = []
    for i in range(3):
        g, fuse = make_extension_module(g, base_sources[i], base_sources[i + 1], fusion)
        fused_names.append(fuse)
    if extra_pred_conv:
        layers = list(g._layers.values())
        sources = list(g.prediction_sources)
        for i, fuse in enumerate(fused_names):
            cn = 512 if profile == "canonical300" else g.shape_of(base_sources[i])[0]
            pname = f"{base_sources[i]}_pred"
            layers.append(
                LayerSpec(pname, "conv", (fuse,), {"out_channels": cn, "kernel": 1, "stride": 1, "pad": 0, "pred_conv": True})
            )
            sources[sources.index(fuse)] = pname
        g = _sealed(layers, sources)
    return g


def attach_heads(graph: NetGraph, num_classes: int, boxes_per_cell: Sequence[int]) -> NetGraph:
    """Add sibling 3x3 pad-1 conf/loc head convs on every prediction source."""
    if not graph.prediction_sources:
        raise GraphError(["attach_heads requires non-empty prediction_sources"])
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if len(boxes_per_cell) != len(graph.prediction_sources):
        raise ValueError(
            f"boxes_per_cell has {len(boxes_per_cell)} entries for {len(graph.prediction_sources)} sources"
        )
    layers = list(graph._layers.values())
    for i, (src, b) in enumerate(zip(graph.prediction_sources, boxes_per_cell)):
        layers.append(
            LayerSpec(f"head{i}_conf", "conf_head", (src,), {"boxes": int(b), "classes": int(num_classes), "kernel": 3, "stride": 1, "pad": 1})
        )
        layers.append(
            LayerSpec(f"head{i}_loc", "loc_head", (src,), {"boxes": int(b), "kernel": 3, "stride": 1, "pad": 1})
        )
    return _sealed(layers, graph.prediction_sources)


# ---------------------------------------------------------------------------
# serialization


def save_descriptor(graph: NetGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(graph.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_descriptor(path) -> NetGraph:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return graph_from_json(doc)


def graph_from_json(doc: dict) -> NetGraph:
    if not isinstance(doc, dict) or "layers" not in doc:
        raise ValueError("descriptor must be a JSON object with a 'layers' list")
    layers = []
    for entry in doc["layers"]:
        params = {k: (tuple(v) if isinstance(v, list) else v) for k, v in entry.get("params", {}).items()}
        layers.append(LayerSpec(entry["name"], entry["kind"], tuple(entry.get("inputs", ())), params))
    return _sealed(layers, tuple(doc.get("prediction_sources", ())))


def load_canonical(name: str) -> NetGraph:
    """Load a shipped descriptor: 'ssd300' or 'essd300'."""
    from importlib.resources import files

    res = files("essd.data").joinpath(f"{name}.json")
    return graph_from_json(json.loads(res.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# forward execution


def forward(
    graph: NetGraph,
    weights,
    image: T.Tensor | np.ndarray,
    mode: str = "eval",
    frozen_bn: frozenset[str] = frozenset(),
) -> dict[str, T.Tensor]:
    """Execute the graph in topo order; returns every layer's output tensor.

    ``frozen_bn`` lists bn layers that must use their running statistics even
    in train mode (so a frozen backbone's buffers stay bit-identical).
    Raises KeyError naming the layer if a weight is missing.
    """
    x = image if isinstance(image, T.Tensor) else T.Tensor(image)
    violations = validate(graph)
    if violations:
        raise GraphError(violations)
    outs: dict[str, T.Tensor] = {}
    for name in graph.topo_order():
        spec = graph[name]
        if spec.kind == "data":
            want = graph.shape_of(name)
            if x.ndim != 4 or x.shape[1:] != want:
                raise ValueError(f"input image shape {x.shape} does not match data layer (N, {want[0]}, {want[1]}, {want[2]})")
            outs[name] = x
            continue
        ins = [outs[i] for i in spec.inputs]
        if spec.kind in ("conv", "conf_head", "loc_head"):
            w = weights.param(name, "weight")
            b = weights.param(name, "bias") if weights.has(name, "bias") else None
            outs[name] = T.conv2d(ins[0], w, b, stride=int(spec.p("stride", 1)), pad=int(spec.p("pad", 0)))
        elif spec.kind == "deconv":
            w = weights.param(name, "weight")
            outs[name] = T.deconv2d(ins[0], w, stride=int(spec.p("stride", 1)), pad=int(spec.p("pad", 0)))
        elif spec.kind == "bn":
            bn_mode = "eval" if (mode == "eval" or name in frozen_bn) else "train"
            outs[name] = T.batch_norm(
                ins[0],
                weights.param(name, "gamma"),
                weights.param(name, "beta"),
                stats=weights.bn_stats(name),
                mode=bn_mode,
            )
        elif spec.kind == "relu":
            outs[name] = T.relu(ins[0])
        elif spec.kind == "pool":
            outs[name] = T.max_pool2d(ins[0], int(spec.p("kernel")), int(spec.p("stride", 1)), int(spec.p("pad", 0)))
        elif spec.kind == "concat":
            outs[name] = T.concat_channels(ins)
        elif spec.kind == "eltwise_sum":
            outs[name] = T.eltwise(ins[0], ins[1], "sum")
        elif spec.kind == "eltwise_prod":
            outs[name] = T.eltwise(ins[0], ins[1], "prod")
        else:
            raise GraphError([f"layer '{name}' has unknown kind '{spec.kind}'"])
    return outs


def head_predictions(graph: NetGraph, outs: dict[str, T.Tensor]) -> tuple[T.Tensor, T.Tensor]:
    """Flatten head maps to (N, A, classes+1) conf and (N, A, 4) loc.

    Per scale the (N, b*(C+1), H, W) map becomes rows ordered row-major over
    cells with aspect ratio innermost, matching the anchor layout.
    """
    confs, locs = [], []
    for i, (src, cname, lname) in enumerate(graph.head_pairs()):
        spec = graph[cname]
        b, c = int(spec.p("boxes")), int(spec.p("classes"))
        for t, width, sink in ((outs[cname], c + 1, confs), (outs[lname], 4, locs)):
            n, _, h, w = t.shape
            t = T.transpose(t, (0, 2, 3, 1))  # (N, H, W, b*width)
            t = T.reshape(t, (n, h * w * b, width))
            sink.append(t)
    return concat_rows(confs), concat_rows(locs)


def concat_rows(ts: list[T.Tensor]) -> T.Tensor:
    return ts[0] if len(ts) == 1 else T.concat(ts, axis=1)
