"""Weighted average depth of detector layers and its coefficient of variation.

Depth counts weight layers (conv, deconv, conf/loc heads) from the data layer:
D(data) = 0 and D(L) = sum_i w_i * D(parent_i) + delta(L), where delta is 1
for weight layers and 0 for bn/relu/pool/concat/elementwise nodes.  Input
weights w_i are 0.5/0.5 for two-input elementwise layers, uniform 1/k for
concat, and 1 for single-input layers.  All arithmetic is exact (fractions);
the coefficient of variation uses the population standard deviation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

from .graph import GraphError, NetGraph, validate

__all__ = [
    "DepthReport",
    "SourceDepth",
    "weighted_average_depth",
    "coefficient_of_variation",
    "analyze",
    "WEIGHT_KINDS",
]

WEIGHT_KINDS = frozenset({"conv", "deconv", "conf_head", "loc_head"})


def _input_weights(graph: NetGraph, name: str) -> list[Fraction]:
    spec = graph[name]
    n = len(spec.inputs)
    if n == 0:
        return []
    declared = spec.p("weights")
    if declared is not None:
        fr = [Fraction(w).limit_denominator(10**6) for w in declared]
        if sum(fr) != 1:
            raise GraphError([f"layer '{name}' input weights sum to {float(sum(fr))}, expected 1"])
        return fr
    if spec.kind in ("eltwise_sum", "eltwise_prod"):
        return [Fraction(1, 2), Fraction(1, 2)]
    return [Fraction(1, n)] * n


def _depths(graph: NetGraph) -> dict[str, Fraction]:
    depths: dict[str, Fraction] = {}
    for name in graph.topo_order():
        spec = graph[name]
        if spec.kind == "data":
            depths[name] = Fraction(0)
            continue
        acc = Fraction(0)
        for w, parent in zip(_input_weights(graph, name), spec.inputs):
            acc += w * depths[parent]
        if spec.kind in WEIGHT_KINDS:
            acc += 1
        depths[name] = acc
    return depths


def weighted_average_depth(graph: NetGraph, layer: str) -> Fraction:
    """Exact rational depth of ``layer``; memoized over the whole graph."""
    if layer not in graph:
        raise KeyError(f"unknown layer '{layer}'")
    violations = validate(graph)
    if violations:
        raise GraphError(violations)
    return _depths(graph)[layer]


def coefficient_of_variation(depths) -> float:
    """100 * population_std / mean.  Errors on an empty list or zero mean."""
    ds = [Fraction(d) for d in depths]
    if not ds:
        raise ValueError("coefficient of variation of an empty list")
    n = len(ds)
    mean = sum(ds) / n
    if mean == 0:
        raise ValueError("coefficient of variation undefined for zero mean")
    var = sum((d - mean) ** 2 for d in ds) / n  # population variance, exact
    return 100.0 * math.sqrt(float(var)) / float(mean)


@dataclass(frozen=True)
class SourceDepth:
    name: str
    scale: int  # spatial size of the source feature map
    depth: Fraction


@dataclass(frozen=True)
class DepthReport:
    sources: tuple[SourceDepth, ...]
    cv_percent: float

    @property
    def depths(self) -> list[Fraction]:
        return [s.depth for s in self.sources]

    def to_json(self) -> dict:
        return {
            "sources": [
                {
                    "name": s.name,
                    "scale": s.scale,
                    "depth_rational": f"{s.depth.numerator}/{s.depth.denominator}"
                    if s.depth.denominator != 1
                    else str(s.depth.numerator),
                    "depth": float(s.depth),
                }
                for s in self.sources
            ],
            "cv_percent": round(self.cv_percent, 2),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _reported_layer(graph: NetGraph, source: str) -> str:
    # depth is reported for the head's input feature layer; a 1x1 conv that
    # exists only to feed the heads is skipped and its input reported instead
    spec = graph[source]
    if spec.kind == "conv" and spec.p("pred_conv", False):
        return spec.inputs[0]
    return source


def analyze(graph: NetGraph) -> DepthReport:
    """Depth of every prediction source plus the cross-scale CV."""
    if not graph.prediction_sources:
        raise GraphError(["analyze requires non-empty prediction_sources"])
    violations = validate(graph)
    if violations:
        raise GraphError(violations)
    table = _depths(graph)
    sources = tuple(
        SourceDepth(name=src, scale=graph.shape_of(src)[1], depth=table[_reported_layer(graph, src)])
        for src in graph.prediction_sources
    )
    cv = coefficient_of_variation([s.depth for s in sources])
    return DepthReport(sources=sources, cv_percent=cv)
