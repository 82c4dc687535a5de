"""Depth metric tests: exact table values, CV, metric invariances."""

from fractions import Fraction

import pytest

from essd.depth import WEIGHT_KINDS, analyze, coefficient_of_variation, weighted_average_depth
from essd.graph import LayerSpec, NetGraph, ToyConfig, build_essd, build_ssd, load_canonical


def naive_depth(graph, name):
    """Independent direct-recursion evaluation (no memoization)."""
    spec = graph[name]
    if spec.kind == "data":
        return Fraction(0)
    if spec.kind in ("eltwise_sum", "eltwise_prod"):
        ws = [Fraction(1, 2), Fraction(1, 2)]
    else:
        ws = [Fraction(1, len(spec.inputs))] * len(spec.inputs)
    acc = sum(w * naive_depth(graph, p) for w, p in zip(ws, spec.inputs))
    return acc + 1 if spec.kind in WEIGHT_KINDS else acc


class TestWeightedAverageDepth:
    def test_canonical_ssd_row(self):
        g = build_ssd("canonical300")
        depths = [weighted_average_depth(g, s) for s in g.prediction_sources]
        assert depths == [10, 15, 17, 19, 21, 23]

    def test_canonical_essd_row_exact_rationals(self):
        r = analyze(build_essd("canonical300", "sum", True))
        assert r.depths == [Fraction(29, 2), 18, 20, 19, 21, 23]

    def test_linear_chain_counts_convs(self):
        layers = [LayerSpec("data", "data", (), {"channels": 3, "size": 32})]
        prev = "data"
        for i in range(5):
            layers.append(LayerSpec(f"c{i}", "conv", (prev,), {"out_channels": 4, "kernel": 3, "pad": 1}))
            layers.append(LayerSpec(f"r{i}", "relu", (f"c{i}",)))
            prev = f"r{i}"
        layers.append(LayerSpec("p", "pool", (prev,), {"kernel": 2, "stride": 2}))
        g = NetGraph(layers)
        assert weighted_average_depth(g, "p") == 5

    def test_matches_naive_recursion_on_shipped_descriptors(self):
        for name in ("ssd300", "essd300"):
            g = load_canonical(name)
            for layer in g.layers:
                assert weighted_average_depth(g, layer) == naive_depth(g, layer)

    def test_transparent_node_insertion_leaves_depths_unchanged(self):
        g = build_ssd(ToyConfig(96, 8))
        base = {s: weighted_average_depth(g, s) for s in g.prediction_sources}
        layers = list(g.layers.values())
        # reroute s1's consumers through an extra relu
        layers.append(LayerSpec("s1_extra", "relu", ("s1",)))
        rerouted = []
        for spec in layers:
            if spec.name != "s1_extra" and "s1" in spec.inputs:
                rerouted.append(
                    LayerSpec(spec.name, spec.kind, tuple("s1_extra" if i == "s1" else i for i in spec.inputs), dict(spec.params))
                )
            else:
                rerouted.append(spec)
        g2 = NetGraph(rerouted, tuple("s1_extra" if s == "s1" else s for s in g.prediction_sources))
        for s, d in base.items():
            s2 = "s1_extra" if s == "s1" else s
            assert weighted_average_depth(g2, s2) == d

    def test_conv_insertion_increments_descendants(self):
        g = build_ssd(ToyConfig(96, 8))
        layers = []
        for spec in g.layers.values():
            if spec.name == "pool4":  # splice a conv between s1 and pool4
                layers.append(LayerSpec("mid", "conv", ("s1",), {"out_channels": 32, "kernel": 3, "pad": 1}))
                layers.append(LayerSpec("pool4", "pool", ("mid",), dict(spec.params)))
            else:
                layers.append(spec)
        g2 = NetGraph(layers, g.prediction_sources)
        assert weighted_average_depth(g2, "s1") == weighted_average_depth(g, "s1")
        for s in g.prediction_sources[1:]:
            assert weighted_average_depth(g2, s) == weighted_average_depth(g, s) + 1

    def test_unknown_layer_errors(self):
        with pytest.raises(KeyError, match="nope"):
            weighted_average_depth(build_ssd("toy"), "nope")


class TestCoefficientOfVariation:
    def test_canonical_depth_lists_round_to_known_percents(self):
        assert round(coefficient_of_variation([10, 15, 17, 19, 21, 23]), 2) == pytest.approx(24.19, abs=0.005)
        assert round(coefficient_of_variation([Fraction(29, 2), 18, 20, 19, 21, 23]), 2) == pytest.approx(
            13.72, abs=0.005
        )

    def test_constant_list_is_zero(self):
        assert coefficient_of_variation([7, 7, 7]) == 0.0

    def test_empty_and_zero_mean_error(self):
        with pytest.raises(ValueError, match="empty"):
            coefficient_of_variation([])
        with pytest.raises(ValueError, match="zero mean"):
            coefficient_of_variation([0, 0])


class TestAnalyze:
    def test_report_json_shape(self):
        doc = analyze(load_canonical("essd300")).to_json()
        assert doc["cv_percent"] == 13.72
        first = doc["sources"][0]
        assert first["depth_rational"] == "29/2"
        assert first["depth"] == 14.5
        assert first["scale"] == 38

    def test_pred_conv_excluded_from_depth(self):
        with_conv = analyze(build_essd("canonical300", "sum", True))
        without = analyze(build_essd("canonical300", "sum", False))
        assert with_conv.depths == without.depths

    def test_toy_ssd_depths_strictly_increase(self):
        r = analyze(build_ssd(ToyConfig(96, 8)))
        ds = r.depths
        assert all(a < b for a, b in zip(ds, ds[1:]))

    def test_essd_cv_below_ssd_cv_for_all_toy_fusions(self):
        for size in (48, 96):
            cfg = ToyConfig(size, 8)
            ssd_cv = analyze(build_ssd(cfg)).cv_percent
            for fusion in ("sum", "prod", "concat"):
                for extra in (False, True):
                    assert analyze(build_essd(cfg, fusion, extra)).cv_percent < ssd_cv
