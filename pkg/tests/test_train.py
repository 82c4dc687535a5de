"""Tests for the phase plan, SGD update rule, and the training loop."""

import numpy as np
import pytest

from essd.graph import build_essd, build_ssd
from essd.tensor import Tensor
from essd.train import (
    BOXES_PER_CELL,
    ModelConfig,
    Phase,
    PhasePlan,
    TrainConfig,
    added_layer_set,
    anchors_for,
    build_detector,
    canonical_phase_plan,
    lr_at,
    plain_sibling,
    sgd_step,
    train,
)
from essd.weights import WeightStore, init_weights


def tiny_plan():
    return PhasePlan(
        (
            Phase("ALL", ((1e-3, 3),)),
            Phase("ADDED", ((1e-3, 3),)),
            Phase("ALL", ((1e-4, 2),)),
        )
    )


def tiny_model(variant="essd", fusion="sum", extra=True):
    return ModelConfig(
        variant=variant,
        fusion=fusion,
        extra_pred_conv=extra,
        input_size=48,
        base_channels=16,
    )


class TestPhasePlan:
    def test_canonical_totals(self):
        plan = canonical_phase_plan()
        assert [p.total_iters for p in plan.phases] == [120000, 45000, 90000]
        assert plan.total_iters == 255000
        assert plan.phases[0].trainable == "ALL"
        assert plan.phases[1].trainable == "ADDED"
        assert plan.phases[2].trainable == "ALL"

    def test_scale_rounds_and_floors_at_one(self):
        plan = canonical_phase_plan().scale(1000)
        assert plan.phases[0].segments == ((1e-3, 80), (1e-4, 20), (1e-5, 20))
        assert plan.phases[1].segments == ((1e-3, 20), (1e-4, 25))
        assert plan.total_iters == 255
        micro = canonical_phase_plan().scale(1e9)
        assert all(n == 1 for p in micro.phases for _, n in p.segments)

    def test_lr_at_boundaries(self):
        plan = canonical_phase_plan()
        assert lr_at(plan, 1, 0) == 1e-3
        assert lr_at(plan, 1, 79999) == 1e-3
        assert lr_at(plan, 1, 80000) == 1e-4
        assert lr_at(plan, 1, 99999) == 1e-4
        assert lr_at(plan, 1, 100000) == 1e-5
        assert lr_at(plan, 1, 119999) == 1e-5
        assert lr_at(plan, 2, 20000) == 1e-4
        assert lr_at(plan, 3, 89999) == 1e-6

    def test_lr_at_out_of_range(self):
        plan = canonical_phase_plan()
        for phase, it in [(0, 0), (4, 0), (1, -1), (1, 120000)]:
            with pytest.raises(IndexError):
                lr_at(plan, phase, it)

    def test_phase_validation(self):
        with pytest.raises(ValueError):
            Phase("ALL", ((1e-4, 10), (1e-3, 10)))  # increasing lr
        with pytest.raises(ValueError):
            Phase("ALL", ((1e-3, 0),))
        with pytest.raises(ValueError):
            Phase("SOME", ((1e-3, 1),))
        with pytest.raises(ValueError):
            Phase("ALL", ())
        with pytest.raises(ValueError):
            canonical_phase_plan().scale(0)


class TestSgdStep:
    def one_param_store(self, value):
        store = WeightStore()
        store.add("layer", "weight", np.array(value, dtype=np.float32))
        return store

    def test_single_step_hand_value(self):
        store = self.one_param_store([1.0])
        sgd_step(store, {"layer.weight": np.array([1.0], dtype=np.float32)}, {}, 0.1, 0.0, 0.0)
        np.testing.assert_allclose(store.param("layer", "weight").data, [0.9])

    def test_momentum_two_steps(self):
        store = self.one_param_store([1.0])
        vel = {}
        g = np.array([1.0], dtype=np.float32)
        sgd_step(store, {"layer.weight": g}, vel, 0.1, 0.9, 0.0)
        np.testing.assert_allclose(store.param("layer", "weight").data, [0.9])
        sgd_step(store, {"layer.weight": g}, vel, 0.1, 0.9, 0.0)
        # v2 = 0.9*1 + 1 = 1.9 so w = 0.9 - 0.19
        np.testing.assert_allclose(store.param("layer", "weight").data, [0.71], rtol=1e-6)

    def test_weight_decay_enters_velocity(self):
        store = self.one_param_store([2.0])
        sgd_step(store, {"layer.weight": np.array([0.0], dtype=np.float32)}, {}, 0.5, 0.0, 0.1)
        # v = 0 + 0.1*2 = 0.2 so w = 2 - 0.1
        np.testing.assert_allclose(store.param("layer", "weight").data, [1.9])

    def test_frozen_layer_untouched(self):
        store = self.one_param_store([1.0])
        store.add("other", "weight", np.array([5.0], dtype=np.float32))
        vel = {}
        sgd_step(
            store,
            {"other.weight": np.array([1.0], dtype=np.float32)},
            vel,
            0.1,
            0.9,
            0.0,
            frozen=frozenset({"layer"}),
        )
        np.testing.assert_allclose(store.param("layer", "weight").data, [1.0])
        np.testing.assert_allclose(store.param("other", "weight").data, [4.9])
        assert "layer.weight" not in vel

    def test_missing_grad_raises(self):
        store = self.one_param_store([1.0])
        with pytest.raises(RuntimeError, match="layer.weight"):
            sgd_step(store, {}, {}, 0.1, 0.9, 0.0)

    def test_unknown_frozen_layer_raises(self):
        store = self.one_param_store([1.0])
        with pytest.raises(KeyError):
            sgd_step(store, {}, {}, 0.1, 0.9, 0.0, frozen=frozenset({"ghost"}))


class TestAnchorsFor:
    def test_toy_layout(self):
        graph = build_detector(tiny_model("ssd"))
        anchors = anchors_for(graph)
        assert anchors.grid_sizes == (6, 3, 2, 1)
        assert len(anchors) == BOXES_PER_CELL * (36 + 9 + 4 + 1)
        assert anchors.scales[0] == pytest.approx(0.1)
        assert anchors.scales[-1] == pytest.approx(0.5)

    def test_headless_graph_rejected(self):
        with pytest.raises(ValueError):
            anchors_for(build_ssd(tiny_model("ssd").toy))


class TestAddedLayerSet:
    def test_extension_and_pred_layers_only(self):
        model = tiny_model()
        added = added_layer_set(build_detector(model), plain_sibling(model))
        assert {"s1_pred", "s2_pred", "s3_pred"} <= added
        assert any("_ext_" in n for n in added)
        for name in added:
            assert "_ext_" in name or name.endswith("_pred")
        assert not any(name.startswith(("c1", "c2", "head")) for name in added)

    def test_identical_graphs_rejected(self):
        model = tiny_model("ssd")
        g = build_detector(model)
        with pytest.raises(ValueError):
            added_layer_set(g, g)


class TestTrain:
    def run_tiny(self, variant="essd", phases=None, seed=0, init_store=None):
        model = tiny_model(variant)
        graph = build_detector(model)
        config = TrainConfig(batch_size=4, seed=seed, plan=tiny_plan(), n_images=4)
        store, log = train(graph, config, model, phases=phases, init_store=init_store)
        return model, graph, store, log

    def test_log_shape_and_determinism(self):
        _, _, store_a, log_a = self.run_tiny()
        _, _, store_b, log_b = self.run_tiny()
        assert len(log_a) == 8  # 3 + 3 + 2 iterations
        assert [r["phase"] for r in log_a] == [1, 1, 1, 2, 2, 2, 3, 3]
        assert [r["iter"] for r in log_a] == [0, 1, 2, 0, 1, 2, 0, 1]
        for r in log_a:
            assert set(r) == {
                "phase", "iter", "lr", "total", "conf_pos", "conf_neg", "loc", "num_pos", "num_mined_neg",
            }
            assert np.isfinite(r["total"])
        assert log_a == log_b
        for key, t in store_a.items():
            np.testing.assert_array_equal(t.data, store_b.param(*key.rsplit(".", 1)).data)

    def test_phase2_freezes_transferred_layers_bitwise(self):
        model, graph, store1, _ = self.run_tiny(phases=[1])
        _, _, store12, _ = self.run_tiny(phases=[1, 2])
        added = added_layer_set(graph, plain_sibling(model))
        changed = []
        for key, t in store12.items():
            layer = key.rsplit(".", 1)[0]
            same = np.array_equal(t.data, store1.param(layer, key.rsplit(".", 1)[1]).data)
            if layer in added:
                if not same:
                    changed.append(key)
            else:
                assert same, f"frozen parameter {key} moved in phase 2"
        assert changed, "phase 2 updated nothing"

    def test_ssd_variant_restricted_to_phase_one(self):
        with pytest.raises(ValueError):
            self.run_tiny("ssd", phases=[1, 2])
        _, _, _, log = self.run_tiny("ssd")
        assert [r["phase"] for r in log] == [1, 1, 1]

    def test_later_phase_requires_init_store(self):
        with pytest.raises(ValueError):
            self.run_tiny(phases=[2])

    def test_phases_must_increase(self):
        model = tiny_model()
        graph = build_detector(model)
        store = init_weights(graph, 0)
        config = TrainConfig(batch_size=4, seed=0, plan=tiny_plan(), n_images=4)
        with pytest.raises(ValueError):
            train(graph, config, model, phases=[2, 1], init_store=store)

    def test_resume_phase2_from_store_matches_full_run(self):
        model, graph, store1, log1 = self.run_tiny(phases=[1])
        _, _, resumed, log2 = self.run_tiny(phases=[2], init_store=store1.copy())
        _, _, full, log_full = self.run_tiny(phases=[1, 2])
        assert log1 + log2 == log_full
        for key, t in full.items():
            np.testing.assert_array_equal(t.data, resumed.param(*key.rsplit(".", 1)).data)

    def test_loss_decreases_on_plain_detector(self):
        drops = []
        for seed in range(3):
            model = tiny_model("ssd")
            graph = build_detector(model)
            plan = PhasePlan((Phase("ALL", ((1e-3, 24),)),))
            config = TrainConfig(batch_size=4, seed=seed, plan=plan, n_images=4)
            _, log = train(graph, config, model)
            totals = [r["total"] for r in log]
            drops.append(np.mean(totals[:4]) - np.mean(totals[-4:]))
        assert np.mean(drops) > 0, f"loss did not decrease: {drops}"
