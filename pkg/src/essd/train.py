"""Three-phase training: plain detector first, added layers next, full fine-tune.

Phase 1 trains the plain SSD-style graph end to end.  For a fused detector,
its weights are then transferred by name+shape into the extended graph, and
phase 2 trains exactly the layers that could not be transferred (extension
modules, extra prediction convs, and any heads whose shapes changed) while
the transferred layers, including their bn buffers, stay bit-identical.
Phase 3 fine-tunes everything.  All stochasticity (init, dataset, batch
sampling) derives from one integer seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .anchors import AnchorSet, generate_anchors, match
from .dataset import CLASS_NAMES, SynthSample, synth_dataset
from .graph import NetGraph, ToyConfig, attach_heads, build_essd, build_ssd, forward, head_predictions
from .loss import multibox
from .weights import WeightStore, init_weights

__all__ = [
    "Phase",
    "PhasePlan",
    "ModelConfig",
    "TrainConfig",
    "canonical_phase_plan",
    "lr_at",
    "sgd_step",
    "anchors_for",
    "build_detector",
    "plain_sibling",
    "added_layer_set",
    "train",
]

ASPECT_RATIOS = (1.0, 2.0, 0.5, 3.0, 1.0 / 3.0)


@dataclass(frozen=True)
class Phase:
    """One training phase: which layers move ('ALL', 'ADDED', or a name set) and its lr segments."""

    trainable: object  # "ALL" | "ADDED" | frozenset of layer names
    segments: tuple[tuple[float, int], ...]

    def __post_init__(self):
        if isinstance(self.trainable, str):
            if self.trainable not in ("ALL", "ADDED"):
                raise ValueError(f"trainable must be 'ALL', 'ADDED', or a set of names, got {self.trainable!r}")
        else:
            object.__setattr__(self, "trainable", frozenset(self.trainable))
        if not self.segments:
            raise ValueError("a phase needs at least one (lr, iterations) segment")
        lrs = [lr for lr, _ in self.segments]
        if any(lr <= 0 for lr in lrs) or any(n < 1 for _, n in self.segments):
            raise ValueError("segments need positive learning rates and iteration counts")
        if any(a < b for a, b in zip(lrs, lrs[1:])):
            raise ValueError("learning rates must be non-increasing within a phase")

    @property
    def total_iters(self) -> int:
        return sum(n for _, n in self.segments)


@dataclass(frozen=True)
class PhasePlan:
    phases: tuple[Phase, ...]

    def scale(self, factor: float) -> "PhasePlan":
        """Divide every iteration count by ``factor``, keeping at least 1 per segment."""
        if factor <= 0:
            raise ValueError(f"scale factor must be positive, got {factor}")
        return PhasePlan(
            tuple(
                Phase(p.trainable, tuple((lr, max(1, round(n / factor))) for lr, n in p.segments))
                for p in self.phases
            )
        )

    @property
    def total_iters(self) -> int:
        return sum(p.total_iters for p in self.phases)


def canonical_phase_plan() -> PhasePlan:
    """The canonical three-phase schedule at full iteration counts."""
    return PhasePlan(
        (
            Phase("ALL", ((1e-3, 80000), (1e-4, 20000), (1e-5, 20000))),
            Phase("ADDED", ((1e-3, 20000), (1e-4, 25000))),
            Phase("ALL", ((1e-3, 20000), (1e-4, 20000), (1e-5, 30000), (1e-6, 20000))),
        )
    )


def lr_at(plan: PhasePlan, phase: int, iteration: int) -> float:
    """Piecewise-constant lookup; ``phase`` is 1-based, ``iteration`` 0-based within the phase."""
    if not 1 <= phase <= len(plan.phases):
        raise IndexError(f"phase {phase} out of range 1..{len(plan.phases)}")
    if iteration < 0:
        raise IndexError(f"iteration {iteration} negative")
    off = iteration
    for lr, n in plan.phases[phase - 1].segments:
        if off < n:
            return lr
        off -= n
    raise IndexError(
        f"iteration {iteration} beyond phase {phase} total {plan.phases[phase - 1].total_iters}"
    )


@dataclass(frozen=True)
class ModelConfig:
    """Which detector to assemble (toy profiles)."""

    variant: str = "essd"  # "ssd" | "essd"
    fusion: str = "sum"
    extra_pred_conv: bool = True
    input_size: int = 96
    base_channels: int = 16
    num_classes: int = len(CLASS_NAMES)

    def __post_init__(self):
        if self.variant not in ("ssd", "essd"):
            raise ValueError(f"variant must be 'ssd' or 'essd', got {self.variant!r}")

    @property
    def toy(self) -> ToyConfig:
        return ToyConfig(input_size=self.input_size, base_channels=self.base_channels)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    plan: PhasePlan = field(default_factory=lambda: canonical_phase_plan().scale(1000))
    n_images: int = 16

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.n_images < 1:
            raise ValueError(f"n_images must be >= 1, got {self.n_images}")


BOXES_PER_CELL = 3


def plain_sibling(model: ModelConfig) -> NetGraph:
    """The headed plain-SSD graph that seeds phase 1 for this model config."""
    g = build_ssd(model.toy)
    return attach_heads(g, model.num_classes, [BOXES_PER_CELL] * len(g.prediction_sources))


def build_detector(model: ModelConfig) -> NetGraph:
    """Headed graph for a model config; every head gets the 3-ratio anchor family."""
    if model.variant == "ssd":
        return plain_sibling(model)
    g = build_essd(model.toy, model.fusion, model.extra_pred_conv)
    return attach_heads(g, model.num_classes, [BOXES_PER_CELL] * len(g.prediction_sources))


def anchors_for(graph: NetGraph) -> AnchorSet:
    """Anchor layout implied by a headed graph: grids from the sources, sizes geometric 0.1..0.5."""
    pairs = graph.head_pairs()
    if not pairs:
        raise ValueError("graph has no prediction heads")
    grids = [graph.shape_of(src)[1] for src, _, _ in pairs]
    ratios = []
    for _, cname, _ in pairs:
        b = int(graph[cname].p("boxes"))
        if b > len(ASPECT_RATIOS):
            raise ValueError(f"no aspect-ratio preset for {b} boxes per cell")
        ratios.append(list(ASPECT_RATIOS[:b]))
    k = len(grids)
    scales = [0.1] * k if k == 1 else [float(s) for s in np.geomspace(0.1, 0.5, k)]
    return generate_anchors(scales, ratios, grids)


def sgd_step(
    weights: WeightStore,
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
    frozen: frozenset[str] = frozenset(),
) -> None:
    """v <- momentum*v + g + wd*w; w <- w - lr*v.  Frozen layers keep weights AND velocity."""
    unknown = frozen - weights.layer_names()
    if unknown:
        raise KeyError(f"frozen set references unknown layers: {sorted(unknown)}")
    for key, t in weights.trainable_items():
        layer = key.rsplit(".", 1)[0]
        if layer in frozen or not t.requires_grad:
            continue
        if key not in grads:
            raise RuntimeError(f"missing gradient for trainable parameter '{key}'")
        v = velocity.get(key)
        if v is None:
            v = np.zeros_like(t.data)
        v = momentum * v + grads[key] + weight_decay * t.data
        velocity[key] = v
        t.data -= (lr * v).astype(t.data.dtype)


def added_layer_set(graph: NetGraph, base_graph: NetGraph, seed: int = 0) -> frozenset[str]:
    """Layers of ``graph`` that a name+shape transfer from ``base_graph`` cannot fill.

    Determined structurally: both graphs get fresh init weights and the
    skipped keys of a dry transfer name the added layers, so the answer is
    the same whether phase-1 weights came from this process or from disk.
    """
    a = init_weights(graph, seed)
    b = init_weights(base_graph, seed)
    _, skipped = a.transfer_from(b)
    added = frozenset(k.rsplit(".", 1)[0] for k in skipped)
    if not added:
        raise ValueError("no added layers: the graph transfers completely from its base")
    return added


def _grad_name_map(store: WeightStore, grads: dict) -> dict[str, np.ndarray]:
    out = {}
    for key, t in store.trainable_items():
        if t.requires_grad and t in grads:
            out[key] = grads[t]
    return out


def _run_phase(
    graph: NetGraph,
    store: WeightStore,
    phase_no: int,
    phase: Phase,
    config: TrainConfig,
    dataset: list[SynthSample],
    matches: list,
    log: list[dict],
) -> None:
    if phase.trainable == "ALL":
        store.set_trainable(None)
        frozen: frozenset[str] = frozenset()
    else:
        names = frozenset(phase.trainable)
        unknown = names - set(graph.layers)
        if unknown:
            raise KeyError(f"trainable set references unknown layers: {sorted(unknown)}")
        store.set_trainable(names)
        frozen = frozenset(store.layer_names()) - names
    frozen_bn = frozenset(n for n in frozen if n in graph.layers and graph[n].kind == "bn")
    rng = np.random.default_rng([config.seed, phase_no])
    velocity: dict[str, np.ndarray] = {}
    images = np.stack([s.image for s in dataset])
    it = 0
    for lr, n_iters in phase.segments:
        for _ in range(n_iters):
            idx = rng.choice(len(dataset), size=min(config.batch_size, len(dataset)), replace=False)
            batch = T.Tensor(images[idx])
            with T.GradTape() as tape:
                outs = forward(graph, store, batch, mode="train", frozen_bn=frozen_bn)
                conf, loc = head_predictions(graph, outs)
                totals = None
                agg = {"conf_pos": 0.0, "conf_neg": 0.0, "loc": 0.0, "num_pos": 0, "num_mined_neg": 0}
                for row, img_i in enumerate(idx):
                    conf_i = T.reshape(T.take(conf, [row]), conf.shape[1:])
                    loc_i = T.reshape(T.take(loc, [row]), loc.shape[1:])
                    lb = multibox(conf_i, loc_i, matches[img_i])
                    totals = lb.total if totals is None else T.add(totals, lb.total)
                    agg["conf_pos"] += lb.conf_pos
                    agg["conf_neg"] += lb.conf_neg
                    agg["loc"] += lb.loc
                    agg["num_pos"] += lb.num_pos
                    agg["num_mined_neg"] += lb.num_mined_neg
                loss = T.scale(totals, 1.0 / len(idx))
                grads = T.backward(loss, tape)
            sgd_step(
                store, _grad_name_map(store, grads), velocity, lr, config.momentum, config.weight_decay, frozen
            )
            b = len(idx)
            log.append(
                {
                    "phase": phase_no,
                    "iter": it,
                    "lr": lr,
                    "total": float(loss.item()),
                    "conf_pos": agg["conf_pos"] / b,
                    "conf_neg": agg["conf_neg"] / b,
                    "loc": agg["loc"] / b,
                    "num_pos": int(agg["num_pos"]),
                    "num_mined_neg": int(agg["num_mined_neg"]),
                }
            )
            it += 1


def train(
    graph: NetGraph,
    config: TrainConfig,
    model: ModelConfig | None = None,
    phases: Sequence[int] | None = None,
    init_store: WeightStore | None = None,
) -> tuple[WeightStore, list[dict]]:
    """Run the phase plan on ``graph``; returns (weights, per-iteration log records).

    For an extended model, phase 1 trains the plain sibling and its weights
    seed the extended graph; a plain model has only phase 1.  ``phases``
    selects a 1-based increasing subset; starting past phase 1 requires
    ``init_store`` (the preceding phase's weights for ``graph``).
    """
    model = model or ModelConfig()
    plan = config.plan
    if model.variant == "ssd":
        wanted = [1] if phases is None else list(phases)
        if any(p != 1 for p in wanted):
            raise ValueError("plain-SSD training has only phase 1")
    else:
        wanted = list(phases) if phases is not None else list(range(1, len(plan.phases) + 1))
    if not wanted or sorted(set(wanted)) != wanted:
        raise ValueError(f"phases must be non-empty and strictly increasing, got {wanted}")
    for p in wanted:
        if not 1 <= p <= len(plan.phases):
            raise ValueError(f"phase {p} out of range 1..{len(plan.phases)}")
    if wanted[0] != 1 and init_store is None:
        raise ValueError(f"starting at phase {wanted[0]} requires initial weights from phase {wanted[0] - 1}")

    dataset = synth_dataset(config.seed, config.n_images, model.input_size)
    log: list[dict] = []
    base_graph = plain_sibling(model) if model.variant == "essd" else graph
    anchors = anchors_for(graph)
    matches = [match(anchors, s.gts) for s in dataset]

    store = init_store
    for p in wanted:
        phase = plan.phases[p - 1]
        if model.variant == "essd" and p == 1:
            # phase 1 runs on the plain sibling; the fused layers do not exist yet
            base_store = init_weights(base_graph, config.seed)
            base_anchors = anchors_for(base_graph)
            base_matches = [match(base_anchors, s.gts) for s in dataset]
            _run_phase(
                base_graph, base_store, 1, replace(phase, trainable="ALL"), config, dataset, base_matches, log
            )
            store = init_weights(graph, config.seed)
            store.transfer_from(base_store)
        else:
            if store is None:
                store = init_weights(graph, config.seed)
            resolved = phase
            if phase.trainable == "ADDED":
                resolved = replace(phase, trainable=added_layer_set(graph, base_graph, config.seed))
            _run_phase(graph, store, p, resolved, config, dataset, matches, log)
        store.set_trainable(None)
    return store, log
