"""Parameter storage: per-layer tensors, deterministic init, binary weight files.

Keys are ``"<layer>.<slot>"`` with slots ``weight``, ``bias``, ``gamma``,
``beta`` (trainable) and ``running_mean``, ``running_var``, ``batches``
(batch-norm buffers).  The file format is little-endian binary: magic "ESWT",
u32 version 1, u32 tensor count, then per tensor u32 name length, UTF-8 name,
u32 rank, u32 dims, raw float32 data; tensors are written sorted by name so
files are byte-stable.
"""

from __future__ import annotations

import struct
from typing import Iterable

import numpy as np

from .graph import NetGraph
from .tensor import RunningStats, Tensor

__all__ = ["WeightStore", "init_weights", "save_weights", "load_weights"]

MAGIC = b"ESWT"
VERSION = 1
TRAINABLE_SLOTS = ("weight", "bias", "gamma", "beta")
BUFFER_SLOTS = ("running_mean", "running_var", "batches")


class WeightStore:
    """Mutable name -> Tensor map for one graph's parameters and bn buffers."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, key: str) -> bool:
        return key in self._tensors

    def keys(self) -> list[str]:
        return list(self._tensors)

    def add(self, layer: str, slot: str, data: np.ndarray) -> Tensor:
        key = f"{layer}.{slot}"
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=slot in TRAINABLE_SLOTS)
        self._tensors[key] = t
        return t

    def has(self, layer: str, slot: str) -> bool:
        return f"{layer}.{slot}" in self._tensors

    def param(self, layer: str, slot: str) -> Tensor:
        key = f"{layer}.{slot}"
        if key not in self._tensors:
            raise KeyError(f"weight store has no '{slot}' for layer '{layer}'")
        return self._tensors[key]

    def get(self, key: str) -> Tensor:
        return self._tensors[key]

    def bn_stats(self, layer: str) -> RunningStats:
        return RunningStats(
            mean=self.param(layer, "running_mean").data,
            var=self.param(layer, "running_var").data,
            count=self.param(layer, "batches").data,
        )

    def items(self):
        return self._tensors.items()

    def layer_names(self) -> set[str]:
        return {k.rsplit(".", 1)[0] for k in self._tensors}

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self._tensors.items() if k.rsplit(".", 1)[1] in TRAINABLE_SLOTS]

    def set_trainable(self, layers: Iterable[str] | None) -> None:
        """Restrict grad tracking to the given layers (None means all layers)."""
        allowed = None if layers is None else set(layers)
        for key, t in self._tensors.items():
            layer, slot = key.rsplit(".", 1)
            if slot in TRAINABLE_SLOTS:
                t.requires_grad = allowed is None or layer in allowed

    def copy(self) -> "WeightStore":
        dup = WeightStore()
        for key, t in self._tensors.items():
            layer, slot = key.rsplit(".", 1)
            dup.add(layer, slot, t.data.copy())
        return dup

    def transfer_from(self, src: "WeightStore") -> tuple[list[str], list[str]]:
        """Copy every name+shape-matching tensor from ``src``; returns (loaded, skipped) keys."""
        loaded, skipped = [], []
        for key, t in self._tensors.items():
            if key in src._tensors and src._tensors[key].shape == t.shape:
                t.data[...] = src._tensors[key].data
                loaded.append(key)
            else:
                skipped.append(key)
        return loaded, skipped


def _bilinear_kernel(k: int) -> np.ndarray:
    # near-identity upsampling stamps: k2/s2 replicates, k3/s2 interpolates,
    # k x k from a 1x1 map broadcasts
    if k == 2:
        line = np.ones(2)
    elif k == 3:
        line = np.array([0.5, 1.0, 0.5])
    else:
        line = np.ones(k)
    return np.outer(line, line).astype(np.float32)


def init_weights(graph: NetGraph, seed: int = 0) -> WeightStore:
    """Deterministic init: fan-in uniform convs, bilinear deconvs, unit bn."""
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for name in graph.topo_order():
        spec = graph[name]
        if spec.kind in ("conv", "conf_head", "loc_head"):
            cin = graph.shape_of(spec.inputs[0])[0]
            cout = graph.shape_of(name)[0]
            k = int(spec.p("kernel"))
            limit = np.sqrt(6.0 / (cin * k * k))
            store.add(name, "weight", rng.uniform(-limit, limit, (cout, cin, k, k)))
            if spec.p("bias", True) or spec.kind != "conv":
                store.add(name, "bias", np.zeros(cout))
        elif spec.kind == "deconv":
            cin = graph.shape_of(spec.inputs[0])[0]
            cout = graph.shape_of(name)[0]
            k = int(spec.p("kernel"))
            w = np.zeros((cin, cout, k, k), dtype=np.float32)
            if cin == cout:
                w[np.arange(cin), np.arange(cin)] = _bilinear_kernel(k)
            else:
                limit = np.sqrt(6.0 / (cin * k * k))
                w[...] = rng.uniform(-limit, limit, w.shape)
            store.add(name, "weight", w)
        elif spec.kind == "bn":
            c = graph.shape_of(name)[0]
            store.add(name, "gamma", np.ones(c))
            store.add(name, "beta", np.zeros(c))
            store.add(name, "running_mean", np.zeros(c))
            store.add(name, "running_var", np.ones(c))
            store.add(name, "batches", np.zeros(1))
    return store


def save_weights(store: WeightStore, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(store)))
        for key in sorted(store.keys()):
            data = np.ascontiguousarray(store.get(key).data, dtype="<f4")
            name = key.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_weights(path) -> WeightStore:
    """Read an ESWT file back into a store; malformed content raises ValueError."""
    store = WeightStore()
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def pull(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"weight file truncated at byte {off}")
        out = blob[off : off + n]
        off += n
        return out

    if pull(4) != MAGIC:
        raise ValueError("not a weight file: bad magic")
    version, count = struct.unpack("<II", pull(8))
    if version != VERSION:
        raise ValueError(f"unsupported weight file version {version}")
    for _ in range(count):
        (nlen,) = struct.unpack("<I", pull(4))
        key = pull(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", pull(4))
        shape = struct.unpack(f"<{rank}I", pull(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(pull(4 * size), dtype="<f4").reshape(shape).copy()
        if "." not in key:
            raise ValueError(f"malformed tensor name '{key}'")
        layer, slot = key.rsplit(".", 1)
        store.add(layer, slot, data)
    if off != len(blob):
        raise ValueError(f"{len(blob) - off} trailing bytes after last tensor")
    return store
