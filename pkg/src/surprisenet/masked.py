"""Per-weight task assignment for PackNet-style parameter isolation.

Every weight of a :class:`MaskedLinear` carries a task id (``uint8``;
:data:`FREE` marks unassigned capacity). A task's lifecycle is driven by a
:class:`TaskRegistry`::

    registry.begin_task(rng)        # FREE weights re-initialised, trainable
    ... train with gate_gradients ...
    prune(layer, lam)               # smallest candidates go back to FREE
    ... retrain survivors ...
    freeze_current(registry)        # survivors + bias snapshot immutable

Visibility ``k`` selects the task-specific subset: weights assigned to any
task ``<= k`` plus the bias snapshot saved when task ``k`` was frozen.
"""

from __future__ import annotations

import io
import json
import math
import struct
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import CapacityExhaustedError, DataFormatError, TaskStateError
from .tensor import Tensor, linear

FREE = 255
MAX_TASKS = 255


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


class MaskedLinear:
    """Affine layer ``y = x @ W.T + b`` with a task id per weight."""

    def __init__(self, in_features: int, out_features: int, name: str = "", dtype=np.float32):
        if in_features <= 0 or out_features <= 0:
            raise ValueError("layer dimensions must be positive")
        self.in_features = in_features
        self.out_features = out_features
        self.name = name
        self.weight = Tensor(np.zeros((out_features, in_features), dtype=dtype), trainable=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), trainable=True, name=f"{name}.bias")
        self.assignment = np.full((out_features, in_features), FREE, dtype=np.uint8)
        self.bias_snapshots: list[np.ndarray] = []
        self.current_task = 0
        # FREE weights are candidates for the current task until it is pruned
        self.candidates_open = True

    @property
    def size(self) -> int:
        return self.assignment.size

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def counts(self) -> dict:
        ids, n = np.unique(self.assignment, return_counts=True)
        out = {"free": 0}
        for i, c in zip(ids.tolist(), n.tolist()):
            out["free" if i == FREE else int(i)] = int(c)
        return out

    def visible_mask(self, k: int, training: bool = False) -> np.ndarray:
        mask = self.assignment <= k
        if training and k == self.current_task and self.candidates_open:
            mask |= self.assignment == FREE
        return mask

    def forward_visible(self, x, k: int | None, training: bool = False) -> Tensor:
        """Apply the layer as seen by task ``k``.

        ``k=None`` ignores assignments entirely (plain dense layer); the
        naive and joint baselines use it.
        """
        if k is None:
            return linear(x, self.weight, self.bias)
        if k < 0 or k > self.current_task:
            raise TaskStateError(f"visibility {k} exceeds current task {self.current_task}")
        if k == self.current_task:
            bias = self.bias
        else:
            bias = Tensor(self.bias_snapshots[k])
        return linear(x, self.weight, bias, self.visible_mask(k, training))

    def freeze_indicator(self) -> np.ndarray:
        """1 where the weight may still change (current task or FREE)."""
        return self.assignment >= self.current_task

    def gate_gradients(self, grads: dict) -> dict:
        """Zero the weight gradient on every weight frozen by an earlier task."""
        g = grads.get(self.weight)
        if g is not None:
            grads[self.weight] = np.where(self.freeze_indicator(), g, g.dtype.type(0))
        return grads

    def prune(self, lam: float) -> int:
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"prune proportion must be in [0, 1], got {lam}")
        if not self.candidates_open:
            raise TaskStateError(f"layer {self.name!r} already pruned for task {self.current_task}")
        flat_assign = self.assignment.reshape(-1)
        flat_w = self.weight.data.reshape(-1)
        cand = np.flatnonzero(flat_assign == FREE)
        n_prune = int(math.floor(lam * cand.size + 1e-9))
        order = np.argsort(np.abs(flat_w[cand]), kind="stable")
        pruned = cand[order[:n_prune]]
        survivors = cand[order[n_prune:]]
        w = self.weight.data.copy()
        w.reshape(-1)[pruned] = 0
        self.weight.data = w
        flat_assign[survivors] = self.current_task
        self.candidates_open = False
        return n_prune

    def reinit_free(self, rng: np.random.Generator) -> None:
        free = self.assignment == FREE
        a = glorot_bound(self.in_features, self.out_features)
        draws = rng.uniform(-a, a, size=self.assignment.shape).astype(self.weight.dtype)
        self.weight.data = np.where(free, draws, self.weight.data)

    def zero_free(self) -> None:
        self.weight.data = np.where(self.assignment == FREE, self.weight.dtype.type(0), self.weight.data)


class TaskRegistry:
    """Tracks the task currently being trained across a set of layers."""

    def __init__(self, layers: Sequence[MaskedLinear], total_tasks_planned: int | None = None):
        self.layers = list(layers)
        self.total_tasks_planned = total_tasks_planned
        self.current_task = 0
        self.active = False

    def counts(self) -> dict[str, dict]:
        return {layer.name: layer.counts() for layer in self.layers}

    def capacity_remaining(self) -> float:
        free = sum(int((l.assignment == FREE).sum()) for l in self.layers)
        return free / sum(l.size for l in self.layers)

    def begin_task(self, rng: np.random.Generator) -> None:
        if self.active:
            raise TaskStateError(f"task {self.current_task} is already in progress")
        if self.current_task >= MAX_TASKS:
            raise CapacityExhaustedError(f"at most {MAX_TASKS} tasks are supported")
        for layer in self.layers:
            if not (layer.assignment == FREE).any():
                raise CapacityExhaustedError(f"layer {layer.name!r} has no FREE weights for task {self.current_task}")
        for layer in self.layers:
            layer.candidates_open = True
            layer.reinit_free(rng)
        self.active = True

    def gate_gradients(self, grads: dict) -> dict:
        for layer in self.layers:
            layer.gate_gradients(grads)
        return grads

    def prune(self, lam: float) -> dict[str, int]:
        if not self.active:
            raise TaskStateError("prune called with no task in progress")
        return {layer.name: layer.prune(lam) for layer in self.layers}


def forward_visible(layer: MaskedLinear, x, k: int | None, training: bool = False) -> Tensor:
    return layer.forward_visible(x, k, training)


def gate_gradients(layer: MaskedLinear, grads: dict) -> dict:
    return layer.gate_gradients(grads)


def prune(layer: MaskedLinear, lam: float) -> int:
    return layer.prune(lam)


def freeze_current(registry: TaskRegistry, layers: Iterable[MaskedLinear] | None = None) -> None:
    """Make the current task's weights and bias immutable and advance the task id.

    Candidates never pruned are kept whole (equivalent to a zero prune).
    FREE weights are held at 0.0 until the next :meth:`TaskRegistry.begin_task`.
    """
    if not registry.active:
        raise TaskStateError(f"task {registry.current_task} was not trained since the last freeze")
    layers = registry.layers if layers is None else list(layers)
    for layer in layers:
        if layer.candidates_open:
            layer.prune(0.0)
        layer.zero_free()
        layer.bias_snapshots.append(layer.bias.data.copy())
        layer.current_task += 1
        layer.candidates_open = True
    registry.current_task += 1
    registry.active = False


def eqprune_lambda(t: int, total: int) -> float:
    """Prune proportion for the 1-indexed task ``t`` that leaves each of ``total`` tasks an equal share."""
    if total < 1 or t < 1 or t > total:
        raise ValueError(f"task position {t} outside [1, {total}]")
    return (total - t) / (total - t + 1)


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"SNETCKPT"
CHECKPOINT_VERSION = 1


def write_checkpoint(fp: BinaryIO, registry: TaskRegistry, metadata: dict | None = None) -> None:
    """Serialize all layers and registry state, little-endian.

    Layout: magic, u32 version, u32 metadata length + UTF-8 JSON, u32
    current_task, i32 total_tasks_planned (-1 if unknown), u8 active, u32
    layer count, then per layer a header (name, out, in, snapshot count,
    candidates_open) followed by f32 weights, u8 assignment, f32 live bias
    and each f32 bias snapshot.
    """
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    fp.write(CHECKPOINT_MAGIC)
    fp.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
    fp.write(meta)
    planned = -1 if registry.total_tasks_planned is None else registry.total_tasks_planned
    fp.write(struct.pack("<IiBI", registry.current_task, planned, int(registry.active), len(registry.layers)))
    for layer in registry.layers:
        name = layer.name.encode("utf-8")
        fp.write(struct.pack("<I", len(name)))
        fp.write(name)
        fp.write(struct.pack("<IIIB", layer.out_features, layer.in_features, len(layer.bias_snapshots), int(layer.candidates_open)))
        fp.write(layer.weight.data.astype("<f4").tobytes())
        fp.write(layer.assignment.astype(np.uint8).tobytes())
        fp.write(layer.bias.data.astype("<f4").tobytes())
        for snap in layer.bias_snapshots:
            fp.write(snap.astype("<f4").tobytes())


def _read(fp: BinaryIO, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise DataFormatError("truncated checkpoint")
    return buf


def read_checkpoint(fp: BinaryIO) -> tuple[dict, dict, list[dict]]:
    """Return ``(metadata, registry_state, layer_states)``."""
    if _read(fp, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise DataFormatError("not a checkpoint file")
    version, meta_len = struct.unpack("<II", _read(fp, 8))
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    meta = json.loads(_read(fp, meta_len).decode("utf-8"))
    current, planned, active, n_layers = struct.unpack("<IiBI", _read(fp, 13))
    reg = {"current_task": current, "total_tasks_planned": None if planned < 0 else planned, "active": bool(active)}
    layers = []
    for _ in range(n_layers):
        (name_len,) = struct.unpack("<I", _read(fp, 4))
        name = _read(fp, name_len).decode("utf-8")
        out_f, in_f, n_snap, open_ = struct.unpack("<IIIB", _read(fp, 13))
        n = out_f * in_f
        w = np.frombuffer(_read(fp, 4 * n), dtype="<f4").reshape(out_f, in_f).astype(np.float32)
        a = np.frombuffer(_read(fp, n), dtype=np.uint8).reshape(out_f, in_f).copy()
        b = np.frombuffer(_read(fp, 4 * out_f), dtype="<f4").astype(np.float32)
        snaps = [np.frombuffer(_read(fp, 4 * out_f), dtype="<f4").astype(np.float32) for _ in range(n_snap)]
        layers.append(
            {"name": name, "weight": w, "assignment": a, "bias": b, "bias_snapshots": snaps, "candidates_open": bool(open_)}
        )
    if fp.read(1):
        raise DataFormatError("trailing bytes after checkpoint payload")
    return meta, reg, layers


def restore_layers(registry: TaskRegistry, reg_state: dict, layer_states: list[dict]) -> None:
    if len(layer_states) != len(registry.layers):
        raise DataFormatError(f"checkpoint has {len(layer_states)} layers, model has {len(registry.layers)}")
    for layer, st in zip(registry.layers, layer_states):
        if st["weight"].shape != layer.weight.shape:
            raise DataFormatError(f"layer {layer.name!r}: shape {st['weight'].shape} != {layer.weight.shape}")
        layer.weight.data = st["weight"]
        layer.assignment = st["assignment"]
        layer.bias.data = st["bias"]
        layer.bias_snapshots = [s.copy() for s in st["bias_snapshots"]]
        layer.current_task = reg_state["current_task"]
        layer.candidates_open = st["candidates_open"]
    registry.current_task = reg_state["current_task"]
    registry.total_tasks_planned = reg_state["total_tasks_planned"]
    registry.active = reg_state["active"]


def checkpoint_bytes(registry: TaskRegistry, metadata: dict | None = None) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(buf, registry, metadata)
    return buf.getvalue()
