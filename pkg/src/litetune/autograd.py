"""Reverse-mode tape with selective save-for-backward storage.

The engine records forward ops on a ``Tape``. Each node declares what it
stored for the backward pass through a ``StorageClass``:

* ``full32``  - the whole buffer, 4 bytes per element
* ``bitmask`` - one bit per element (packed), for sign masks
* ``none``    - nothing

The central rule: a linear-style op (matmul, convolution, normalization
scale) needs its input only to form the *weight* gradient. When the weight
is frozen the input is not saved, the input gradient is still exact, and
the node reports zero bytes. Bias-style gradients reduce the incoming
gradient and never need the input.

Everything is float32 by default; float64 is supported solely so gradient
verification can run with a tighter tolerance.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "StorageClass",
    "TrainMask",
    "TapeNode",
    "Tape",
    "GradientSet",
    "linear_forward",
    "add",
    "backward_pass",
    "saved_bytes",
    "finite_diff_check",
]

_uid_counter = itertools.count(1)


class Tensor:
    """A dense array with an identity the tape can route gradients by."""

    __slots__ = ("data", "uid")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.uid = next(_uid_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def numel(self) -> int:
        return int(self.data.size)

    def assert_finite(self, where: str = "") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values {where or 'in tensor'}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter:
    """A named, optionally trainable array.

    ``storage``/``index`` tie a sliced view back to its backing array so a
    shared-weight super-network and its extracted sub-networks keep one
    optimizer state. For ordinary parameters they are the array itself and
    a full-slice index.
    """

    __slots__ = ("name", "data", "group", "trainable", "storage", "index")

    def __init__(self, name, data, group, trainable=True, storage=None, index=None):
        self.name = name
        self.data = np.asarray(data)
        self.group = group
        self.trainable = bool(trainable)
        self.storage = self.data if storage is None else storage
        self.index = (Ellipsis,) if index is None else index

    @property
    def numel(self) -> int:
        return int(self.data.size)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, group={self.group!r}, trainable={self.trainable})"


@dataclass(frozen=True)
class StorageClass:
    """What a node kept for backward, and how many bytes that costs."""

    kind: str  # "full32" | "bitmask" | "none"
    nbytes: int

    @staticmethod
    def full32(numel: int) -> "StorageClass":
        return StorageClass("full32", 4 * numel)

    @staticmethod
    def bitmask(numel: int) -> "StorageClass":
        return StorageClass("bitmask", math.ceil(numel / 8))

    @staticmethod
    def none() -> "StorageClass":
        return StorageClass("none", 0)


@dataclass(frozen=True)
class TrainMask:
    """Which of a node's parameters receive gradients."""

    weight_trainable: bool = False
    bias_trainable: bool = False


# GradientSet maps parameter name -> gradient array, covering exactly the
# trainable parameters that participated in the taped forward.
GradientSet = dict


@dataclass
class TapeNode:
    op_kind: str
    inputs: tuple
    output: int
    params: dict = field(default_factory=dict)
    mask: TrainMask = TrainMask()
    ctx: dict = field(default_factory=dict)
    saved: dict = field(default_factory=dict)
    storage: list = field(default_factory=list)
    backward: Callable | None = None

    def save(self, key: str, buf: np.ndarray, cls: StorageClass) -> None:
        self.saved[key] = buf
        self.storage.append(cls)

    @property
    def saved_nbytes(self) -> int:
        return sum(c.nbytes for c in self.storage)

    def full32_nbytes(self) -> int:
        return sum(c.nbytes for c in self.storage if c.kind == "full32")

    def release(self) -> None:
        # Frees buffers while keeping the byte accounting on record.
        self.saved.clear()

    def has_trainable_params(self) -> bool:
        return (self.mask.weight_trainable or self.mask.bias_trainable) and bool(self.params)


class Tape:
    """Ordered record of one forward pass.

    ``save_all=True`` switches every node to reference storage (the whole
    input as full32) without changing any gradient math; it exists so the
    selective path can be checked for exact equality against it.
    """

    # Process-wide count of bytes ever recorded; lets tests assert that
    # forward-only paths really taped nothing.
    bytes_recorded_total = 0

    def __init__(self, save_all: bool = False):
        self.nodes: list[TapeNode] = []
        self.save_all = bool(save_all)

    def record(self, node: TapeNode) -> TapeNode:
        self.nodes.append(node)
        Tape.bytes_recorded_total += node.saved_nbytes
        return node

    def saved_bytes(self) -> int:
        return sum(n.saved_nbytes for n in self.nodes)

    def full32_saved_bytes(self) -> int:
        return sum(n.full32_nbytes() for n in self.nodes)

    def __len__(self):
        return len(self.nodes)


def saved_bytes(tape: Tape) -> int:
    """Total bytes the tape holds for backward, per recorded storage class."""
    return tape.saved_bytes()


def pack_mask(mask: np.ndarray) -> np.ndarray:
    return np.packbits(mask.reshape(-1))


def unpack_mask(packed: np.ndarray, shape) -> np.ndarray:
    n = int(np.prod(shape))
    return np.unpackbits(packed, count=n).reshape(shape).astype(bool)


class _GradientSink:
    """Accumulates parameter gradients by name in traversal order."""

    def __init__(self):
        self.grads: GradientSet = {}

    def add(self, param: Parameter, g: np.ndarray) -> None:
        prev = self.grads.get(param.name)
        self.grads[param.name] = g if prev is None else prev + g


def _mask_for(weight: Parameter | None, bias: Parameter | None, mask: TrainMask | None) -> TrainMask:
    if mask is not None:
        return mask
    return TrainMask(
        weight_trainable=bool(weight is not None and weight.trainable),
        bias_trainable=bool(bias is not None and bias.trainable),
    )


def _linear_backward(node: TapeNode, grad: np.ndarray, sink: _GradientSink, need_input_grad: bool):
    w = node.params["weight"]
    if node.mask.weight_trainable:
        x = node.saved["input"]
        sink.add(w, x.T @ grad)
    if node.mask.bias_trainable:
        sink.add(node.params["bias"], grad.sum(axis=0))
    if need_input_grad:
        return [(node.inputs[0], grad @ w.data.T)]
    return []


def linear_forward(
    x: Tensor,
    weight: Parameter,
    bias: Parameter | None,
    tape: Tape | None,
    mask: TrainMask | None = None,
) -> Tensor:
    """Row-major dense layer: out = x @ W (+ b).

    Saves ``x`` only when the weight gradient will be formed. The input
    gradient is ``grad @ W.T`` and needs no stored activation; the bias
    gradient is a column sum of the incoming gradient.
    """
    assert x.data.ndim == 2 and weight.data.ndim == 2
    assert x.data.shape[1] == weight.data.shape[0]
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    res = Tensor(out, dtype=x.dtype)
    if tape is None:
        return res

    m = _mask_for(weight, bias, mask)
    node = TapeNode(
        op_kind="linear",
        inputs=(x.uid,),
        output=res.uid,
        params={"weight": weight, **({"bias": bias} if bias is not None else {})},
        mask=m,
        backward=_linear_backward,
    )
    if m.weight_trainable or tape.save_all:
        node.save("input", x.data, StorageClass.full32(x.numel))
    else:
        node.storage.append(StorageClass.none())
    tape.record(node)
    return res


def _add_backward(node: TapeNode, grad: np.ndarray, sink: _GradientSink, need_input_grad: bool):
    if not need_input_grad:
        return []
    return [(node.inputs[0], grad), (node.inputs[1], grad)]


def add(x: Tensor, y: Tensor, tape: Tape | None) -> Tensor:
    """Elementwise sum used for skip connections and residual branches."""
    assert x.data.shape == y.data.shape
    res = Tensor(x.data + y.data, dtype=x.dtype)
    if tape is None:
        return res
    node = TapeNode(op_kind="add", inputs=(x.uid, y.uid), output=res.uid, backward=_add_backward)
    node.storage.append(StorageClass.none())
    tape.record(node)
    return res


def backward_pass(tape: Tape, out_grad: np.ndarray) -> GradientSet:
    """Walk the tape in reverse, freeing buffers as they are consumed.

    ``out_grad`` is the gradient of the loss with respect to the output of
    the final node. Returns gradients for exactly the trainable parameters
    recorded on the tape. Input gradients stop below the deepest node that
    owns a trainable parameter; nothing there can use them.
    """
    if not tape.nodes:
        return {}
    sink = _GradientSink()
    first_trainable = None
    for i, node in enumerate(tape.nodes):
        if node.has_trainable_params():
            first_trainable = i
            break
    grads = {tape.nodes[-1].output: np.asarray(out_grad)}
    for i in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[i]
        g = grads.pop(node.output, None)
        if g is None or first_trainable is None or i < first_trainable:
            node.release()
            continue
        need_input_grad = i > first_trainable
        for uid, gi in node.backward(node, g, sink, need_input_grad):
            prev = grads.get(uid)
            grads[uid] = gi if prev is None else prev + gi
        node.release()
    return sink.grads


def finite_diff_check(
    model_fn,
    params,
    x: Tensor,
    eps: float,
    probe: np.ndarray | None = None,
    limit: int | None = None,
    seed: int = 0,
    floor: float = 1e-3,
    grads: dict | None = None,
) -> float:
    """Compare tape gradients against central differences.

    ``model_fn(x, tape)`` must run the forward, recording on ``tape`` when
    one is given. The scalar objective is ``sum(output * probe)`` with the
    probe defaulting to ones; the sum is accumulated in float64 so the
    comparison is not limited by the reduction. Returns the maximum
    relative error ``|fd - g| / max(|g|, |fd|, floor)`` over every checked
    trainable scalar (all of them unless ``limit`` caps the count). The
    floor keeps near-zero gradients, where a central difference has no
    significant digits left, from reporting meaningless ratios.

    ``grads`` supplies the gradients under test; when omitted they are
    taped from ``model_fn`` directly.
    """
    tape = Tape()
    out = model_fn(x, tape)
    if probe is None:
        probe = np.ones_like(out.data)
    probe64 = probe.astype(np.float64)
    if grads is None:
        grads = backward_pass(tape, probe.astype(out.dtype))

    def objective() -> float:
        o = model_fn(x, None)
        return float(np.sum(o.data.astype(np.float64) * probe64))

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    for p in params:
        if not p.trainable:
            continue
        if p.name not in grads:
            raise KeyError(f"trainable parameter {p.name!r} has no tape gradient")
        g = np.asarray(grads[p.name]).reshape(-1)
        n = p.numel
        if limit is not None and n > limit:
            idxs = rng.choice(n, size=limit, replace=False)
        else:
            idxs = range(n)
        for j in idxs:
            ij = np.unravel_index(j, p.data.shape)
            orig = p.data[ij]
            p.data[ij] = orig + eps
            f_plus = objective()
            p.data[ij] = orig - eps
            f_minus = objective()
            p.data[ij] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(fd - g[j]) / max(abs(g[j]), abs(fd), floor)
            if rel > max_rel:
                max_rel = rel
    return max_rel
