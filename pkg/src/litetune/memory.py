"""Analytic cost model: training-memory footprint and MAC counts.

The footprint walker mirrors the forward pass symbolically, layer by
layer, without touching data. Its per-node byte rule is the storage rule
the tape implements:

* conv / linear / norm: 4 * batch * numel(input) if the weight (scale) is
  trainable, else 0
* relu: ceil(batch * numel / 8)
* sigmoid / hswish: 4 * batch * numel
* bias, pooling, upsampling, skip adds: 0

Training a model asserts that this walker and the live tape agree to the
byte, so the two routes keep each other honest.

Parameters are priced at 1 byte each when frozen (8-bit storage), 4 bytes
when trainable, plus 8 bytes of optimizer state (two float32 moments) per
trainable element, reported separately from the headline.

MACs: a conv output element costs kernel^2 * in_channels / groups, a
dense layer in*out per row, bilinear upsampling 4 per output element;
normalization, biases, pooling and adds are counted MAC-free. Training
cost is forward + an input-gradient sweep over every layer + a
weight-gradient sweep over layers whose weight trains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import ConvUnit, LiteBranch, MBBlockSpec, Model
from .layers import ConvSpec
from .policies import FineTunePolicy, apply_policy

__all__ = [
    "LayerRow",
    "MemoryReport",
    "CostReport",
    "layer_activation_bytes",
    "model_footprint",
    "mac_count",
    "lite_overhead_ratio",
    "Quantized8",
    "quantize8",
    "quantize_frozen_weights",
]

MB = float(1 << 20)


def layer_activation_bytes(kind: str, numel_in: int, numel_out: int, weight_trainable: bool) -> int:
    """Bytes a single node keeps, given the batch-inclusive element counts."""
    if kind in ("conv", "linear", "norm"):
        return 4 * numel_in if weight_trainable else 0
    if kind == "relu":
        return math.ceil(numel_out / 8)
    if kind in ("sigmoid", "hswish"):
        return 4 * numel_out
    if kind in ("bias", "pool", "upsample", "add", "gap"):
        return 0
    raise ValueError(f"unknown layer kind {kind!r}")


@dataclass
class LayerRow:
    name: str
    kind: str
    saved_activation_bytes: int = 0
    frozen_param_bytes: int = 0
    trainable_param_bytes: int = 0
    optimizer_state_bytes: int = 0
    mac: int = 0
    weight_trains: bool = False

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "saved_activation_bytes": self.saved_activation_bytes,
            "frozen_param_bytes": self.frozen_param_bytes,
            "trainable_param_bytes": self.trainable_param_bytes,
            "optimizer_state_bytes": self.optimizer_state_bytes,
            "mac": self.mac,
        }


@dataclass
class MemoryReport:
    policy: str
    batch: int
    resolution: int
    rows: list = field(default_factory=list)

    def _sum(self, attr: str) -> int:
        return sum(getattr(r, attr) for r in self.rows)

    @property
    def saved_activation_bytes(self) -> int:
        return self._sum("saved_activation_bytes")

    @property
    def frozen_param_bytes(self) -> int:
        return self._sum("frozen_param_bytes")

    @property
    def trainable_param_bytes(self) -> int:
        return self._sum("trainable_param_bytes")

    @property
    def optimizer_state_bytes(self) -> int:
        return self._sum("optimizer_state_bytes")

    @property
    def headline_bytes(self) -> int:
        # Activations plus parameters; optimizer state reported separately.
        return self.saved_activation_bytes + self.frozen_param_bytes + self.trainable_param_bytes

    @property
    def headline_mb(self) -> float:
        return self.headline_bytes / MB

    def to_dict(self) -> dict:
        return {
            "schema": "memory-report/1",
            "policy": self.policy,
            "batch": self.batch,
            "resolution": self.resolution,
            "totals": {
                "saved_activation_bytes": self.saved_activation_bytes,
                "frozen_param_bytes": self.frozen_param_bytes,
                "trainable_param_bytes": self.trainable_param_bytes,
                "optimizer_state_bytes": self.optimizer_state_bytes,
                "headline_bytes": self.headline_bytes,
                "headline_mb": self.headline_mb,
            },
            "layers": [r.as_dict() for r in self.rows],
        }


@dataclass
class CostReport:
    inference_mac: int
    training_mac: int
    memory: MemoryReport
    phases: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "schema": "cost-report/1",
            "inference_mac": self.inference_mac,
            "training_mac": self.training_mac,
            "train_over_infer": self.training_mac / max(self.inference_mac, 1),
            "memory": self.memory.to_dict(),
        }
        if self.phases:
            d["phases"] = dict(self.phases)
        return d


def _param_bytes(row: LayerRow, params) -> None:
    for p in params:
        if p is None:
            continue
        if p.trainable:
            row.trainable_param_bytes += 4 * p.numel
            row.optimizer_state_bytes += 8 * p.numel
        else:
            row.frozen_param_bytes += p.numel


def _conv_mac(spec: ConvSpec, batch: int, out_h: int, out_w: int) -> int:
    per_elem = spec.kernel ** 2 * (spec.in_channels // spec.groups)
    return batch * spec.out_channels * out_h * out_w * per_elem


def _unit_rows(unit: ConvUnit, batch: int, c_in: int, h: int, w: int):
    """Rows for conv -> norm -> bias (-> act); returns (rows, out dims)."""
    spec = unit.conv_spec
    oh, ow = spec.out_hw(h, w)
    n_in = batch * c_in * h * w
    n_out = batch * spec.out_channels * oh * ow
    rows = []
    conv = LayerRow(f"{unit.name}.conv", "conv",
                    saved_activation_bytes=layer_activation_bytes("conv", n_in, n_out, unit.weight.trainable),
                    mac=_conv_mac(spec, batch, oh, ow),
                    weight_trains=unit.weight.trainable)
    _param_bytes(conv, [unit.weight])
    rows.append(conv)

    norm = LayerRow(f"{unit.name}.norm", "norm",
                    saved_activation_bytes=layer_activation_bytes("norm", n_out, n_out, unit.gamma.trainable),
                    weight_trains=unit.gamma.trainable)
    _param_bytes(norm, [unit.gamma, unit.beta])
    rows.append(norm)

    bias = LayerRow(f"{unit.name}.bias", "bias")
    _param_bytes(bias, [unit.bias])
    rows.append(bias)

    if unit.act:
        rows.append(LayerRow(f"{unit.name}.{unit.act}", unit.act,
                             saved_activation_bytes=layer_activation_bytes(unit.act, n_out, n_out, False)))
    return rows, (spec.out_channels, oh, ow)


def _branch_rows(branch: LiteBranch, batch: int, c_in: int, h: int, w: int, out_c: int, out_h: int, out_w: int):
    rows = []
    ph, pw = h, w
    for i in range(branch.spec.pool_steps):
        rows.append(LayerRow(f"{branch.name}.pool{i}", "pool"))
        ph, pw = math.ceil(ph / 2), math.ceil(pw / 2)
    unit_rows, (bc, bh, bw) = _unit_rows(branch.unit, batch, c_in, ph, pw)
    rows.extend(unit_rows)
    up = LayerRow(f"{branch.name}.upsample", "upsample", mac=4 * batch * bc * out_h * out_w)
    rows.append(up)
    return rows


def _walk(model: Model, batch: int, resolution: int):
    rows = []
    c, h, w = model.arch.in_channels, resolution, resolution
    unit_rows, (c, h, w) = _unit_rows(model.stem, batch, c, h, w)
    rows.extend(unit_rows)
    for blk in model.blocks():
        bc, bh, bw = c, h, w
        for unit in blk.units:
            unit_rows, (c, h, w) = _unit_rows(unit, batch, c, h, w)
            rows.extend(unit_rows)
        if blk.spec.has_skip:
            rows.append(LayerRow(f"{blk.name}.skip", "add"))
        if blk.lite is not None:
            rows.extend(_branch_rows(blk.lite, batch, bc, bh, bw, c, h, w))
            rows.append(LayerRow(f"{blk.name}.merge", "add"))
    rows.append(LayerRow("head.pool", "gap"))
    head = model.head
    n_feat = batch * head.in_features
    lin = LayerRow("head.linear", "linear",
                   saved_activation_bytes=layer_activation_bytes("linear", n_feat, batch * head.n_classes,
                                                                 head.weight.trainable),
                   mac=batch * head.in_features * head.n_classes,
                   weight_trains=head.weight.trainable)
    _param_bytes(lin, [head.weight, head.bias])
    rows.append(lin)
    return rows


def model_footprint(model: Model, policy: FineTunePolicy, batch: int, resolution: int) -> MemoryReport:
    """Symbolic per-layer footprint for one training step at the given
    batch and square input resolution."""
    apply_policy(model, policy)
    report = MemoryReport(policy.name, batch, resolution)
    report.rows = _walk(model, batch, resolution)
    return report


def mac_count(model: Model, policy: FineTunePolicy, batch: int, resolution: int, training: bool) -> int:
    """Multiply-accumulate count for one pass over a batch.

    Training adds one full input-gradient sweep (every MAC-bearing layer
    runs its transpose) plus a weight-gradient sweep over the layers whose
    weights train.
    """
    apply_policy(model, policy)
    rows = _walk(model, batch, resolution)
    fwd = sum(r.mac for r in rows)
    if not training:
        return fwd
    bwd_weight = sum(r.mac for r in rows if r.weight_trains and r.kind in ("conv", "linear"))
    return 2 * fwd + bwd_weight


def cost_report(model: Model, policy: FineTunePolicy, batch: int, resolution: int) -> CostReport:
    return CostReport(
        inference_mac=mac_count(model, policy, batch, resolution, training=False),
        training_mac=mac_count(model, policy, batch, resolution, training=True),
        memory=model_footprint(model, policy, batch, resolution),
    )


def lite_overhead_ratio(block: MBBlockSpec, h: int, w: int) -> float:
    """Activation-volume ratio of the bottleneck path over its lite branch.

    Counts the distinct feature maps flowing along each path, the width
    arithmetic behind the branch design: the bottleneck moves 1x + ex + ex
    channel maps, the branch 1x + 1x at pooled resolution. For expand 6,
    stride 1 and a 2x2 reduction that is (6*2+1)/(1+1) * 4 = 26.
    """
    if block.lite is None:
        raise ValueError("block has no lite branch")
    spec = ConvSpec(block.in_channels, block.out_channels, block.kernel,
                    stride=block.stride, groups=1)
    oh, ow = spec.out_hw(h, w)
    bottleneck = block.in_channels * h * w + block.mid_channels * h * w + block.mid_channels * oh * ow
    ph, pw = h, w
    for _ in range(block.lite.pool_steps):
        ph, pw = math.ceil(ph / 2), math.ceil(pw / 2)
    branch = block.in_channels * ph * pw + block.out_channels * ph * pw
    return bottleneck / branch


@dataclass(frozen=True)
class Quantized8:
    """Per-tensor affine 8-bit encoding with min/max scaling."""

    codes: np.ndarray  # uint8
    lo: float
    hi: float

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        span = self.hi - self.lo
        return (self.lo + (self.codes.astype(np.float64) / 255.0) * span).astype(dtype)

    @property
    def nbytes(self) -> int:
        return int(self.codes.size)


def quantize8(w: np.ndarray) -> Quantized8:
    """Round to 256 evenly spaced levels spanning [min, max].

    Absolute error is at most (max - min) / 255 / 2; both range endpoints
    reconstruct exactly, and a constant tensor round-trips exactly.
    """
    lo = float(w.min())
    hi = float(w.max())
    if hi == lo:
        codes = np.zeros(w.shape, dtype=np.uint8)
    else:
        codes = np.clip(np.rint((w.astype(np.float64) - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    return Quantized8(codes, lo, hi)


def quantize_frozen_weights(model: Model) -> int:
    """Replace every frozen parameter in place with its 8-bit round trip.

    Returns the stored byte count. Trainable parameters are untouched.
    """
    total = 0
    for p in model.parameters():
        if p.trainable:
            continue
        q = quantize8(p.data)
        p.data[...] = q.dequantize(p.data.dtype)
        total += q.nbytes
    return total
