"""NCHW layer zoo on the selective-storage tape.

Per-node storage behavior:

===============  ======================================  =================
op               keeps for backward                       bytes
===============  ======================================  =================
conv2d / linear  input, only if the weight is trainable  4 * numel or 0
group_norm       input, only if gamma is trainable       4 * numel or 0
bias_add         nothing                                  0
relu             sign bitmask of the input                ceil(numel / 8)
sigmoid, hswish  full input                               4 * numel
avg_pool2        nothing (gradient is a constant stencil) 0
bilinear_upsample nothing (linear map, fixed weights)     0
global_avg_pool  nothing                                  0
===============  ======================================  =================

Convolutions use zero padding of kernel // 2 and stride 1 or 2, so spatial
dims map H -> ceil(H / stride). Pooling replicates the edge row/column on
odd inputs. All reductions run in fixed row-major order, which keeps
repeat runs bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import (
    Parameter,
    StorageClass,
    Tape,
    TapeNode,
    Tensor,
    TrainMask,
    _mask_for,
    pack_mask,
    unpack_mask,
)

__all__ = [
    "ConvSpec",
    "NormSpec",
    "conv2d",
    "group_norm",
    "weight_standardize",
    "bias_add",
    "activation",
    "avg_pool2",
    "bilinear_upsample",
    "global_avg_pool",
    "ACTIVATION_KINDS",
]

ACTIVATION_KINDS = ("relu", "sigmoid", "hswish")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    groups: int = 1
    weight_standardized: bool = False

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError("channels must divide groups")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def out_hw(self, h: int, w: int) -> tuple:
        return (self._out_dim(h), self._out_dim(w))

    def _out_dim(self, d: int) -> int:
        return (d + 2 * self.padding - self.kernel) // self.stride + 1


@dataclass(frozen=True)
class NormSpec:
    channels: int
    channels_per_group: int = 8
    eps: float = 1e-5

    def __post_init__(self):
        if self.channels % self.channels_per_group:
            raise ValueError(
                f"channels ({self.channels}) must divide into groups of {self.channels_per_group}"
            )

    @property
    def groups(self) -> int:
        return self.channels // self.channels_per_group


def weight_standardize(w: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Zero-mean, unit-variance view of a conv weight per output channel."""
    mu = w.mean(axis=(1, 2, 3), keepdims=True)
    var = np.square(w - mu).mean(axis=(1, 2, 3), keepdims=True)
    return (w - mu) / np.sqrt(var + eps)


def _standardize_with_ctx(w: np.ndarray, eps: float):
    mu = w.mean(axis=(1, 2, 3), keepdims=True)
    var = np.square(w - mu).mean(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    what = (w - mu) * inv
    return what, inv


def _standardize_backward(g_what: np.ndarray, what: np.ndarray, inv: np.ndarray) -> np.ndarray:
    # Exact chain through the per-channel moments of the raw weight.
    mean_g = g_what.mean(axis=(1, 2, 3), keepdims=True)
    mean_gw = (g_what * what).mean(axis=(1, 2, 3), keepdims=True)
    return inv * (g_what - mean_g - what * mean_gw)


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, out_h, out_w, k, k),
        strides=(sn, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )
    # (N, C, k, k, P) with the (C, k, k) order matching the weight layout.
    return np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n, c, k, k, out_h * out_w
    )


def _conv_forward_arrays(x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    n = x.shape[0]
    k, s, g = spec.kernel, spec.stride, spec.groups
    oh, ow = spec.out_hw(x.shape[2], x.shape[3])
    p = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _im2col(xp, k, s, oh, ow)
    ckk = (spec.in_channels // g) * k * k
    cols_g = cols.reshape(n, g, ckk, oh * ow)
    w_g = w.reshape(g, spec.out_channels // g, ckk)
    out = np.matmul(w_g, cols_g)
    return out.reshape(n, spec.out_channels, oh, ow), cols_g


def _conv_backward(node: TapeNode, grad: np.ndarray, sink, need_input_grad: bool):
    spec: ConvSpec = node.ctx["spec"]
    k, s, g = spec.kernel, spec.stride, spec.groups
    n, _, oh, ow = grad.shape
    ckk = (spec.in_channels // g) * k * k
    grad_g = grad.reshape(n, g, spec.out_channels // g, oh * ow)
    w_param = node.params["weight"]

    if node.mask.bias_trainable:
        sink.add(node.params["bias"], grad.sum(axis=(0, 2, 3)))

    if node.mask.weight_trainable:
        x = node.saved["input"]
        p = spec.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols_g = _im2col(xp, k, s, oh, ow).reshape(n, g, ckk, oh * ow)
        g_w = np.matmul(grad_g, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
        g_w = g_w.reshape(spec.weight_shape())
        if spec.weight_standardized:
            g_w = _standardize_backward(g_w, node.ctx["what"], node.ctx["ws_inv"])
        sink.add(w_param, g_w)

    if not need_input_grad:
        return []
    w_used = node.ctx["what"] if spec.weight_standardized else w_param.data
    w_g = w_used.reshape(g, spec.out_channels // g, ckk)
    g_cols = np.matmul(w_g.transpose(0, 2, 1), grad_g)
    in_h, in_w = node.ctx["in_hw"]
    p = spec.padding
    gxp = np.zeros((n, spec.in_channels, in_h + 2 * p, in_w + 2 * p), dtype=grad.dtype)
    g_cols = g_cols.reshape(n, spec.in_channels, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s] += g_cols[:, :, ki, kj]
    gx = gxp[:, :, p : p + in_h, p : p + in_w] if p else gxp
    return [(node.inputs[0], gx)]


def conv2d(
    x: Tensor,
    spec: ConvSpec,
    weight: Parameter,
    bias: Parameter | None,
    tape: Tape | None,
    mask: TrainMask | None = None,
) -> Tensor:
    """Grouped 2-d cross-correlation (groups == channels gives depthwise).

    The input gradient is formed from the weight alone, so a frozen-weight
    convolution stores nothing. Weight standardization, when enabled on
    ``spec``, is applied on the fly and the raw weight stays the stored
    parameter; its gradient chains through the standardization moments.
    """
    assert x.data.ndim == 4 and x.data.shape[1] == spec.in_channels
    w = weight.data
    assert w.shape == spec.weight_shape()
    ws_ctx = None
    if spec.weight_standardized:
        what, inv = _standardize_with_ctx(w, 1e-5)
        ws_ctx = (what, inv)
        w = what
    out, _ = _conv_forward_arrays(x.data, w, spec)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    res = Tensor(out, dtype=x.dtype)
    if tape is None:
        return res

    m = _mask_for(weight, bias, mask)
    node = TapeNode(
        op_kind="conv",
        inputs=(x.uid,),
        output=res.uid,
        params={"weight": weight, **({"bias": bias} if bias is not None else {})},
        mask=m,
        ctx={"spec": spec, "in_hw": x.data.shape[2:]},
        backward=_conv_backward,
    )
    if ws_ctx is not None:
        node.ctx["what"], node.ctx["ws_inv"] = ws_ctx
    if m.weight_trainable or tape.save_all:
        node.save("input", x.data, StorageClass.full32(x.numel))
    else:
        node.storage.append(StorageClass.none())
    tape.record(node)
    return res


def _group_stats(x: np.ndarray, spec: NormSpec):
    n = x.shape[0]
    grouped = x.reshape(n, spec.groups, -1)
    mu = grouped.mean(axis=2)
    var = np.square(grouped - mu[:, :, None]).mean(axis=2)
    inv = 1.0 / np.sqrt(var + spec.eps)
    return mu, inv


def _group_norm_backward(node: TapeNode, grad: np.ndarray, sink, need_input_grad: bool):
    spec: NormSpec = node.ctx["spec"]
    mu, inv = node.ctx["mu"], node.ctx["inv"]
    n = grad.shape[0]
    gamma = node.params["gamma"]

    if node.mask.bias_trainable:
        sink.add(node.params["beta"], grad.sum(axis=(0, 2, 3)))

    xhat = None
    if node.mask.weight_trainable:
        x = node.saved["input"]
        xhat = (x.reshape(n, spec.groups, -1) - mu[:, :, None]) * inv[:, :, None]
        xhat = xhat.reshape(x.shape)
        sink.add(gamma, (grad * xhat).sum(axis=(0, 2, 3)))

    if not need_input_grad:
        return []
    gh = grad * gamma.data[None, :, None, None]
    gh_g = gh.reshape(n, spec.groups, -1)
    if node.mask.weight_trainable:
        # Exact gradient through the per-group statistics.
        xhat_g = xhat.reshape(n, spec.groups, -1)
        mean_gh = gh_g.mean(axis=2, keepdims=True)
        mean_ghx = (gh_g * xhat_g).mean(axis=2, keepdims=True)
        gx = inv[:, :, None] * (gh_g - mean_gh - xhat_g * mean_ghx)
    else:
        # Frozen scale: the statistics are per-step constants and the node
        # acts as a fixed per-group affine map, which is what lets it store
        # nothing. Verified against finite differences of the same map.
        gx = gh_g * inv[:, :, None]
    return [(node.inputs[0], gx.reshape(grad.shape))]


def group_norm(
    x: Tensor,
    spec: NormSpec,
    gamma: Parameter,
    beta: Parameter,
    tape: Tape | None,
    mask: TrainMask | None = None,
    stats: tuple | None = None,
) -> Tensor:
    """Per-sample group standardization followed by a channel affine.

    Statistics never cross the batch axis, so batch-1 and batch-8 forwards
    agree per sample. The input is saved only when ``gamma`` is trainable;
    training only ``beta`` behaves like a bias and stores nothing.
    ``stats`` overrides the (mean, inv-std) pair, which the gradient
    harness uses to probe frozen-scale nodes as the affine maps they are.
    """
    assert x.data.ndim == 4 and x.data.shape[1] == spec.channels
    n = x.data.shape[0]
    if stats is None:
        mu, inv = _group_stats(x.data, spec)
    else:
        mu, inv = stats
    xhat = (x.data.reshape(n, spec.groups, -1) - mu[:, :, None]) * inv[:, :, None]
    xhat = xhat.reshape(x.data.shape)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    res = Tensor(out, dtype=x.dtype)
    if tape is None:
        return res

    m = _mask_for(gamma, beta, mask)
    node = TapeNode(
        op_kind="group_norm",
        inputs=(x.uid,),
        output=res.uid,
        params={"gamma": gamma, "beta": beta},
        mask=m,
        ctx={"spec": spec, "mu": mu, "inv": inv},
        backward=_group_norm_backward,
    )
    if m.weight_trainable or tape.save_all:
        node.save("input", x.data, StorageClass.full32(x.numel))
    else:
        node.storage.append(StorageClass.none())
    tape.record(node)
    return res


def _bias_add_backward(node: TapeNode, grad: np.ndarray, sink, need_input_grad: bool):
    if node.mask.bias_trainable:
        sink.add(node.params["bias"], grad.sum(axis=(0, 2, 3)))
    return [(node.inputs[0], grad)] if need_input_grad else []


def bias_add(x: Tensor, bias: Parameter, tape: Tape | None, mask: TrainMask | None = None) -> Tensor:
    """Adds a per-channel bias. Its gradient is a reduction of the incoming
    gradient, so nothing is ever stored."""
    assert x.data.ndim == 4 and x.data.shape[1] == bias.numel
    res = Tensor(x.data + bias.data[None, :, None, None], dtype=x.dtype)
    if tape is None:
        return res
    m = mask if mask is not None else TrainMask(bias_trainable=bias.trainable)
    node = TapeNode(
        op_kind="bias_add",
        inputs=(x.uid,),
        output=res.uid,
        params={"bias": bias},
        mask=m,
        backward=_bias_add_backward,
    )
    node.storage.append(StorageClass.none())
    tape.record(node)
    return res


def _relu6(t: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(t, 0.0), 6.0)


def _act_backward(node: TapeNode, grad: np.ndarray, sink, need_input_grad: bool):
    if not need_input_grad:
        return []
    kind = node.ctx["kind"]
    if kind == "relu":
        if "mask" in node.saved:
            keep = unpack_mask(node.saved["mask"], grad.shape)
        else:
            keep = node.saved["input"] >= 0
        gx = grad * keep
    elif kind == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-node.saved["input"]))
        gx = grad * s * (1.0 - s)
    else:  # hswish
        x = node.saved["input"]
        inner = (x >= -3.0) & (x <= 3.0)
        gx = grad * (_relu6(x + 3.0) / 6.0 + x * inner / 6.0)
    return [(node.inputs[0], gx.astype(grad.dtype, copy=False))]


class ReluGates:
    """Records or replays the open/closed pattern of every relu in one
    forward pass, in call order.

    Replay exists for difference-quotient probing: a probe step that
    nudges a pre-activation across zero would otherwise evaluate a
    different linear piece than the one the recorded gradient belongs to,
    and the quotient picks up a bias that no choice of step size removes.
    """

    def __init__(self, mode: str = "record"):
        if mode not in ("record", "replay"):
            raise ValueError(f"mode must be record or replay, got {mode!r}")
        self.mode = mode
        self.masks: list[np.ndarray] = []
        self._cursor = 0

    def rewind(self):
        self._cursor = 0

    def replaying(self) -> "ReluGates":
        out = ReluGates("replay")
        out.masks = self.masks
        return out

    def gate(self, xd: np.ndarray) -> np.ndarray:
        if self.mode == "record":
            m = xd >= 0
            self.masks.append(m)
            return m
        m = self.masks[self._cursor]
        self._cursor += 1
        return m


def activation(x: Tensor, kind: str, tape: Tape | None, gates: ReluGates | None = None) -> Tensor:
    """relu / sigmoid / hswish. ReLU keeps only the sign bitmask; the other
    two are not piecewise-linear in a useful way and keep the full input."""
    if kind not in ACTIVATION_KINDS:
        raise ValueError(f"unknown activation {kind!r}")
    xd = x.data
    if kind == "relu":
        mask = gates.gate(xd) if gates is not None else xd >= 0
        out = np.where(mask, xd, 0.0).astype(x.dtype)
    elif kind == "sigmoid":
        out = 1.0 / (1.0 + np.exp(-xd))
    else:
        out = xd * (_relu6(xd + 3.0) / 6.0)
    res = Tensor(out, dtype=x.dtype)
    if tape is None:
        return res

    node = TapeNode(
        op_kind=kind,
        inputs=(x.uid,),
        output=res.uid,
        ctx={"kind": kind},
        backward=_act_backward,
    )
    if kind == "relu" and not tape.save_all:
        node.save("mask", pack_mask(mask), StorageClass.bitmask(x.numel))
    else:
        node.save("input", xd, StorageClass.full32(x.numel))
    tape.record(node)
    return res


def _avg_pool2_backward(node: TapeNode, grad: np.ndarray, sink, need_input_grad: bool):
    if not need_input_grad:
        return []
    h, w = node.ctx["in_hw"]
    n, c, oh, ow = grad.shape
    gpad = np.broadcast_to((grad * 0.25)[:, :, :, None, :, None], (n, c, oh, 2, ow, 2))
    gpad = gpad.reshape(n, c, 2 * oh, 2 * ow).copy()
    if 2 * oh > h:
        gpad[:, :, h - 1, :] += gpad[:, :, h, :]
    gpad = gpad[:, :, :h, :]
    if 2 * ow > w:
        gpad[:, :, :, w - 1] += gpad[:, :, :, w]
    return [(node.inputs[0], gpad[:, :, :, :w])]


def avg_pool2(x: Tensor, tape: Tape | None) -> Tensor:
    """2x2 mean pool with stride 2; odd edges replicate the last row/column.

    Output dims are ceil(H/2) x ceil(W/2). The backward stencil is constant
    so nothing is stored, and constant inputs are preserved exactly.
    """
    n, c, h, w = x.data.shape
    oh, ow = math.ceil(h / 2), math.ceil(w / 2)
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 2 * oh - h), (0, 2 * ow - w)), mode="edge")
    out = xp.reshape(n, c, oh, 2, ow, 2).sum(axis=(3, 5)) * 0.25
    res = Tensor(out, dtype=x.dtype)
    if tape is None:
        return res
    node = TapeNode(
        op_kind="avg_pool2",
        inputs=(x.uid,),
        output=res.uid,
        ctx={"in_hw": (h, w)},
        backward=_avg_pool2_backward,
    )
    node.storage.append(StorageClass.none())
    tape.record(node)
    return res


def _axis_lerp_coords(n_in: int, n_out: int):
    # Half-pixel source coordinates (align_corners=False), clamped indices.
    i = np.arange(n_out, dtype=np.float64)
    src = (i + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    return lo, hi, t


def _upsample_axis(x: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    lo, hi, t = _axis_lerp_coords(x.shape[axis], n_out)
    a = np.take(x, lo, axis=axis)
    b = np.take(x, hi, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = n_out
    tt = t.reshape(shape).astype(x.dtype)
    # a + t*(b - a) keeps constant fields bit-exact.
    return a + tt * (b - a)


def _upsample_axis_adjoint(g: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    lo, hi, t = _axis_lerp_coords(n_in, g.shape[axis])
    shape = [1] * g.ndim
    shape[axis] = g.shape[axis]
    tt = t.reshape(shape).astype(g.dtype)
    out_shape = list(g.shape)
    out_shape[axis] = n_in
    gx = np.zeros(out_shape, dtype=g.dtype)
    idx_lo = [slice(None)] * g.ndim
    idx_lo[axis] = lo
    idx_hi = [slice(None)] * g.ndim
    idx_hi[axis] = hi
    np.add.at(gx, tuple(idx_lo), g * (1.0 - tt))
    np.add.at(gx, tuple(idx_hi), g * tt)
    return gx


def _upsample_backward(node: TapeNode, grad: np.ndarray, sink, need_input_grad: bool):
    if not need_input_grad:
        return []
    h, w = node.ctx["in_hw"]
    g = _upsample_axis_adjoint(grad, 3, w)
    g = _upsample_axis_adjoint(g, 2, h)
    return [(node.inputs[0], g)]


def bilinear_upsample(x: Tensor, out_h: int, out_w: int, tape: Tape | None) -> Tensor:
    """Separable bilinear resize to (out_h, out_w), half-pixel aligned.

    Only upsampling is supported (target dims >= source dims). The map is
    linear with fixed weights, so the backward is its adjoint and nothing
    is stored.
    """
    n, c, h, w = x.data.shape
    if out_h < h or out_w < w:
        raise ValueError("bilinear_upsample target must be at least the source size")
    out = _upsample_axis(x.data, 2, out_h)
    out = _upsample_axis(out, 3, out_w)
    res = Tensor(out, dtype=x.dtype)
    if tape is None:
        return res
    node = TapeNode(
        op_kind="bilinear_upsample",
        inputs=(x.uid,),
        output=res.uid,
        ctx={"in_hw": (h, w)},
        backward=_upsample_backward,
    )
    node.storage.append(StorageClass.none())
    tape.record(node)
    return res


def _gap_backward(node: TapeNode, grad: np.ndarray, sink, need_input_grad: bool):
    if not need_input_grad:
        return []
    h, w = node.ctx["in_hw"]
    gx = np.broadcast_to(grad[:, :, None, None] / (h * w), (*grad.shape, h, w))
    return [(node.inputs[0], np.ascontiguousarray(gx))]


def global_avg_pool(x: Tensor, tape: Tape | None) -> Tensor:
    """Spatial mean, (N, C, H, W) -> (N, C)."""
    n, c, h, w = x.data.shape
    out = x.data.reshape(n, c, h * w).sum(axis=2) / np.asarray(h * w, dtype=x.dtype)
    res = Tensor(out, dtype=x.dtype)
    if tape is None:
        return res
    node = TapeNode(
        op_kind="global_avg_pool",
        inputs=(x.uid,),
        output=res.uid,
        ctx={"in_hw": (h, w)},
        backward=_gap_backward,
    )
    node.storage.append(StorageClass.none())
    tape.record(node)
    return res
