"""Fine-tuning loop: Adam, cosine decay, and live memory verification.

Every training step runs on a fresh tape; after the forward, the tape's
recorded bytes are compared against the analytic footprint and any
disagreement raises. Optimizer state lives beside the parameter storage,
so sliced views of shared weights (sub-network training) update their
slice of one set of moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Parameter, Tape, Tensor, backward_pass, finite_diff_check
from .blocks import Model, capture_norm_stats
from .layers import ReluGates
from .memory import model_footprint
from .policies import FineTunePolicy, TrainablePlan, apply_policy

__all__ = [
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPS",
    "TrainConfig",
    "TrainReport",
    "AdamState",
    "adam_step",
    "cosine_lr",
    "softmax_cross_entropy",
    "train",
    "evaluate",
    "gradient_check",
    "NumericsError",
    "MemoryMismatch",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericsError(RuntimeError):
    """Loss or gradients left the finite range."""


class MemoryMismatch(AssertionError):
    """Tape bytes diverged from the analytic footprint."""


@dataclass
class TrainConfig:
    lr: float
    epochs: int = 50
    batch: int = 8
    weight_decay: float = 0.0
    seed: int = 0
    check_memory: bool = True


@dataclass
class TrainReport:
    policy: str
    final_acc: float
    loss_curve: list
    peak_saved_bytes: int
    analytic_saved_bytes: int
    steps: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": "train-report/1",
            "policy": self.policy,
            "final_acc": self.final_acc,
            "loss_curve": [float(v) for v in self.loss_curve],
            "peak_saved_bytes": self.peak_saved_bytes,
            "analytic_saved_bytes": self.analytic_saved_bytes,
            "steps": self.steps,
            "config": dict(self.config),
        }


class AdamState:
    """First/second moments keyed by parameter name, full storage shape."""

    def __init__(self):
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def moments(self, p: Parameter):
        if p.name not in self.m:
            self.m[p.name] = np.zeros(p.storage.shape, dtype=p.storage.dtype)
            self.v[p.name] = np.zeros(p.storage.shape, dtype=p.storage.dtype)
        return self.m[p.name][p.index], self.v[p.name][p.index]


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at step 0 to 0 at total_steps."""
    if total_steps <= 0:
        return lr0
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One update over exactly the given (trainable) parameters.

    A missing gradient is a contract violation: the tape must have seen
    every trainable parameter it was asked to train.
    """
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for p in params:
        if p.name not in grads:
            raise KeyError(f"no gradient recorded for trainable parameter {p.name!r}")
        g = np.asarray(grads[p.name], dtype=p.data.dtype)
        if weight_decay:
            g = g + weight_decay * p.data
        m, v = state.moments(p)
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sm = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    grad = sm.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(nll.mean()), grad.astype(logits.dtype)


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch):
        yield order[s : s + batch]


def train(model: Model, dataset, policy: FineTunePolicy, config: TrainConfig) -> TrainReport:
    """Fine-tune under a policy; returns the report with the byte peak.

    ``dataset`` needs ``float_images()`` (N, C, H, W in [0, 1]) and
    ``labels``. Accuracy is measured on the same set after the last step.
    """
    plan = apply_policy(model, policy)
    x_all = dataset.float_images().astype(model.dtype)
    y_all = np.asarray(dataset.labels, dtype=np.int64)
    n = x_all.shape[0]
    res = x_all.shape[2]
    steps_per_epoch = math.ceil(n / config.batch)
    total_steps = config.epochs * steps_per_epoch

    expected_bytes = {}
    if config.check_memory:
        for bsz in {config.batch, n % config.batch or config.batch}:
            expected_bytes[bsz] = model_footprint(model, policy, bsz, res).saved_activation_bytes

    state = AdamState()
    rng = np.random.default_rng(config.seed)
    loss_curve = []
    peak = 0
    step = 0
    for _ in range(config.epochs):
        for idx in _batches(n, config.batch, rng):
            xb, yb = x_all[idx], y_all[idx]
            tape = Tape()
            logits = model.forward(xb, tape)
            loss, grad_logits = softmax_cross_entropy(logits.data, yb)
            if not math.isfinite(loss):
                raise NumericsError(
                    f"non-finite loss at step {step} (policy {policy.name}, lr {config.lr})"
                )
            seen = tape.saved_bytes()
            peak = max(peak, seen)
            if config.check_memory and seen != expected_bytes[len(idx)]:
                raise MemoryMismatch(
                    f"tape holds {seen} bytes, footprint predicts {expected_bytes[len(idx)]} "
                    f"(policy {policy.name}, batch {len(idx)}, resolution {res})"
                )
            grads = backward_pass(tape, grad_logits)
            adam_step(plan.params, grads, state, cosine_lr(step, total_steps, config.lr),
                      config.weight_decay)
            loss_curve.append(loss)
            step += 1

    return TrainReport(
        policy=policy.name,
        final_acc=evaluate(model, dataset),
        loss_curve=loss_curve,
        peak_saved_bytes=peak,
        analytic_saved_bytes=max(expected_bytes.values()) if expected_bytes else 0,
        steps=step,
        config={"lr": config.lr, "epochs": config.epochs, "batch": config.batch,
                "weight_decay": config.weight_decay, "seed": config.seed},
    )


def evaluate(model: Model, dataset, batch: int = 64) -> float:
    """Forward-only top-1 accuracy; records nothing."""
    x_all = dataset.float_images().astype(model.dtype)
    y_all = np.asarray(dataset.labels, dtype=np.int64)
    hits = 0
    for s in range(0, x_all.shape[0], batch):
        logits = model.forward(x_all[s : s + batch], tape=None)
        hits += int((logits.data.argmax(axis=1) == y_all[s : s + batch]).sum())
    return hits / x_all.shape[0]


def _float64_shadow(model: Model) -> Model:
    """Same architecture, same parameter values and trainability, float64."""
    from .blocks import build_backbone

    has_lite = any(getattr(b, "lite", None) is not None for b in model.blocks())
    twin = build_backbone(
        model.arch,
        n_classes=model.head.n_classes,
        init="pretrained_copy",
        source=model.state(),
        include_lite=has_lite,
        dtype=np.float64,
    )
    flags = {p.name: p.trainable for p in model.parameters()}
    for p in twin.parameters():
        p.trainable = flags[p.name]
    return twin


def gradient_check(model: Model, x: np.ndarray, eps: float, limit: int | None = None,
                   probe_seed: int = 0, dekink: bool = True) -> float:
    """Finite-difference check of the full model under its current
    trainability flags.

    The difference quotients are always evaluated on a float64 shadow of
    the model (same weights, same flags); a float32 forward has too little
    precision left after the division by 2*eps for the quotient itself to
    be meaningful, so the shadow serves as the oracle and the reported
    error reflects the accuracy of the checked model's backward.

    Frozen-scale norm layers are probed with their statistics pinned from
    the unperturbed forward, the affine map the tape differentiates; live
    statistics stay live wherever the scale trains. ``dekink`` replaces
    all-zero norm scales with seeded nonzero values first: a zeroed branch
    scale parks the following relu exactly on its kink, where central
    differences measure a two-sided average no subgradient can match.
    """
    x = np.asarray(x, dtype=model.dtype)
    if dekink:
        for p in model.parameters():
            if p.name.endswith("norm.gamma") and not p.data.any():
                jitter = np.random.default_rng([probe_seed, p.numel]).uniform(0.5, 1.5, p.data.shape)
                p.data[...] = jitter.astype(p.data.dtype)

    # Gradients under test come from the model itself, at its own precision.
    stats = capture_norm_stats(model, x)
    gates = ReluGates("record")
    tape = Tape()
    out = model.forward(Tensor(x), tape, stats_cache=stats, gates=gates)
    probe = np.random.default_rng(probe_seed).standard_normal(out.data.shape)
    grads = backward_pass(tape, probe.astype(model.dtype))

    # The quotients run on the shadow with the recorded gate pattern held
    # fixed, so every probe samples the branch those gradients belong to.
    shadow = model if model.dtype == np.float64 else _float64_shadow(model)
    x64 = x.astype(np.float64)
    replay = gates.replaying()
    shadow_stats = capture_norm_stats(shadow, x64, gates=replay)

    def model_fn(xx: Tensor, fd_tape):
        return shadow.forward(xx, fd_tape, stats_cache=shadow_stats, gates=replay)

    return finite_diff_check(model_fn, shadow.parameters(), Tensor(x64), eps,
                             probe=probe, limit=limit, seed=probe_seed,
                             grads=grads)
