"""Fine-tuning policies: which parameter groups receive gradients.

Every parameter belongs to one group (weight / bias / norm / lite / head).
A policy is the set of groups to train; the classifier head is always
trainable on top of that. Freezing is a property of the parameters, so
the tape's storage decisions follow automatically.
"""

from __future__ import annotations

from dataclasses import dataclass

from .blocks import GROUP_BIAS, GROUP_LITE, GROUP_NORM, GROUP_WEIGHT, PARAM_GROUPS, Model

__all__ = [
    "FineTunePolicy",
    "FT_FULL",
    "FT_LAST",
    "FT_NORM_LAST",
    "BIAS_HEAD",
    "LITE_HEAD",
    "LITE_BIAS_HEAD",
    "POLICIES",
    "custom_policy",
    "TrainablePlan",
    "apply_policy",
]


@dataclass(frozen=True)
class FineTunePolicy:
    name: str
    groups: frozenset  # trainable groups besides the always-on head


FT_FULL = FineTunePolicy("ft-full", frozenset({GROUP_WEIGHT, GROUP_BIAS, GROUP_NORM, GROUP_LITE}))
FT_LAST = FineTunePolicy("ft-last", frozenset())
FT_NORM_LAST = FineTunePolicy("ft-norm-last", frozenset({GROUP_NORM}))
BIAS_HEAD = FineTunePolicy("tinytl-b", frozenset({GROUP_BIAS}))
LITE_HEAD = FineTunePolicy("tinytl-l", frozenset({GROUP_LITE}))
LITE_BIAS_HEAD = FineTunePolicy("tinytl-lb", frozenset({GROUP_BIAS, GROUP_LITE}))

POLICIES = {p.name: p for p in (FT_FULL, FT_LAST, FT_NORM_LAST, BIAS_HEAD, LITE_HEAD, LITE_BIAS_HEAD)}


def custom_policy(groups) -> FineTunePolicy:
    groups = frozenset(groups)
    unknown = groups - set(PARAM_GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
    return FineTunePolicy("custom", groups)


@dataclass
class TrainablePlan:
    policy: FineTunePolicy
    params: list  # trainable parameters, model order
    n_trainable: int
    n_total: int

    @property
    def frozen_count(self) -> int:
        return self.n_total - self.n_trainable


def apply_policy(model: Model, policy: FineTunePolicy) -> TrainablePlan:
    """Set trainability on every parameter; the head stays trainable."""
    trainable = []
    n_train = 0
    n_total = 0
    for p in model.parameters():
        p.trainable = p.group == "head" or p.group in policy.groups
        n_total += p.numel
        if p.trainable:
            trainable.append(p)
            n_train += p.numel
    return TrainablePlan(policy, trainable, n_train, n_total)
