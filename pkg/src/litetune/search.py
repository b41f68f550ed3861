"""Elastic sub-network space over a weight-shared super-network.

One backbone stores the largest variant of every block; a sub-network is
described by per-stage depth, per-block kernel/expand and branch
group/kernel choices plus an input resolution, and is materialized as a
model whose parameters are numpy views into the super-network's arrays.
Candidate quality is estimated by a small regressor over one-hot
architecture encodings, and an evolutionary loop searches the space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Parameter, Tape, Tensor, backward_pass, linear_forward
from .blocks import (
    ArchitectureSpec,
    LiteResidualSpec,
    MBBlockSpec,
    Model,
    build_backbone,
)
from .data import Dataset, resize_batch
from .layers import activation
from .memory import CostReport, mac_count, model_footprint
from .policies import POLICIES
from .training import (
    AdamState,
    MemoryMismatch,
    TrainConfig,
    adam_step,
    apply_policy,
    cosine_lr,
    softmax_cross_entropy,
    train,
)

PREDICTOR_HIDDEN = 400


@dataclass(frozen=True)
class StageLayout:
    """Fixed skeleton of one stage; the elastic dimensions hang off it."""

    out_channels: int
    stride: int
    lite_downsample: int = 2


@dataclass(frozen=True)
class ElasticSpace:
    stem_channels: int
    stages: tuple
    depths: tuple = (2, 3, 4)
    kernels: tuple = (3, 5, 7)
    expands: tuple = (3, 4, 6)
    lite_groups: tuple = (2, 4)
    lite_kernels: tuple = (3, 5)
    resolutions: tuple = (224,)

    def __post_init__(self):
        for label in ("depths", "kernels", "expands", "lite_groups", "lite_kernels", "resolutions"):
            opts = getattr(self, label)
            if not opts:
                raise ValueError(f"{label} must offer at least one option")
            if len(set(opts)) != len(opts):
                raise ValueError(f"{label} options must be distinct, got {opts}")
        if not self.stages:
            raise ValueError("space needs at least one stage")
        chain = [self.stem_channels] + [s.out_channels for s in self.stages]
        for width in chain:
            if width % 8:
                raise ValueError(f"channel width {width} must be a multiple of 8")
        for cin in chain[:-1]:
            for g in self.lite_groups:
                if cin % g:
                    raise ValueError(f"stage input width {cin} not divisible by branch groups {g}")

    @property
    def max_depth(self) -> int:
        return max(self.depths)

    def stage_in_channels(self, stage_idx: int) -> int:
        return self.stem_channels if stage_idx == 0 else self.stages[stage_idx - 1].out_channels

    def full_config(self) -> "SubNetConfig":
        """The configuration whose extraction is the identity: deepest,
        widest, largest kernels, and the group count the weights are
        stored at (the smallest, since fewer groups means a larger
        fan-in)."""
        choice = BlockChoice(
            kernel=max(self.kernels),
            expand=max(self.expands),
            lite_groups=min(self.lite_groups),
            lite_kernel=max(self.lite_kernels),
        )
        d = self.max_depth
        return SubNetConfig(
            depths=(d,) * len(self.stages),
            blocks=tuple((choice,) * d for _ in self.stages),
            resolution=max(self.resolutions),
        )

    def arch_for(self, config: "SubNetConfig") -> ArchitectureSpec:
        config.check(self)
        stages = []
        for si, layout in enumerate(self.stages):
            blocks = []
            cin = self.stage_in_channels(si)
            for bi in range(config.depths[si]):
                ch = config.blocks[si][bi]
                lite = LiteResidualSpec(
                    kernel=ch.lite_kernel,
                    groups=ch.lite_groups,
                    downsample=layout.lite_downsample,
                )
                blocks.append(
                    MBBlockSpec(
                        cin if bi == 0 else layout.out_channels,
                        layout.out_channels,
                        expand=ch.expand,
                        kernel=ch.kernel,
                        stride=layout.stride if bi == 0 else 1,
                        lite=lite,
                    )
                )
            stages.append(tuple(blocks))
        return ArchitectureSpec(
            stem_channels=self.stem_channels,
            stages=tuple(stages),
            resolution=config.resolution,
        )

    def total_configs(self) -> int:
        per_slot = len(self.kernels) * len(self.expands) * len(self.lite_groups) * len(self.lite_kernels)
        per_stage = sum(per_slot ** d for d in self.depths)
        return per_stage ** len(self.stages) * len(self.resolutions)

    def enumerate_configs(self):
        """Every configuration in the space; only sane for tiny spaces."""
        import itertools

        slot_opts = [
            BlockChoice(k, e, g, lk)
            for k in self.kernels
            for e in self.expands
            for g in self.lite_groups
            for lk in self.lite_kernels
        ]
        stage_variants = []
        for _ in self.stages:
            variants = []
            for d in self.depths:
                variants.extend(
                    (d, combo) for combo in itertools.product(slot_opts, repeat=d)
                )
            stage_variants.append(variants)
        for stage_pick in itertools.product(*stage_variants):
            for res in self.resolutions:
                yield SubNetConfig(
                    depths=tuple(d for d, _ in stage_pick),
                    blocks=tuple(combo for _, combo in stage_pick),
                    resolution=res,
                )


@dataclass(frozen=True)
class BlockChoice:
    kernel: int
    expand: int
    lite_groups: int
    lite_kernel: int


@dataclass(frozen=True)
class SubNetConfig:
    """Canonical choice set: exactly one BlockChoice per active block."""

    depths: tuple
    blocks: tuple
    resolution: int

    def __post_init__(self):
        if len(self.depths) != len(self.blocks):
            raise ValueError("depths and blocks must cover the same stages")
        for d, chs in zip(self.depths, self.blocks):
            if len(chs) != d:
                raise ValueError(f"stage with depth {d} carries {len(chs)} block choices")

    def check(self, space: ElasticSpace) -> None:
        if len(self.depths) != len(space.stages):
            raise ValueError(f"config spans {len(self.depths)} stages, space has {len(space.stages)}")
        if self.resolution not in space.resolutions:
            raise ValueError(f"resolution {self.resolution} not offered by the space")
        for si, (d, chs) in enumerate(zip(self.depths, self.blocks)):
            if d not in space.depths:
                raise ValueError(f"stage {si}: depth {d} not offered")
            for bi, ch in enumerate(chs):
                if ch.kernel not in space.kernels:
                    raise ValueError(f"stage {si} block {bi}: kernel {ch.kernel} not offered")
                if ch.expand not in space.expands:
                    raise ValueError(f"stage {si} block {bi}: expand {ch.expand} not offered")
                if ch.lite_groups not in space.lite_groups:
                    raise ValueError(f"stage {si} block {bi}: groups {ch.lite_groups} not offered")
                if ch.lite_kernel not in space.lite_kernels:
                    raise ValueError(f"stage {si} block {bi}: branch kernel {ch.lite_kernel} not offered")


def _sample(space: ElasticSpace, rng: np.random.Generator) -> SubNetConfig:
    def pick(opts):
        return opts[int(rng.integers(len(opts)))]

    depths = []
    blocks = []
    for _ in space.stages:
        d = pick(space.depths)
        depths.append(d)
        blocks.append(
            tuple(
                BlockChoice(
                    kernel=pick(space.kernels),
                    expand=pick(space.expands),
                    lite_groups=pick(space.lite_groups),
                    lite_kernel=pick(space.lite_kernels),
                )
                for _ in range(d)
            )
        )
    return SubNetConfig(tuple(depths), tuple(blocks), pick(space.resolutions))


def sample_subnet(space: ElasticSpace, seed: int) -> SubNetConfig:
    """Uniform independent choice along every elastic dimension."""
    return _sample(space, np.random.default_rng(seed))


def build_supernet(space: ElasticSpace, n_classes: int, seed: int = 0, dtype=np.float32) -> Model:
    """The backbone holding every variant's weights: built at the
    identity-extraction configuration."""
    return build_backbone(space.arch_for(space.full_config()), n_classes, seed=seed, dtype=dtype)


class _ViewInit:
    """Parameter factory that slices views out of an existing model.

    Output/input channel axes take leading slices, spatial axes take the
    centered window, which is how smaller kernels and narrower expansions
    share weights with the stored maxima.
    """

    def __init__(self, base_params: dict):
        self.base = base_params

    def __call__(self, name, shape, group, kind, fan_in) -> Parameter:
        base = self.base[name]
        if base.storage is not base.data:
            raise ValueError(f"{name}: cannot re-slice an already extracted view")
        slices = []
        for d, (want, have) in enumerate(zip(shape, base.data.shape)):
            if want > have:
                raise ValueError(f"{name}: axis {d} wants {want}, storage holds {have}")
            off = (have - want) // 2 if d >= 2 else 0
            slices.append(slice(off, off + want))
        index = tuple(slices)
        return Parameter(name, base.data[index], base.group, storage=base.data, index=index)


def subnet_extract(supernet: Model, config: SubNetConfig, space: ElasticSpace) -> Model:
    """Materialize one sub-network; its parameters are views, so training
    it writes straight into the super-network and optimizer moments keyed
    at storage shape stay shared across every extraction."""
    config.check(space)
    base = {p.name: p for p in supernet.parameters()}
    arch = space.arch_for(config)
    return build_backbone(arch, supernet.head.n_classes, init=_ViewInit(base), dtype=supernet.dtype)


# ---------------------------------------------------------------------------
# one-hot encoding

def _one_hot(opts, value) -> np.ndarray:
    vec = np.zeros(len(opts))
    vec[list(opts).index(value)] = 1.0
    return vec


def slot_width(space: ElasticSpace) -> int:
    return len(space.kernels) + len(space.expands) + len(space.lite_groups) + len(space.lite_kernels)


def encoded_width(space: ElasticSpace) -> int:
    per_stage = len(space.depths) + space.max_depth * slot_width(space)
    return per_stage * len(space.stages) + len(space.resolutions)


def encode_arch(config: SubNetConfig, space: ElasticSpace) -> np.ndarray:
    """Fixed-layout one-hot vector; inactive block slots stay all-zero."""
    config.check(space)
    parts = []
    for si in range(len(space.stages)):
        parts.append(_one_hot(space.depths, config.depths[si]))
        for bi in range(space.max_depth):
            if bi < config.depths[si]:
                ch = config.blocks[si][bi]
                parts.append(_one_hot(space.kernels, ch.kernel))
                parts.append(_one_hot(space.expands, ch.expand))
                parts.append(_one_hot(space.lite_groups, ch.lite_groups))
                parts.append(_one_hot(space.lite_kernels, ch.lite_kernel))
            else:
                parts.append(np.zeros(slot_width(space)))
    parts.append(_one_hot(space.resolutions, config.resolution))
    return np.concatenate(parts)


def _read_one_hot(vec, offset, opts, required: bool):
    chunk = vec[offset : offset + len(opts)]
    hot = np.flatnonzero(chunk == 1.0)
    if required:
        if len(hot) != 1 or chunk.sum() != 1.0:
            raise ValueError(f"malformed one-hot group at offset {offset}")
        return list(opts)[int(hot[0])], offset + len(opts)
    if chunk.any():
        raise ValueError(f"inactive slot at offset {offset} is not all-zero")
    return None, offset + len(opts)


def decode_arch(vec: np.ndarray, space: ElasticSpace) -> SubNetConfig:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (encoded_width(space),):
        raise ValueError(f"encoding has shape {vec.shape}, expected ({encoded_width(space)},)")
    off = 0
    depths = []
    blocks = []
    for _ in space.stages:
        d, off = _read_one_hot(vec, off, space.depths, required=True)
        chs = []
        for bi in range(space.max_depth):
            active = bi < d
            k, off = _read_one_hot(vec, off, space.kernels, active)
            e, off = _read_one_hot(vec, off, space.expands, active)
            g, off = _read_one_hot(vec, off, space.lite_groups, active)
            lk, off = _read_one_hot(vec, off, space.lite_kernels, active)
            if active:
                chs.append(BlockChoice(k, e, g, lk))
        depths.append(d)
        blocks.append(tuple(chs))
    res, off = _read_one_hot(vec, off, space.resolutions, required=True)
    return SubNetConfig(tuple(depths), tuple(blocks), res)


# ---------------------------------------------------------------------------
# accuracy predictor

class AccuracyPredictor:
    """Three dense layers, relu between, scalar output.

    The final layer starts at zero so an untrained predictor is exactly
    the constant fit, and targets are shift/scale normalized internally.
    """

    def __init__(self, input_width: int, seed: int = 0):
        self.input_width = int(input_width)
        rng = np.random.default_rng([seed, self.input_width])
        h = PREDICTOR_HIDDEN

        def dense(name, n_in, n_out, zero=False):
            w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, math.sqrt(2.0 / n_in), (n_in, n_out))
            return (
                Parameter(f"{name}.weight", w, "predictor"),
                Parameter(f"{name}.bias", np.zeros(n_out), "predictor"),
            )

        self.w1, self.b1 = dense("pred.l1", self.input_width, h)
        self.w2, self.b2 = dense("pred.l2", h, h)
        self.w3, self.b3 = dense("pred.l3", h, 1, zero=True)
        self.y_shift = 0.0
        self.y_scale = 1.0

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    @property
    def parameter_count(self) -> int:
        return sum(p.numel for p in self.parameters())

    @property
    def mac_per_sample(self) -> int:
        h = PREDICTOR_HIDDEN
        return self.input_width * h + h * h + h

    def _forward(self, x: Tensor, tape) -> Tensor:
        t = linear_forward(x, self.w1, self.b1, tape)
        t = activation(t, "relu", tape)
        t = linear_forward(t, self.w2, self.b2, tape)
        t = activation(t, "relu", tape)
        return linear_forward(t, self.w3, self.b3, tape)

    def predict(self, encodings: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(encodings, dtype=np.float64))
        out = self._forward(Tensor(x), None)
        return out.data[:, 0] * self.y_scale + self.y_shift

    def predict_config(self, config: SubNetConfig, space: ElasticSpace) -> float:
        return float(self.predict(encode_arch(config, space)[None])[0])


def predictor_train(
    pairs,
    space: ElasticSpace,
    epochs: int = 200,
    seed: int = 0,
    lr: float = 1e-3,
) -> AccuracyPredictor:
    """Full-batch squared-error regression on (encoding, accuracy) pairs."""
    if len(pairs) < 2:
        raise ValueError(f"need at least two pairs, got {len(pairs)}")
    X = np.stack([encode_arch(cfg, space) for cfg, _ in pairs])
    y = np.asarray([acc for _, acc in pairs], dtype=np.float64)

    predictor = AccuracyPredictor(X.shape[1], seed=seed)
    predictor.y_shift = float(y.mean())
    scale = float(y.std())
    predictor.y_scale = scale if scale > 1e-12 else 1.0
    target = (y - predictor.y_shift) / predictor.y_scale

    params = predictor.parameters()
    state = AdamState()
    n = X.shape[0]
    xt = Tensor(X)
    for _ in range(epochs):
        tape = Tape()
        pred = predictor._forward(xt, tape)
        residual = pred.data[:, 0] - target
        out_grad = (2.0 / n) * residual[:, None]
        grads = backward_pass(tape, out_grad)
        adam_step(params, grads, state, lr)
    return predictor


# ---------------------------------------------------------------------------
# evolutionary search

@dataclass(frozen=True)
class SearchConfig:
    population: int = 100
    generations: int = 30
    mutation: float = 0.1
    parent_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if not 0.0 <= self.mutation <= 1.0:
            raise ValueError("mutation probability must lie in [0, 1]")
        if not 0.0 < self.parent_fraction <= 1.0:
            raise ValueError("parent fraction must lie in (0, 1]")


def _mutate(cfg: SubNetConfig, space: ElasticSpace, prob: float, rng) -> SubNetConfig:
    def pick(opts):
        return opts[int(rng.integers(len(opts)))]

    def flip():
        return rng.random() < prob

    depths = []
    blocks = []
    for si in range(len(space.stages)):
        d = pick(space.depths) if flip() else cfg.depths[si]
        chs = []
        for bi in range(d):
            if bi < cfg.depths[si]:
                ch = cfg.blocks[si][bi]
                chs.append(
                    BlockChoice(
                        kernel=pick(space.kernels) if flip() else ch.kernel,
                        expand=pick(space.expands) if flip() else ch.expand,
                        lite_groups=pick(space.lite_groups) if flip() else ch.lite_groups,
                        lite_kernel=pick(space.lite_kernels) if flip() else ch.lite_kernel,
                    )
                )
            else:
                chs.append(
                    BlockChoice(
                        kernel=pick(space.kernels),
                        expand=pick(space.expands),
                        lite_groups=pick(space.lite_groups),
                        lite_kernel=pick(space.lite_kernels),
                    )
                )
        depths.append(d)
        blocks.append(tuple(chs))
    res = pick(space.resolutions) if flip() else cfg.resolution
    return SubNetConfig(tuple(depths), tuple(blocks), res)


def _crossover(a: SubNetConfig, b: SubNetConfig, rng) -> SubNetConfig:
    def coin():
        return bool(rng.integers(2))

    depths = []
    blocks = []
    for si in range(len(a.depths)):
        d = a.depths[si] if coin() else b.depths[si]
        chs = []
        for bi in range(d):
            donors = [c for c in (a, b) if bi < c.depths[si]]
            donor = donors[0] if len(donors) == 1 or coin() else donors[1]
            chs.append(donor.blocks[si][bi])
        depths.append(d)
        blocks.append(tuple(chs))
    res = a.resolution if coin() else b.resolution
    return SubNetConfig(tuple(depths), tuple(blocks), res)


def evolve(predictor, space: ElasticSpace, sc: SearchConfig, history: dict | None = None) -> SubNetConfig:
    """Seeded evolutionary loop; returns the best configuration ever
    scored. ``predictor`` is an AccuracyPredictor or any callable mapping
    a config to a score. ``history`` (config -> score) is filled in place
    when supplied."""
    if isinstance(predictor, AccuracyPredictor):
        score_fn = lambda cfg: predictor.predict_config(cfg, space)
    else:
        score_fn = predictor
    rng = np.random.default_rng(sc.seed)
    scored: dict = history if history is not None else {}

    def score(cfg: SubNetConfig) -> float:
        if cfg not in scored:
            scored[cfg] = float(score_fn(cfg))
        return scored[cfg]

    population = [_sample(space, rng) for _ in range(sc.population)]
    n_parents = max(1, math.ceil(sc.parent_fraction * sc.population))
    for _ in range(sc.generations):
        ranked = sorted(population, key=score, reverse=True)
        parents = ranked[:n_parents]
        children = []
        while len(children) < sc.population - n_parents:
            i, j = rng.integers(len(parents)), rng.integers(len(parents))
            child = _crossover(parents[int(i)], parents[int(j)], rng)
            children.append(_mutate(child, space, sc.mutation, rng))
        population = parents + children
    for cfg in population:
        score(cfg)
    return max(scored, key=scored.get)


# ---------------------------------------------------------------------------
# pair collection and the three-phase adaptation pipeline

def _accuracy_at(model: Model, dataset: Dataset, resolution: int, batch: int = 64) -> float:
    """Forward-only top-1 accuracy with inputs resized to the model's
    configured resolution; nothing is taped."""
    x_all = dataset.float_images()
    y_all = dataset.labels.astype(np.int64)
    hits = 0
    for s in range(0, len(dataset), batch):
        xb = resize_batch(x_all[s : s + batch], resolution).astype(model.dtype)
        logits = model.forward(xb, tape=None)
        hits += int((logits.data.argmax(axis=1) == y_all[s : s + batch]).sum())
    return hits / max(len(dataset), 1)


def collect_pairs(
    supernet: Model,
    space: ElasticSpace,
    eval_set: Dataset,
    n: int = 500,
    seed: int = 0,
    eval_fn=None,
) -> list:
    """n seeded (config, accuracy) pairs, evaluated without any backward
    pass; ``eval_fn(config)`` substitutes the evaluation when given."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        cfg = _sample(space, rng)
        if eval_fn is not None:
            acc = float(eval_fn(cfg))
        else:
            sub = subnet_extract(supernet, cfg, space)
            acc = _accuracy_at(sub, eval_set, cfg.resolution)
        pairs.append((cfg, acc))
    return pairs


@dataclass
class PipelineConfig:
    space: ElasticSpace
    steps: int = 100
    batch: int = 8
    lr: float = 1e-3
    pairs: int = 500
    predictor_epochs: int = 200
    search: SearchConfig = field(default_factory=SearchConfig)
    val_fraction: float = 0.2
    final: TrainConfig | None = None
    seed: int = 0
    eval_fn: object = None


def adapt_pipeline(supernet: Model, dataset: Dataset, config: PipelineConfig, trace: dict | None = None):
    """Three phases: tune the super-network with a random sub-network per
    step (branches and biases only), collect accuracy pairs on the held
    out fifth and search over the predictor, then fine-tune the winner on
    the full set. Returns (winner config, tuned model, cost report with
    per-phase MAC totals). ``trace``, when given, is filled with the
    search history and final loss curve for reporting."""
    space = config.space
    policy = POLICIES["tinytl-lb"]
    train_set, val_set = dataset.split(1.0 - config.val_fraction, seed=config.seed)

    # phase 1: random sub-network per step, shared optimizer moments
    rng = np.random.default_rng([config.seed, 1])
    state = AdamState()
    x_all = train_set.float_images()
    y_all = train_set.labels.astype(np.int64)
    order = rng.permutation(len(train_set))
    cursor = 0
    phase1_mac = 0
    peak_saved = 0
    peak_footprint = 0
    for step in range(config.steps):
        if cursor + config.batch > len(order):
            order = rng.permutation(len(train_set))
            cursor = 0
        idx = order[cursor : cursor + config.batch]
        cursor += config.batch

        cfg = _sample(space, rng)
        sub = subnet_extract(supernet, cfg, space)
        plan = apply_policy(sub, policy)
        xb = resize_batch(x_all[idx], cfg.resolution).astype(sub.dtype)
        footprint = model_footprint(sub, policy, len(idx), cfg.resolution)

        tape = Tape()
        logits = sub.forward(xb, tape)
        loss, out_grad = softmax_cross_entropy(logits.data, y_all[idx])
        saved = tape.saved_bytes()
        if saved != footprint.saved_activation_bytes:
            raise MemoryMismatch(
                f"step {step}: tape holds {saved} bytes, footprint says {footprint.saved_activation_bytes}"
            )
        peak_saved = max(peak_saved, saved)
        peak_footprint = max(peak_footprint, footprint.headline_bytes)
        grads = backward_pass(tape, out_grad.astype(sub.dtype))
        lr = cosine_lr(step, config.steps, config.lr)
        adam_step(plan.params, grads, state, lr)
        phase1_mac += mac_count(sub, policy, len(idx), cfg.resolution, training=True)

    # phase 2: forward-only pair collection, predictor fit, evolution
    pairs = collect_pairs(
        supernet, space, val_set, n=config.pairs, seed=config.seed, eval_fn=config.eval_fn
    )
    phase2_mac = 0
    if config.eval_fn is None:
        for cfg, _ in pairs:
            sub = subnet_extract(supernet, cfg, space)
            phase2_mac += mac_count(sub, policy, len(val_set), cfg.resolution, training=False)
    predictor = predictor_train(pairs, space, epochs=config.predictor_epochs, seed=config.seed)
    # squared-error fit runs forward and backward over every pair each
    # epoch; all three dense layers train
    phase2_mac += 3 * predictor.mac_per_sample * len(pairs) * config.predictor_epochs
    history: dict = {}
    winner = evolve(predictor, space, config.search, history=history)
    phase2_mac += predictor.mac_per_sample * len(history)

    # phase 3: fine-tune the winner on all of the training data
    final_model = subnet_extract(supernet, winner, space)
    recipe = config.final or TrainConfig(lr=config.lr, epochs=5, batch=config.batch, seed=config.seed)
    if winner.resolution != dataset.height:
        resized = Dataset(
            np.clip(
                np.rint(resize_batch(dataset.float_images(), winner.resolution) * 255.0), 0, 255
            ).astype(np.uint8),
            dataset.labels,
            dataset.n_classes,
        )
    else:
        resized = dataset
    report = train(final_model, resized, policy, recipe)
    phase3_mac = (
        mac_count(final_model, policy, 1, winner.resolution, training=True) * len(resized) * recipe.epochs
    )
    if trace is not None:
        trace["history_scores"] = [float(s) for s in history.values()]
        trace["loss_curve"] = [float(v) for v in report.loss_curve]
        trace["final_accuracy"] = float(report.final_acc)

    cost = CostReport(
        inference_mac=mac_count(final_model, policy, 1, winner.resolution, training=False),
        training_mac=mac_count(final_model, policy, 1, winner.resolution, training=True),
        memory=model_footprint(final_model, policy, config.batch, winner.resolution),
        phases={
            "supernet-tune": {
                "mac": int(phase1_mac),
                "steps": config.steps,
                "peak_saved_bytes": int(peak_saved),
                "peak_headline_bytes": int(peak_footprint),
            },
            "collect-and-search": {
                "mac": int(phase2_mac),
                "pairs": len(pairs),
                "configs_scored": len(history),
                "saved_bytes": 0,
            },
            "final-tune": {
                "mac": int(phase3_mac),
                "epochs": recipe.epochs,
                "final_accuracy": report.final_acc,
            },
        },
    )
    return winner, final_model, cost
