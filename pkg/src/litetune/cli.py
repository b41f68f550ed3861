"""Command line front end.

Every command that writes a report also renders a PNG next to it (same
stem). Output format follows the --out extension: .json or .csv.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .blocks import build_backbone
from .data import SynthSpec, load_dataset, save_dataset, synth_dataset
from .fileio import (
    SpecFileError,
    config_to_json,
    emit_report,
    load_arch_file,
    load_space,
)
from .memory import model_footprint
from .policies import POLICIES
from .search import PipelineConfig, SearchConfig, adapt_pipeline, build_supernet
from .training import TrainConfig, gradient_check, train
from . import plots

POLICY_NAMES = sorted(POLICIES)


class CommandError(Exception):
    """User-facing failure; message printed without a traceback."""


def _out_format(path: Path) -> str:
    ext = path.suffix.lower()
    if ext == ".json":
        return "json"
    if ext == ".csv":
        return "csv"
    raise CommandError(f"{path}: output must end in .json or .csv")


def _figure_path(out: Path) -> Path:
    return out.with_suffix(".png")


def _load_arch(path) -> tuple:
    try:
        return load_arch_file(path)
    except (OSError, SpecFileError) as exc:
        raise CommandError(str(exc)) from exc


def _load_data(path):
    try:
        return load_dataset(path)
    except (OSError, ValueError) as exc:
        raise CommandError(str(exc)) from exc


def _policy(name: str):
    return POLICIES[name]


def cmd_analyze(args) -> int:
    arch, n_classes = _load_arch(args.arch)
    model = build_backbone(arch, n_classes, seed=0)
    resolution = args.resolution if args.resolution else arch.resolution
    report = model_footprint(model, _policy(args.policy), args.batch, resolution)
    out = Path(args.out)
    emit_report(report, _out_format(out), out)
    plots.plot_memory_breakdown(report.to_dict(), _figure_path(out))
    print(
        f"{args.policy}: headline {report.headline_mb:.2f} MB "
        f"(activations {report.saved_activation_bytes} B) -> {out}"
    )
    return 0


def cmd_train(args) -> int:
    arch, n_classes = _load_arch(args.arch)
    dataset = _load_data(args.data)
    if dataset.n_classes != n_classes:
        raise CommandError(
            f"{args.data}: dataset has {dataset.n_classes} classes, architecture head expects {n_classes}"
        )
    model = build_backbone(arch, n_classes, seed=args.seed)
    config = TrainConfig(lr=args.lr, epochs=args.epochs, batch=args.batch, seed=args.seed)
    report = train(model, dataset, _policy(args.policy), config)
    out = Path(args.out)
    emit_report(report, _out_format(out), out)
    plots.plot_loss_curve(report.to_dict(), _figure_path(out))
    print(
        f"{args.policy}: final acc {report.final_acc:.3f}, "
        f"peak saved {report.peak_saved_bytes} B -> {out}"
    )
    return 0


def cmd_gradcheck(args) -> int:
    arch, n_classes = _load_arch(args.arch)
    dtype = np.float64 if args.dtype == "float64" else np.float32
    model = build_backbone(arch, n_classes, seed=args.seed, dtype=dtype)
    from .policies import apply_policy

    apply_policy(model, _policy(args.policy))
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.batch, arch.in_channels, args.resolution, args.resolution))
    worst = gradient_check(model, x, eps=args.eps, limit=args.limit, probe_seed=args.seed)
    tol = args.tol if args.tol is not None else (1e-4 if args.dtype == "float64" else 1e-3)
    ok = worst <= tol
    print(
        f"{args.policy} [{args.dtype}] eps={args.eps:g}: "
        f"max relative error {worst:.3e} ({'OK' if ok else 'FAIL'}, tol {tol:g})"
    )
    return 0 if ok else 1


def cmd_search(args) -> int:
    try:
        space, n_classes = load_space(args.space)
    except (OSError, SpecFileError) as exc:
        raise CommandError(str(exc)) from exc
    dataset = _load_data(args.data)
    if dataset.n_classes != n_classes:
        raise CommandError(
            f"{args.data}: dataset has {dataset.n_classes} classes, space head expects {n_classes}"
        )
    supernet = build_supernet(space, n_classes, seed=args.seed)
    config = PipelineConfig(
        space=space,
        steps=args.steps,
        batch=args.batch,
        lr=args.lr,
        pairs=args.pairs,
        predictor_epochs=args.predictor_epochs,
        search=SearchConfig(
            population=args.population, generations=args.generations, seed=args.seed
        ),
        final=TrainConfig(lr=args.lr, epochs=args.epochs, batch=args.batch, seed=args.seed),
        seed=args.seed,
    )
    trace: dict = {}
    winner, _, cost = adapt_pipeline(supernet, dataset, config, trace=trace)
    out = Path(args.out)
    doc = {
        "schema": "search-report/1",
        "winner": config_to_json(winner),
        "final_accuracy": trace["final_accuracy"],
        "configs_scored": len(trace["history_scores"]),
        "cost": cost.to_dict(),
    }
    import json

    with open(out, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    plots.plot_search(trace["history_scores"], _figure_path(out))
    print(
        f"winner res {winner.resolution}, depths {list(winner.depths)}, "
        f"final acc {trace['final_accuracy']:.3f} -> {out}"
    )
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_classes=args.classes,
        per_class=args.per_class,
        size=args.size,
        noise=args.noise,
        seed=args.seed,
    )
    dataset = synth_dataset(spec)
    out = Path(args.out)
    save_dataset(dataset, out)
    plots.plot_samples(dataset, _figure_path(out))
    print(f"{len(dataset)} images, {dataset.n_classes} classes, {args.size}x{args.size} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    arch, n_classes = _load_arch(args.arch)
    model = build_backbone(arch, n_classes, seed=0)
    policies = POLICY_NAMES if args.policies == "all" else args.policies.split(",")
    for name in policies:
        if name not in POLICIES:
            raise CommandError(f"unknown policy {name!r} (choose from {', '.join(POLICY_NAMES)})")
    try:
        resolutions = [int(r) for r in args.resolutions.split(",")]
    except ValueError as exc:
        raise CommandError(f"--resolutions must be comma-separated integers: {exc}") from exc
    rows = []
    for name in policies:
        for res in resolutions:
            report = model_footprint(model, _policy(name), args.batch, res)
            rows.append(
                {
                    "policy": name,
                    "batch": args.batch,
                    "resolution": res,
                    "saved_activation_bytes": report.saved_activation_bytes,
                    "frozen_param_bytes": report.frozen_param_bytes,
                    "trainable_param_bytes": report.trainable_param_bytes,
                    "optimizer_state_bytes": report.optimizer_state_bytes,
                    "headline_bytes": report.headline_bytes,
                    "headline_mb": report.headline_mb,
                }
            )
    out = Path(args.out)
    emit_report({"schema": "sweep-report/1", "rows": rows}, _out_format(out), out)
    plots.plot_sweep(rows, _figure_path(out))
    print(f"{len(rows)} rows ({len(policies)} policies x {len(resolutions)} resolutions) -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="litetune", description="Memory-frugal fine-tuning toolkit."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="per-layer training memory breakdown")
    p.add_argument("--arch", required=True)
    p.add_argument("--policy", required=True, choices=POLICY_NAMES)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--resolution", type=int, default=0, help="defaults to the architecture's")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="fine-tune on a dataset file")
    p.add_argument("--arch", required=True)
    p.add_argument("--policy", required=True, choices=POLICY_NAMES)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    p.add_argument("--arch", required=True)
    p.add_argument("--policy", required=True, choices=POLICY_NAMES)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float64")
    p.add_argument("--tol", type=float, default=None, help="pass bar; defaults per dtype")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--limit", type=int, default=2, help="scalars probed per parameter")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("search", help="tune a super-network and search for a sub-network")
    p.add_argument("--space", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--population", type=int, default=100)
    p.add_argument("--generations", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=100, help="super-network tuning steps")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=5, help="final fine-tune epochs")
    p.add_argument("--predictor-epochs", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("synth", help="write a synthetic labeled dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="footprint across policies and resolutions")
    p.add_argument("--arch", required=True)
    p.add_argument("--policies", default="all", help="comma-separated policy names or 'all'")
    p.add_argument("--resolutions", default="128,160,192,224")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
