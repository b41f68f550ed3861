"""JSON architecture and search-space files, and report emission.

Arch files describe one concrete backbone; space files describe the
skeleton plus elastic option lists. Reports serialize to JSON (full
structure, schema-tagged) or CSV (flat rows, stable column order).
"""

from __future__ import annotations

import csv
import json
from importlib import resources

from .blocks import ArchitectureSpec, LiteResidualSpec, MBBlockSpec
from .memory import CostReport, MemoryReport
from .search import BlockChoice, ElasticSpace, StageLayout, SubNetConfig
from .training import TrainReport

ARCH_VERSION = 1
SPACE_VERSION = 1


class SpecFileError(ValueError):
    """Malformed arch/space file; the message names the offending field."""


def _need(obj: dict, key: str, where: str):
    if key not in obj:
        raise SpecFileError(f"{where}: missing field {key!r}")
    return obj[key]


def arch_to_json(spec: ArchitectureSpec, n_classes: int) -> dict:
    stages = []
    for stage in spec.stages:
        blocks = []
        for blk in stage:
            entry = {
                "in_ch": blk.in_channels,
                "out_ch": blk.out_channels,
                "expand": blk.expand,
                "kernel": blk.kernel,
                "stride": blk.stride,
                "lite": None,
            }
            if blk.lite is not None:
                entry["lite"] = {
                    "groups": blk.lite.groups,
                    "kernel": blk.lite.kernel,
                    "downsample": blk.lite.downsample,
                }
            blocks.append(entry)
        stages.append({"depth": len(blocks), "blocks": blocks})
    return {
        "version": ARCH_VERSION,
        "stem": {"out_ch": spec.stem_channels, "kernel": spec.stem_kernel, "stride": spec.stem_stride},
        "stages": stages,
        "head": {"n_classes": n_classes},
        "resolution": spec.resolution,
    }


def arch_from_json(doc: dict) -> tuple[ArchitectureSpec, int]:
    if _need(doc, "version", "arch") != ARCH_VERSION:
        raise SpecFileError(f"arch.version: expected {ARCH_VERSION}, got {doc['version']}")
    stem = _need(doc, "stem", "arch")
    stages = []
    for si, stage in enumerate(_need(doc, "stages", "arch")):
        where = f"stages[{si}]"
        blocks = []
        declared = _need(stage, "depth", where)
        raw_blocks = _need(stage, "blocks", where)
        if declared != len(raw_blocks):
            raise SpecFileError(f"{where}: depth {declared} but {len(raw_blocks)} blocks listed")
        for bi, blk in enumerate(raw_blocks):
            bwhere = f"{where}.blocks[{bi}]"
            lite = blk.get("lite")
            lite_spec = None
            if lite is not None:
                lite_spec = LiteResidualSpec(
                    kernel=_need(lite, "kernel", f"{bwhere}.lite"),
                    groups=_need(lite, "groups", f"{bwhere}.lite"),
                    downsample=lite.get("downsample", 2),
                )
            try:
                blocks.append(
                    MBBlockSpec(
                        _need(blk, "in_ch", bwhere),
                        _need(blk, "out_ch", bwhere),
                        expand=_need(blk, "expand", bwhere),
                        kernel=_need(blk, "kernel", bwhere),
                        stride=_need(blk, "stride", bwhere),
                        lite=lite_spec,
                    )
                )
            except ValueError as exc:
                raise SpecFileError(f"{bwhere}: {exc}") from exc
        stages.append(tuple(blocks))
    spec = ArchitectureSpec(
        stem_channels=_need(stem, "out_ch", "arch.stem"),
        stages=tuple(stages),
        stem_kernel=_need(stem, "kernel", "arch.stem"),
        stem_stride=_need(stem, "stride", "arch.stem"),
        resolution=_need(doc, "resolution", "arch"),
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise SpecFileError(f"arch: {exc}") from exc
    n_classes = _need(_need(doc, "head", "arch"), "n_classes", "arch.head")
    return spec, n_classes


def load_arch_file(path) -> tuple[ArchitectureSpec, int]:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise SpecFileError(f"{path}: not valid JSON ({exc})") from exc
    return arch_from_json(doc)


def load_arch(path) -> ArchitectureSpec:
    return load_arch_file(path)[0]


def save_arch(spec: ArchitectureSpec, n_classes: int, path) -> None:
    with open(path, "w") as f:
        json.dump(arch_to_json(spec, n_classes), f, indent=2)
        f.write("\n")


def bundled_arch(name: str = "reference-tiny") -> tuple[ArchitectureSpec, int]:
    ref = resources.files("litetune").joinpath(f"fixtures/{name}.json")
    return arch_from_json(json.loads(ref.read_text()))


def space_to_json(space: ElasticSpace, n_classes: int) -> dict:
    return {
        "version": SPACE_VERSION,
        "stem": {"out_ch": space.stem_channels},
        "stages": [
            {"out_ch": s.out_channels, "stride": s.stride, "lite_downsample": s.lite_downsample}
            for s in space.stages
        ],
        "head": {"n_classes": n_classes},
        "elastic": {
            "depths": list(space.depths),
            "kernels": list(space.kernels),
            "expands": list(space.expands),
            "lite_groups": list(space.lite_groups),
            "lite_kernels": list(space.lite_kernels),
            "resolutions": list(space.resolutions),
        },
    }


def space_from_json(doc: dict) -> tuple[ElasticSpace, int]:
    if _need(doc, "version", "space") != SPACE_VERSION:
        raise SpecFileError(f"space.version: expected {SPACE_VERSION}, got {doc['version']}")
    stages = []
    for si, st in enumerate(_need(doc, "stages", "space")):
        where = f"stages[{si}]"
        stages.append(
            StageLayout(
                out_channels=_need(st, "out_ch", where),
                stride=_need(st, "stride", where),
                lite_downsample=st.get("lite_downsample", 2),
            )
        )
    el = _need(doc, "elastic", "space")
    try:
        space = ElasticSpace(
            stem_channels=_need(_need(doc, "stem", "space"), "out_ch", "space.stem"),
            stages=tuple(stages),
            depths=tuple(_need(el, "depths", "space.elastic")),
            kernels=tuple(_need(el, "kernels", "space.elastic")),
            expands=tuple(_need(el, "expands", "space.elastic")),
            lite_groups=tuple(_need(el, "lite_groups", "space.elastic")),
            lite_kernels=tuple(_need(el, "lite_kernels", "space.elastic")),
            resolutions=tuple(_need(el, "resolutions", "space.elastic")),
        )
    except ValueError as exc:
        raise SpecFileError(f"space: {exc}") from exc
    return space, _need(_need(doc, "head", "space"), "n_classes", "space.head")


def load_space(path) -> tuple[ElasticSpace, int]:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise SpecFileError(f"{path}: not valid JSON ({exc})") from exc
    return space_from_json(doc)


def save_space(space: ElasticSpace, n_classes: int, path) -> None:
    with open(path, "w") as f:
        json.dump(space_to_json(space, n_classes), f, indent=2)
        f.write("\n")


def config_to_json(cfg: SubNetConfig) -> dict:
    return {
        "depths": list(cfg.depths),
        "blocks": [
            [
                {
                    "kernel": b.kernel,
                    "expand": b.expand,
                    "lite_groups": b.lite_groups,
                    "lite_kernel": b.lite_kernel,
                }
                for b in stage
            ]
            for stage in cfg.blocks
        ],
        "resolution": cfg.resolution,
    }


def config_from_json(doc: dict) -> SubNetConfig:
    blocks = tuple(
        tuple(
            BlockChoice(
                kernel=_need(b, "kernel", f"blocks[{si}][{bi}]"),
                expand=_need(b, "expand", f"blocks[{si}][{bi}]"),
                lite_groups=_need(b, "lite_groups", f"blocks[{si}][{bi}]"),
                lite_kernel=_need(b, "lite_kernel", f"blocks[{si}][{bi}]"),
            )
            for bi, b in enumerate(stage)
        )
        for si, stage in enumerate(_need(doc, "blocks", "config"))
    )
    return SubNetConfig(
        depths=tuple(_need(doc, "depths", "config")),
        blocks=blocks,
        resolution=_need(doc, "resolution", "config"),
    )


# ---------------------------------------------------------------------------
# reports

MEMORY_CSV_COLUMNS = [
    "name",
    "kind",
    "saved_activation_bytes",
    "frozen_param_bytes",
    "trainable_param_bytes",
    "optimizer_state_bytes",
    "mac",
]

SWEEP_CSV_COLUMNS = [
    "policy",
    "batch",
    "resolution",
    "saved_activation_bytes",
    "frozen_param_bytes",
    "trainable_param_bytes",
    "optimizer_state_bytes",
    "headline_bytes",
    "headline_mb",
]


def emit_report(report, format: str, path) -> None:
    """Write a MemoryReport / CostReport / TrainReport, or a plain dict
    already shaped like one, as JSON or CSV."""
    doc = report.to_dict() if hasattr(report, "to_dict") else dict(report)
    if format == "json":
        with open(path, "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
        return
    if format != "csv":
        raise ValueError(f"unknown report format {format!r}")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        if doc.get("schema") == "memory-report/1":
            writer.writerow(MEMORY_CSV_COLUMNS)
            for row in doc["layers"]:
                writer.writerow([row[c] for c in MEMORY_CSV_COLUMNS])
        elif doc.get("schema") == "train-report/1":
            writer.writerow(["step", "loss"])
            for i, loss in enumerate(doc["loss_curve"]):
                writer.writerow([i, loss])
        elif doc.get("schema") == "cost-report/1":
            writer.writerow(["phase", "mac"])
            writer.writerow(["inference", doc["inference_mac"]])
            writer.writerow(["training", doc["training_mac"]])
            for name, info in doc.get("phases", {}).items():
                writer.writerow([name, info["mac"]])
        elif doc.get("schema") == "sweep-report/1":
            writer.writerow(SWEEP_CSV_COLUMNS)
            for row in doc["rows"]:
                writer.writerow([row[c] for c in SWEEP_CSV_COLUMNS])
        else:
            keys = sorted(doc)
            writer.writerow(keys)
            writer.writerow([doc[k] for k in keys])


def parse_report(path) -> dict:
    with open(path) as f:
        return json.load(f)
