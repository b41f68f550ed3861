"""litetune: fine-tuning under a memory budget.

The package splits into a taped numpy autograd core (autograd, layers),
model assembly (blocks, policies), analytic cost accounting (memory),
optimization (training), elastic architecture search (search), and the
file/CLI surface (data, fileio, plots, cli).
"""

from .autograd import Parameter, StorageClass, Tape, Tensor, backward_pass, finite_diff_check
from .blocks import (
    ArchitectureSpec,
    LiteResidualSpec,
    MBBlockSpec,
    Model,
    build_backbone,
    capture_norm_stats,
)
from .data import Dataset, SynthSpec, load_dataset, resize_batch, save_dataset, synth_dataset
from .fileio import (
    SpecFileError,
    arch_from_json,
    arch_to_json,
    bundled_arch,
    config_from_json,
    config_to_json,
    emit_report,
    load_arch_file,
    load_space,
    parse_report,
    save_arch,
    save_space,
    space_from_json,
    space_to_json,
)
from .memory import (
    CostReport,
    MemoryReport,
    cost_report,
    lite_overhead_ratio,
    mac_count,
    model_footprint,
    quantize8,
    quantize_frozen_weights,
)
from .policies import POLICIES, apply_policy
from .search import (
    AccuracyPredictor,
    BlockChoice,
    ElasticSpace,
    PipelineConfig,
    SearchConfig,
    StageLayout,
    SubNetConfig,
    adapt_pipeline,
    build_supernet,
    collect_pairs,
    encode_arch,
    evolve,
    predictor_train,
    sample_subnet,
    subnet_extract,
)
from .training import (
    AdamState,
    MemoryMismatch,
    NumericsError,
    TrainConfig,
    TrainReport,
    evaluate,
    gradient_check,
    train,
)

__version__ = "0.1.0"
