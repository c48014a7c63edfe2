"""Separable mixture-of-LoRA adapters with a continual-tuning simulator."""

from .benchmark import TaskInstance, TaskSpec, format_check, generate_stream
from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    MetricUndefinedError,
    ShapeError,
    StageError,
    UsageError,
)
from .harness import RunConfig, ToyModel, evaluate_task, run_cvit, train_stage
from .lora import (
    LoRABlock,
    MoLoRALayer,
    SMoLoRALayer,
    adaptive_fusion,
    init_molora,
    init_smolora,
    lora_apply,
    molora_forward,
    smolora_forward,
)
from .metrics import AccuracyMatrix, MetricReport, ap, bwt, compute_report, mean_ap, mif
from .routing import (
    HashingEmbedder,
    RoutingTrace,
    embed_text,
    route_instance,
    route_instruction,
    routing_histogram,
)
from .tensor import (
    SENTINEL,
    CosineSchedule,
    Matrix,
    Tape,
    backward,
    matmul,
    mean_over_columns,
    sgd_step,
    softmax_columns,
    topk_mask,
)

__version__ = "0.1.0"
