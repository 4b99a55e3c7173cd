from .harness import (
    GradCheckResult,
    LoopConfig,
    TrainingDiverged,
    TrainRun,
    accuracy,
    batch_loss,
    evaluate,
    grad_check,
    train,
)
from .optim import OptimConfig, OptimizerState, adamw_step, clip_global_norm, lr_at
from .tasks import (
    Batch,
    TaskSpec,
    gen_induction_heads,
    gen_selective_copy,
    gen_seq_reverse,
    make_batch,
)

__all__ = [
    "Batch",
    "GradCheckResult",
    "LoopConfig",
    "OptimConfig",
    "OptimizerState",
    "TaskSpec",
    "TrainRun",
    "TrainingDiverged",
    "accuracy",
    "adamw_step",
    "batch_loss",
    "clip_global_norm",
    "evaluate",
    "gen_induction_heads",
    "gen_selective_copy",
    "gen_seq_reverse",
    "grad_check",
    "lr_at",
    "make_batch",
    "train",
]
