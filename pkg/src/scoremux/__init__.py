"""Multi-task short-answer scoring over one frozen backbone with per-task low-rank adapters.

The package splits into:

- ``numerics``: dense matrices, seeded RNG, reverse-mode gradient tape
- ``backbone``: hash tokenizer, transformer encoder, MLM pretraining, checkpoints
- ``adapters``: low-rank task adapters (unmerged/merged paths, files)
- ``heads``: per-task classification heads
- ``data``: scored-response datasets, 80/10/10 splits, JSONL
- ``trainer``: Adam + warmup + clipping + early-stopping fine-tuning
- ``orchestrator``: task-module files, LRU registry, scoring, serving
- ``evalkit``: QWK / accuracy / macro-F1, paired t-test, eval reports
- ``workbench``: synthetic task generator, efficiency benchmark
- ``cli``: the ``scoremux`` command
"""

from . import errors
from .adapters import (
    AdaptedModel,
    LoraAdapter,
    LoraConfig,
    TargetKind,
    TargetPatch,
    attach,
    delta,
    load_adapter,
    merge,
    new_adapter,
    save_adapter,
    unmerge,
)
from .backbone import (
    Backbone,
    BackboneConfig,
    TokenSeq,
    encode,
    freeze,
    load_backbone,
    mlm_step,
    save_backbone,
    tokenize,
)
from .data import ScoredResponse, SplitView, TaskDataset, load_jsonl, save_jsonl, split_dataset
from .evalkit import EvalReport, accuracy, evaluate, macro_f1, paired_t_test, qwk
from .heads import ClassificationHead, head_forward, new_head, predict
from .numerics import Matrix, P32, P64, Precision, Rng, Tape, matrix
from .orchestrator import (
    Registry,
    ScoreResult,
    StdioTransport,
    TaskModule,
    TcpTransport,
    load_task_module,
    save_task_module,
    score,
    serve,
)
from .trainer import TrainConfig, TrainReport, cross_entropy, pretrain_backbone, total_loss, train_task
from .workbench import BenchReport, TaskSpec, default_specs, generate_tasks, run_benchmark

__version__ = "0.1.0"

__all__ = [
    "errors",
    # numerics
    "Matrix", "matrix", "Precision", "P32", "P64", "Rng", "Tape",
    # backbone
    "Backbone", "BackboneConfig", "TokenSeq", "tokenize", "encode", "freeze",
    "mlm_step", "save_backbone", "load_backbone",
    # adapters
    "LoraAdapter", "LoraConfig", "TargetKind", "TargetPatch", "AdaptedModel",
    "new_adapter", "delta", "attach", "merge", "unmerge", "save_adapter", "load_adapter",
    # heads
    "ClassificationHead", "new_head", "head_forward", "predict",
    # data
    "ScoredResponse", "TaskDataset", "SplitView", "split_dataset", "save_jsonl", "load_jsonl",
    # trainer
    "TrainConfig", "TrainReport", "train_task", "pretrain_backbone", "cross_entropy", "total_loss",
    # orchestrator
    "TaskModule", "Registry", "ScoreResult", "score", "serve",
    "StdioTransport", "TcpTransport", "save_task_module", "load_task_module",
    # evalkit
    "qwk", "accuracy", "macro_f1", "paired_t_test", "evaluate", "EvalReport",
    # workbench
    "TaskSpec", "BenchReport", "default_specs", "generate_tasks", "run_benchmark",
    "__version__",
]
