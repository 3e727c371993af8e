"""Command-line front end: gen-data, pretrain, finetune, eval, bench, serve, compare."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .adapters import LoraConfig
from .backbone import Backbone, BackboneConfig, load_backbone, save_backbone, tokenize
from .data import load_jsonl, split_dataset
from .errors import ScoreMuxError
from .evalkit import evaluate, paired_t_test
from .numerics import P32, P64, Precision
from .orchestrator import (
    Registry,
    StdioTransport,
    TcpTransport,
    load_registry_manifest,
    load_task_module,
    save_task_module,
    serve,
)
from .trainer import TrainConfig, pretrain_backbone, train_task
from .workbench import (
    TaskSpec,
    accuracy_gap_comparison,
    default_specs,
    generate_tasks,
    run_benchmark,
)


def _precision(args) -> Precision:
    return P64 if args.precision == 64 else P32


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        warmup_fraction=args.warmup,
        clip_norm=args.clip_norm,
        reg_lambda=args.reg_lambda,
        seed=seed,
    )


def _add_train_flags(p: argparse.ArgumentParser, default_lr: float = 5e-5) -> None:
    p.add_argument("--lr", type=float, default=default_lr, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--warmup", type=float, default=0.10, help="warmup fraction of total steps")
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--reg-lambda", type=float, default=1e-4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scoremux",
        description="Multi-task scoring: one frozen backbone, per-task low-rank modules.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--precision", type=int, choices=(32, 64), default=32)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate synthetic task datasets")
    p.add_argument("--spec", help="JSON file with a list of task specs")
    p.add_argument("--tasks", type=int, default=27)
    p.add_argument("--items", type=int, default=1000)
    p.add_argument("--out", required=True, help="output directory for JSONL files + manifest")

    p = sub.add_parser("pretrain", parents=[common], help="MLM-pretrain and freeze a backbone")
    p.add_argument("--corpus", help="text file, one document per line (omit to skip MLM)")
    p.add_argument("--out", required=True, help="backbone checkpoint path")
    p.add_argument("--mlm-epochs", type=int, default=1)
    _add_train_flags(p)
    p.add_argument("--vocab-size", type=int, default=1000)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--max-seq-len", type=int, default=64)

    p = sub.add_parser("finetune", parents=[common], help="train one task module")
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True, help="task JSONL file")
    p.add_argument("--out", required=True, help="task-module output path")
    p.add_argument("--report", help="write the training report here")
    _add_train_flags(p)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--alpha", type=float, default=16.0)

    p = sub.add_parser("eval", parents=[common], help="evaluate a module on the test split")
    p.add_argument("--backbone", required=True)
    p.add_argument("--module", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="eval-report JSON path (default: stdout)")

    p = sub.add_parser("bench", parents=[common], help="memory/latency benchmark")
    p.add_argument("--backbone", required=True)
    p.add_argument("--modules", required=True, help="directory of .mod files")
    p.add_argument("--out", help="bench-report JSON path (default: stdout)")
    p.add_argument("--capacity", type=int, default=4)
    p.add_argument("--switches", type=int, default=110)
    p.add_argument("--requests", type=int, default=200)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument(
        "--accuracy-baselines", type=int, default=0, metavar="N",
        help="also train N real full-model baselines and report the QWK gap (needs --data)",
    )
    p.add_argument("--data", help="dataset directory for --accuracy-baselines")

    p = sub.add_parser("serve", parents=[common], help="serve scoring requests")
    p.add_argument("--backbone", required=True)
    p.add_argument("--manifest", required=True, help="JSON map of task_id -> module path")
    p.add_argument("--capacity", type=int, default=4)
    p.add_argument("--tcp", type=int, help="listen on this TCP port instead of stdio")

    p = sub.add_parser("compare", parents=[common], help="paired t-test over two QWK vectors")
    p.add_argument("--a", required=True, help="JSON array file")
    p.add_argument("--b", required=True, help="JSON array file")
    return parser


def cmd_gen_data(args) -> int:
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        specs = [TaskSpec(**entry) for entry in raw]
    else:
        specs = default_specs(n_tasks=args.tasks, n_items=args.items, seed=args.seed)
    datasets, manifest = generate_tasks(specs, out_dir=args.out)
    print(f"wrote {len(datasets)} task files + manifest.json to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    config = BackboneConfig(
        vocab_size=args.vocab_size,
        d_model=args.d_model,
        n_layers=args.layers,
        n_heads=args.heads,
        d_ff=args.d_ff,
        max_seq_len=args.max_seq_len,
        seed=args.seed,
    )
    bb = Backbone(config, _precision(args))
    if args.corpus:
        with open(args.corpus, "r", encoding="utf-8") as fh:
            sequences = [tokenize(line.strip(), config) for line in fh if line.strip()]
        losses = pretrain_backbone(bb, sequences, _train_config(args, args.seed), epochs=args.mlm_epochs)
        print(f"mlm steps={len(losses)} first_loss={losses[0]:.4f} last_loss={losses[-1]:.4f}")
    bb.freeze()
    save_backbone(bb, args.out)
    print(f"frozen backbone -> {args.out} (fingerprint {bb.frozen_fingerprint[:12]}...)")
    return 0


def cmd_finetune(args) -> int:
    bb = load_backbone(args.backbone)
    dataset = load_jsonl(args.data)
    module, report = train_task(
        bb, dataset, _train_config(args, args.seed), LoraConfig(rank=args.rank, alpha=args.alpha)
    )
    save_task_module(module, args.out)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.to_text())
    best = report.epochs[report.best_epoch - 1]
    print(
        f"{module.task_id}: stopped_epoch={report.stopped_epoch} best_epoch={report.best_epoch} "
        f"val_loss={best.val_loss:.4f} val_qwk={best.val_qwk:.4f} -> {args.out}"
    )
    return 0


def cmd_eval(args) -> int:
    bb = load_backbone(args.backbone)
    dataset = load_jsonl(args.data)
    split_dataset(dataset, args.seed)
    module = load_task_module(args.module, _precision(args))
    registry = Registry(capacity=1, precision=_precision(args))
    registry.register(module.task_id, args.module)
    report = evaluate(registry, bb, module.task_id, dataset.splits.test)
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"{report.task_id}: qwk={report.qwk:.4f} accuracy={report.accuracy:.4f} -> {args.out}")
    else:
        print(text)
    return 0


def cmd_bench(args) -> int:
    bb = load_backbone(args.backbone)
    module_paths = {}
    for name in sorted(os.listdir(args.modules)):
        if name.endswith(".mod"):
            path = os.path.join(args.modules, name)
            module_paths[load_task_module(path).task_id] = path
    if not module_paths:
        print("bench: no .mod files found", file=sys.stderr)
        return 1
    task_ids = sorted(module_paths)
    workload = [
        (task_ids[i % len(task_ids)], f"synthetische antwort nummer {i}") for i in range(args.requests)
    ]
    report = run_benchmark(
        bb,
        module_paths,
        backbone_checkpoint=args.backbone,
        workload=workload,
        capacity=args.capacity,
        switches=args.switches,
        threads=args.threads,
    )
    if args.accuracy_baselines > 0:
        if not args.data:
            print("bench: --accuracy-baselines requires --data", file=sys.stderr)
            return 1
        datasets = {
            tid: load_jsonl(os.path.join(args.data, f"{tid}.jsonl")) for tid in task_ids
        }
        report.accuracy_gap = accuracy_gap_comparison(
            bb, module_paths, datasets, args.accuracy_baselines,
            TrainConfig(learning_rate=5e-3, seed=args.seed),
        )
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(
            f"memory_reduction={report.memory_reduction_fraction:.3f} "
            f"latency_reduction={report.latency_reduction_fraction:.3f} -> {args.out}"
        )
    else:
        print(text)
    return 0


def cmd_serve(args) -> int:
    bb = load_backbone(args.backbone)
    registry = load_registry_manifest(args.manifest, capacity=args.capacity, precision=_precision(args))
    if args.tcp is not None:
        transport = TcpTransport(port=args.tcp)
        print(f"listening on tcp {transport.host}:{transport.port}", file=sys.stderr)
    else:
        transport = StdioTransport(sys.stdin, sys.stdout)
    serve(registry, bb, transport)
    return 0


def cmd_compare(args) -> int:
    vectors = []
    for path in (args.a, args.b):
        with open(path, "r", encoding="utf-8") as fh:
            vec = json.load(fh)
        if not isinstance(vec, list) or not all(isinstance(x, (int, float)) for x in vec):
            print(f"compare: {path} must hold a JSON array of numbers", file=sys.stderr)
            return 1
        vectors.append([float(x) for x in vec])
    t, p = paired_t_test(vectors[0], vectors[1])
    t_out = t if abs(t) != float("inf") else ("inf" if t > 0 else "-inf")
    print(json.dumps({"t": t_out, "p": p, "n": len(vectors[0]), "significant_at_0.05": p < 0.05}))
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "serve": cmd_serve,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ScoreMuxError, OSError, json.JSONDecodeError) as exc:
        print(f"scoremux {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
