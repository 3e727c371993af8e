"""Synthetic task generator statistics and the efficiency benchmark."""

from __future__ import annotations

import json

import numpy as np
import pytest

from scoremux.backbone import Backbone, BackboneConfig, save_backbone
from scoremux.data import load_jsonl
from scoremux.errors import BenchError, ContractError
from scoremux.heads import new_head
from scoremux.numerics import Rng
from scoremux.orchestrator import ModuleMetadata, TaskModule, save_task_module
from scoremux.adapters import new_adapter
from scoremux.trainer import TrainConfig
from scoremux.workbench import (
    TaskSpec,
    default_specs,
    generate_task,
    generate_tasks,
    keyword_count_classify,
    keyword_pools,
    run_benchmark,
    train_full_baseline,
)

CFG = BackboneConfig(seed=5)


class TestTaskSpec:
    def test_validation(self):
        with pytest.raises(ContractError):
            TaskSpec("T", num_classes=1)
        with pytest.raises(ContractError):
            TaskSpec("T", num_classes=7)
        with pytest.raises(ContractError):
            TaskSpec("T", num_classes=4, n_items=39)
        with pytest.raises(ContractError):
            TaskSpec("T", difficulty="extreme")

    def test_default_specs_shape(self):
        specs = default_specs()
        assert len(specs) == 27
        assert len({s.task_id for s in specs}) == 27
        assert {s.difficulty for s in specs} == {"easy", "medium"}
        assert {s.num_classes for s in specs} == {2, 3, 4, 5, 6}


@pytest.fixture(scope="module")
def easy():
    return TaskSpec("T00", num_classes=3, n_items=600, difficulty="easy", seed=3)


class TestGenerator:

    def test_mean_length_in_band(self, easy):
        ds = generate_task(easy)
        lengths = [len(it.text.split()) for it in ds.items]
        assert 18 <= np.mean(lengths) <= 22
        assert min(lengths) >= 3

    def test_labels_balanced_and_complete(self, easy):
        ds = generate_task(easy)
        counts = np.bincount([it.score for it in ds.items], minlength=3)
        assert (counts > 0).all()
        target = easy.n_items / easy.num_classes
        assert np.abs(counts - target).max() <= 0.10 * target

    def test_easy_task_linearly_separable_by_keyword_counts(self, easy):
        ds = generate_task(easy)
        pools, _ = keyword_pools(easy)
        acc = np.mean([keyword_count_classify(it.text, pools) == it.score for it in ds.items])
        assert acc >= 0.95

    def test_medium_has_label_noise_but_stays_learnable(self):
        spec = TaskSpec("T01", num_classes=3, n_items=600, difficulty="medium", seed=3)
        ds = generate_task(spec)
        pools, _ = keyword_pools(spec)
        acc = np.mean([keyword_count_classify(it.text, pools) == it.score for it in ds.items])
        assert 0.85 <= acc < 1.0

    def test_texts_unique(self, easy):
        ds = generate_task(easy)
        assert len({it.text for it in ds.items}) == len(ds.items)

    def test_deterministic_per_seed(self, easy):
        a = generate_task(easy)
        b = generate_task(easy)
        assert [(i.text, i.score) for i in a.items] == [(i.text, i.score) for i in b.items]
        c = generate_task(TaskSpec("T00", num_classes=3, n_items=600, difficulty="easy", seed=4))
        assert [(i.text, i.score) for i in a.items] != [(i.text, i.score) for i in c.items]

    def test_generate_tasks_writes_files_and_manifest(self, tmp_path):
        specs = default_specs(n_tasks=27, n_items=60, seed=1)
        datasets, manifest = generate_tasks(specs, out_dir=str(tmp_path))
        assert len(datasets) == 27
        assert len(manifest["tasks"]) == 27
        assert sorted(e["id"] for e in manifest["tasks"]) == sorted(s.task_id for s in specs)
        files = {p.name for p in tmp_path.iterdir()}
        assert "manifest.json" in files and "T00.jsonl" in files and len(files) == 28
        with open(tmp_path / "T03.jsonl", encoding="utf-8") as fh:
            rec = json.loads(fh.readline())
        assert set(rec) == {"task", "text", "score"}
        loaded = load_jsonl(str(tmp_path / "T03.jsonl"))
        assert loaded.task_id == "T03"
        assert len(loaded.items) == 60

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ContractError, match="duplicate"):
            generate_tasks([TaskSpec("T", seed=1, n_items=60), TaskSpec("T", seed=2, n_items=60)])


def build_bench_env(tmp_path, n_tasks=5):
    bb = Backbone(CFG).freeze()
    ckpt = tmp_path / "bb.bin"
    save_backbone(bb, str(ckpt))
    paths = {}
    for i in range(n_tasks):
        tid = f"T{i:02d}"
        module = TaskModule(
            task_id=tid,
            adapter=new_adapter(tid, CFG, rng=Rng(i)),
            head=new_head(tid, 2 + i % 5, CFG.d_model, Rng(i)),
            metadata=ModuleMetadata(2 + i % 5, 0, bb.frozen_fingerprint),
        )
        path = tmp_path / f"{tid}.mod"
        save_task_module(module, str(path))
        paths[tid] = str(path)
    return bb, str(ckpt), paths


class TestBenchmark:
    def test_byte_totals_exactly_shape_derived(self, tmp_path):
        bb, ckpt, paths = build_bench_env(tmp_path)
        report = run_benchmark(bb, paths, ckpt, workload=None, switches=12, warmup_discard=2)
        backbone_params = bb.param_count(include_mlm_head=False)
        assert backbone_params == 135_040
        assert report.backbone_param_bytes == backbone_params * 4
        for i, tid in enumerate(sorted(paths)):
            c = 2 + i % 5
            expected = (4 * 1024 + c * 64 + c) * 4
            assert report.module_bytes[i] == expected
            assert report.module_bytes[i] / (report.backbone_param_bytes + (c * 64 + c) * 4) <= 0.05
        assert report.framework_total_bytes == report.backbone_param_bytes + sum(report.module_bytes)
        heads = [(2 + i % 5) * 65 * 4 for i in range(5)]
        assert report.baseline_total_bytes == sum(report.backbone_param_bytes + h for h in heads)
        assert 0 <= report.memory_reduction_fraction < 1

    def test_switch_latency_framework_beats_baseline(self, tmp_path):
        bb, ckpt, paths = build_bench_env(tmp_path)
        report = run_benchmark(bb, paths, ckpt, workload=None, switches=40, warmup_discard=5)
        assert report.framework_switch_us["median_us"] < report.baseline_switch_us["median_us"]
        assert report.latency_reduction_fraction > 0

    def test_workload_replay_conserves_requests(self, tmp_path):
        bb, ckpt, paths = build_bench_env(tmp_path)
        tasks = sorted(paths)
        workload = [(tasks[i % len(tasks)], f"text {i}") for i in range(40)]
        report = run_benchmark(bb, paths, ckpt, workload=workload, capacity=2, switches=12, warmup_discard=2)
        w = report.workload
        assert w["responses"] == w["requests"] == 40
        assert w["hits"] + w["misses"] == 40
        assert w["evictions"] == max(0, w["loads"] - 2)

    def test_threaded_workload(self, tmp_path):
        bb, ckpt, paths = build_bench_env(tmp_path, n_tasks=4)
        tasks = sorted(paths)
        workload = [(tasks[i % 4], f"text {i}") for i in range(24)]
        report = run_benchmark(
            bb, paths, ckpt, workload=workload, capacity=2, switches=12, warmup_discard=2, threads=4
        )
        assert report.workload["hits"] + report.workload["misses"] == 24

    def test_missing_module_named_in_error(self, tmp_path):
        bb, ckpt, paths = build_bench_env(tmp_path)
        paths["T99"] = str(tmp_path / "nope.mod")
        with pytest.raises(BenchError, match="T99"):
            run_benchmark(bb, paths, ckpt, switches=12, warmup_discard=2)

    def test_report_json_key_order(self, tmp_path):
        bb, ckpt, paths = build_bench_env(tmp_path, n_tasks=3)
        report = run_benchmark(bb, paths, ckpt, switches=12, warmup_discard=2)
        doc = json.loads(report.to_json())
        assert list(doc) == [
            "backbone_param_bytes",
            "module_bytes",
            "baseline_total_bytes",
            "framework_total_bytes",
            "capacity",
            "framework_switch_us",
            "baseline_switch_us",
            "memory_reduction_fraction",
            "latency_reduction_fraction",
            "workload",
            "accuracy_gap",
        ]


class TestFullBaseline:
    def test_trains_and_scores_tiny_task(self):
        cfg = BackboneConfig(vocab_size=150, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=32, seed=2)
        bb = Backbone(cfg).freeze()
        ds = generate_task(TaskSpec("T00", num_classes=2, n_items=60, difficulty="easy", seed=6))
        head, test_qwk = train_full_baseline(
            bb, ds, TrainConfig(learning_rate=5e-3, batch_size=16, max_epochs=2, seed=3)
        )
        assert head.num_classes == 2
        assert -1.0 <= test_qwk <= 1.0
        # the original frozen backbone must be untouched by baseline training
        assert bb.fingerprint() == bb.frozen_fingerprint

    def test_accuracy_gap_comparison_pairs_qwk_vectors(self, tmp_path):
        from scoremux.workbench import accuracy_gap_comparison

        cfg = BackboneConfig(vocab_size=150, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=32, seed=2)
        bb = Backbone(cfg).freeze()
        paths = {}
        datasets = {}
        for i in range(2):
            tid = f"T{i:02d}"
            ds = generate_task(TaskSpec(tid, num_classes=2, n_items=60, difficulty="easy", seed=6 + i))
            datasets[tid] = ds
            module = TaskModule(
                task_id=tid,
                adapter=new_adapter(tid, cfg, rng=Rng(i)),
                head=new_head(tid, 2, cfg.d_model, Rng(i)),
                metadata=ModuleMetadata(2, 0, bb.frozen_fingerprint),
            )
            path = tmp_path / f"{tid}.mod"
            save_task_module(module, str(path))
            paths[tid] = str(path)
        gap = accuracy_gap_comparison(
            bb, paths, datasets, n_tasks=2,
            config=TrainConfig(learning_rate=5e-3, batch_size=16, max_epochs=2, seed=3),
        )
        assert gap["tasks"] == ["T00", "T01"]
        assert len(gap["framework_qwk"]) == len(gap["baseline_qwk"]) == 2
        assert "p" in gap and 0.0 <= gap["p"] <= 1.0
