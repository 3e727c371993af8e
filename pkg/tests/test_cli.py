"""End-to-end CLI flows over a tiny configuration."""

from __future__ import annotations

import io
import json

import pytest

from scoremux.backbone import load_backbone
from scoremux.cli import main
from scoremux.orchestrator import load_task_module

TINY_BACKBONE = [
    "--vocab-size", "200", "--d-model", "16", "--layers", "1",
    "--heads", "2", "--d-ff", "32", "--max-seq-len", "48",
]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """gen-data + pretrain + finetune once; later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--tasks", "3", "--items", "120", "--seed", "4", "--out", str(data)]) == 0

    corpus = root / "corpus.txt"
    lines = []
    for name in ("T00", "T01", "T02"):
        with open(data / f"{name}.jsonl", encoding="utf-8") as fh:
            lines += [json.loads(l)["text"] for l in fh][:20]
    corpus.write_text("\n".join(lines), encoding="utf-8")

    bb_path = root / "backbone.bin"
    assert main([
        "pretrain", "--corpus", str(corpus), "--out", str(bb_path),
        "--mlm-epochs", "1", "--lr", "1e-4", "--batch-size", "16", "--seed", "4", *TINY_BACKBONE,
    ]) == 0

    mod_dir = root / "modules"
    mod_dir.mkdir()
    for name in ("T00", "T01", "T02"):
        assert main([
            "finetune", "--backbone", str(bb_path), "--data", str(data / f"{name}.jsonl"),
            "--out", str(mod_dir / f"{name}.mod"), "--report", str(root / f"{name}.report.txt"),
            "--lr", "1e-2", "--batch-size", "8", "--epochs", "5", "--seed", "4",
        ]) == 0
    return root


class TestGenData:
    def test_writes_files(self, workdir):
        files = {p.name for p in (workdir / "data").iterdir()}
        assert files == {"T00.jsonl", "T01.jsonl", "T02.jsonl", "manifest.json"}
        manifest = json.loads((workdir / "data" / "manifest.json").read_text())
        assert [e["id"] for e in manifest["tasks"]] == ["T00", "T01", "T02"]

    def test_spec_file_input(self, tmp_path):
        spec = tmp_path / "specs.json"
        spec.write_text(json.dumps([
            {"task_id": "A1", "num_classes": 2, "n_items": 30, "difficulty": "easy", "seed": 1},
        ]))
        assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "out")]) == 0
        assert (tmp_path / "out" / "A1.jsonl").exists()


class TestPretrain:
    def test_checkpoint_is_frozen_and_loadable(self, workdir):
        bb = load_backbone(str(workdir / "backbone.bin"))
        assert bb.frozen and bb.frozen_fingerprint
        assert bb.config.d_model == 16

    def test_without_corpus_gives_fresh_frozen_backbone(self, tmp_path):
        out = tmp_path / "fresh.bin"
        assert main(["pretrain", "--out", str(out), "--seed", "9", *TINY_BACKBONE]) == 0
        assert load_backbone(str(out)).frozen


class TestFinetune:
    def test_module_and_report_written(self, workdir):
        module = load_task_module(str(workdir / "modules" / "T00.mod"))
        assert module.task_id == "T00"
        report = (workdir / "T00.report.txt").read_text()
        assert "stopped_epoch:" in report and "epoch 1:" in report

    def test_module_ties_to_backbone_fingerprint(self, workdir):
        bb = load_backbone(str(workdir / "backbone.bin"))
        module = load_task_module(str(workdir / "modules" / "T01.mod"))
        assert module.metadata.backbone_fingerprint == bb.frozen_fingerprint


class TestEval:
    def test_eval_report_keys_and_learning(self, workdir, capsys):
        out = workdir / "eval_T00.json"
        assert main([
            "eval", "--backbone", str(workdir / "backbone.bin"),
            "--module", str(workdir / "modules" / "T00.mod"),
            "--data", str(workdir / "data" / "T00.jsonl"), "--seed", "4",
            "--out", str(out),
        ]) == 0
        doc = json.loads(out.read_text())
        assert list(doc) == ["task_id", "n_test", "qwk", "accuracy", "macro_f1", "confusion"]
        assert doc["task_id"] == "T00"
        assert doc["n_test"] == 12
        assert sum(sum(row) for row in doc["confusion"]) == doc["n_test"]
        assert doc["qwk"] >= 0.8  # easy task, end-to-end learning sanity

    def test_pipeline_determinism(self, workdir, tmp_path):
        # rerun the whole chain with the same seeds: byte-identical eval report
        reports = []
        for run in ("one", "two"):
            root = tmp_path / run
            data = root / "data"
            assert main(["gen-data", "--tasks", "1", "--items", "80", "--seed", "11", "--out", str(data)]) == 0
            corpus = root / "corpus.txt"
            with open(data / "T00.jsonl", encoding="utf-8") as fh:
                corpus.write_text("\n".join(json.loads(l)["text"] for l in fh), encoding="utf-8")
            bb = root / "bb.bin"
            assert main([
                "pretrain", "--corpus", str(corpus), "--out", str(bb),
                "--lr", "1e-4", "--seed", "11", *TINY_BACKBONE,
            ]) == 0
            mod = root / "T00.mod"
            assert main([
                "finetune", "--backbone", str(bb), "--data", str(data / "T00.jsonl"),
                "--out", str(mod), "--lr", "5e-3", "--epochs", "2", "--seed", "11",
            ]) == 0
            out = root / "eval.json"
            assert main([
                "eval", "--backbone", str(bb), "--module", str(mod),
                "--data", str(data / "T00.jsonl"), "--seed", "11", "--out", str(out),
            ]) == 0
            reports.append(out.read_bytes())
        assert reports[0] == reports[1]


class TestBench:
    def test_bench_report_written(self, workdir, capsys):
        out = workdir / "bench.json"
        assert main([
            "bench", "--backbone", str(workdir / "backbone.bin"),
            "--modules", str(workdir / "modules"),
            "--capacity", "2", "--switches", "15", "--requests", "30",
            "--out", str(out),
        ]) == 0
        doc = json.loads(out.read_text())
        assert doc["workload"]["responses"] == 30
        assert doc["framework_total_bytes"] < doc["baseline_total_bytes"]
        assert doc["accuracy_gap"] == {}

    def test_bench_with_accuracy_baselines(self, workdir):
        out = workdir / "bench_gap.json"
        assert main([
            "bench", "--backbone", str(workdir / "backbone.bin"),
            "--modules", str(workdir / "modules"), "--data", str(workdir / "data"),
            "--switches", "12", "--requests", "6", "--accuracy-baselines", "2",
            "--seed", "4", "--out", str(out),
        ]) == 0
        gap = json.loads(out.read_text())["accuracy_gap"]
        assert gap["tasks"] == ["T00", "T01"]
        assert len(gap["framework_qwk"]) == 2 and "p" in gap

    def test_accuracy_baselines_requires_data(self, workdir, capsys):
        assert main([
            "bench", "--backbone", str(workdir / "backbone.bin"),
            "--modules", str(workdir / "modules"),
            "--switches", "12", "--accuracy-baselines", "1",
        ]) == 1
        assert "--data" in capsys.readouterr().err


class TestServe:
    def test_stdio_one_request_one_response(self, workdir, capsys, monkeypatch):
        manifest = workdir / "registry.json"
        mapping = {f"T{i:02d}": str(workdir / "modules" / f"T{i:02d}.mod") for i in range(3)}
        manifest.write_text(json.dumps(mapping))
        request = json.dumps({"id": 7, "task": "T01", "text": "eine antwort"})
        monkeypatch.setattr("sys.stdin", io.StringIO(request + "\n"))
        assert main([
            "serve", "--backbone", str(workdir / "backbone.bin"), "--manifest", str(manifest),
        ]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("{")]
        doc = json.loads(lines[-1])
        assert doc["id"] == 7 and doc["task"] == "T01"
        assert len(doc["probs"]) >= 2


class TestCompare:
    def test_paired_t_test_output(self, tmp_path, capsys):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        a.write_text(json.dumps([0.9, 0.8, 0.85, 0.7, 0.95]))
        b.write_text(json.dumps([0.88, 0.78, 0.8, 0.71, 0.9]))
        assert main(["compare", "--a", str(a), "--b", str(b)]) == 0
        doc = json.loads(capsys.readouterr().out.strip())
        assert set(doc) == {"t", "p", "n", "significant_at_0.05"}
        assert doc["n"] == 5

    def test_non_numeric_vector_rejected(self, tmp_path, capsys):
        a = tmp_path / "a.json"
        a.write_text(json.dumps(["x"]))
        assert main(["compare", "--a", str(a), "--b", str(a)]) == 1


class TestErrors:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_file_single_line_diagnostic(self, tmp_path, capsys):
        code = main([
            "finetune", "--backbone", str(tmp_path / "none.bin"),
            "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "x.mod"),
        ])
        assert code == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("scoremux finetune:") and "\n" not in err
