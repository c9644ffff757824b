import json
import subprocess
import sys

import pytest

from tcqa.cli import main
from tcqa.synthetic import bundled_dataset_path

DATA = bundled_dataset_path()


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(d, seed=0):
    """Every subcommand in dataflow order; returns the exit codes."""
    codes = [
        run("train-kge", "--triples", DATA, "--dim", 8, "--epochs", 30, "--seed", seed, "--out", d / "model.bin"),
        run("build-adjacency", "--model", d / "model.bin", "--triples", DATA, "--types", DATA / "types.tsv",
            "--out", d / "matrix.bin"),
        run("gen-queries", "--triples", DATA, "--split", "train", "--structures", "2i,3i,2in,3in",
            "--count", 20, "--seed", seed, "--out", d / "train.jsonl"),
        run("gen-queries", "--triples", DATA, "--count", 5, "--seed", seed + 1, "--out", d / "test.jsonl"),
        run("train-adapter", "--matrix", d / "matrix.bin", "--queries", d / "train.jsonl", "--triples", DATA,
            "--types", DATA / "types.tsv", "--epochs", 3, "--seed", seed, "--threads", 1, "--out", d / "params.bin"),
        run("evaluate", "--matrix", d / "matrix.bin", "--params", d / "params.bin", "--queries", d / "test.jsonl",
            "--triples", DATA, "--types", DATA / "types.tsv", "--threads", 1, "--report", d / "report"),
    ]
    return codes


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipeline")
    assert pipeline(d) == [0] * 6
    return d


def test_pipeline_outputs(artifacts):
    for name in ("model.bin", "matrix.bin", "train.jsonl", "test.jsonl", "params.bin", "report.tsv", "report.json"):
        assert (artifacts / name).stat().st_size > 0
    report = json.loads((artifacts / "report.json").read_text())
    assert report["per_structure"]
    for m in report["per_structure"].values():
        assert all(0 <= v <= 1 for v in m.values())


def test_reruns_are_byte_identical(artifacts, tmp_path):
    assert pipeline(tmp_path) == [0] * 6
    for name in ("model.bin", "matrix.bin", "train.jsonl", "test.jsonl", "params.bin", "report.tsv", "report.json"):
        assert (tmp_path / name).read_bytes() == (artifacts / name).read_bytes(), name


def test_answer_trace_shows_witnesses(artifacts, tmp_path, capsys):
    q = next(line for line in (artifacts / "test.jsonl").read_text().splitlines()
             if json.loads(line)["label"] == "2p")
    (tmp_path / "q.jsonl").write_text(q + "\n")
    capsys.readouterr()
    assert run("answer", "--matrix", artifacts / "matrix.bin", "--params", artifacts / "params.bin",
               "--query", tmp_path / "q.jsonl", "--triples", DATA, "--topk", 3, "--trace") == 0
    rec = json.loads(capsys.readouterr().out.strip())
    assert len(rec["answers"]) == 3
    top = rec["answers"][0]["entity"]
    hops = rec["witnesses"][top]
    assert len(hops) == 2
    assert hops[0]["target"] == top and hops[0]["source"] == hops[1]["target"]


def test_train_kge_prints_loss_tsv(tmp_path, capsys):
    assert run("train-kge", "--triples", DATA, "--dim", 4, "--epochs", 2, "--out", tmp_path / "m.bin") == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split("\t")[0] for line in lines] == ["0", "1"]


def test_evaluate_without_queries_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run("evaluate", "--matrix", "m.bin", "--triples", DATA)
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["build-adjacency", "--model", "x", "--triples", DATA, "--delta", "0.7", "--out", "y"],
    ["gen-queries", "--triples", DATA, "--structures", "9p", "--out", "y"],
])
def test_bad_flag_values(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        run(*argv)
    assert exc.value.code == 2


def test_missing_file_exits_one(tmp_path, capsys):
    code = run("build-adjacency", "--model", tmp_path / "absent.bin", "--triples", DATA, "--out", tmp_path / "m")
    assert code == 1
    assert "absent.bin" in capsys.readouterr().err


def test_params_from_other_matrix_rejected(artifacts, tmp_path, capsys):
    assert run("train-kge", "--triples", DATA, "--dim", 4, "--epochs", 1, "--out", tmp_path / "m.bin") == 0
    assert run("build-adjacency", "--model", tmp_path / "m.bin", "--triples", DATA, "--no-type-skip",
               "--out", tmp_path / "full.bin") == 0
    code = run("evaluate", "--matrix", tmp_path / "full.bin", "--params", artifacts / "params.bin",
               "--queries", artifacts / "test.jsonl", "--triples", DATA)
    assert code == 1


def test_help_per_subcommand():
    for cmd in ("train-kge", "build-adjacency", "gen-queries", "train-adapter", "answer", "evaluate"):
        out = subprocess.run([sys.executable, "-m", "tcqa.cli", cmd, "--help"], capture_output=True, text=True)
        assert out.returncode == 0 and "--threads" in out.stdout
