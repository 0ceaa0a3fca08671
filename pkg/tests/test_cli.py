import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from streamwatch.cli import main
from streamwatch.pipeline import REPORT_COLUMNS

TRAIN = ["--set", "model.max_epoch=40", "--set", "model.lr=0.01", "--set", "model.checkpoint_every=10"]


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert _run("gen", "--seed", 0, "--n-segments", 400, "--anomaly-rate", 0.0, "--out", d / "train.jsonl") == 0
    assert _run("gen", "--seed", 1, "--n-segments", 400, "--out", d / "calib.jsonl") == 0
    assert _run("gen", "--seed", 7, "--n-segments", 700, "--out", d / "test.jsonl") == 0
    rc = _run("train", "--data", d / "train.jsonl", "--calib", d / "calib.jsonl", "--out", d / "m.json", "--report", d / "tr.tsv", *TRAIN)
    assert rc == 0
    return d


def test_gen_deterministic(tmp_path):
    for name in ("a", "b"):
        assert _run("gen", "--seed", 7, "--n-segments", 50, "--out", tmp_path / name) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    header = json.loads((tmp_path / "a").read_text().splitlines()[0])
    assert header["seed"] == 7 and header["d1"] == 40 and header["d2"] == 11 and header["q"] == 9


def test_train_outputs(workdir):
    meta = json.loads((workdir / "m.json").read_text())["meta"]
    assert set(meta["calibration"]) == {"tau", "t1", "t2"}
    lines = (workdir / "tr.tsv").read_text().splitlines()
    assert lines[0] == "epoch\ttrain_loss\tval_loss\tselected" and len(lines) == 41
    assert sum(line.endswith("\t1") for line in lines[1:]) == 1


def test_detect_with_and_without_ados_agree(workdir):
    d = workdir
    assert _run("detect", "--model", d / "m.json", "--data", d / "test.jsonl", "--out", d / "exact.tsv") == 0
    assert _run("detect", "--model", d / "m.json", "--data", d / "test.jsonl", "--ados", "--out", d / "ados.tsv") == 0
    exact = [line.split("\t") for line in (d / "exact.tsv").read_text().splitlines()]
    ados = [line.split("\t") for line in (d / "ados.tsv").read_text().splitlines()]
    assert exact[0] == ados[0] == list(REPORT_COLUMNS)
    assert [r[4] for r in exact[1:]] == [r[4] for r in ados[1:]]
    assert {r[5] for r in ados[1:]} - {"exact"}


def test_stream_without_updates_equals_detect(workdir):
    d = workdir
    _run("detect", "--model", d / "m.json", "--data", d / "test.jsonl", "--out", d / "exact.tsv")
    assert _run("stream", "--model", d / "m.json", "--data", d / "test.jsonl", "--no-update", "--out", d / "s.tsv") == 0
    assert (d / "s.tsv").read_bytes() == (d / "exact.tsv").read_bytes()


def test_stream_with_updates_logs(workdir):
    d = workdir
    rc = _run(
        "stream", "--model", d / "m.json", "--data", d / "test.jsonl", "--history", d / "train.jsonl",
        "--log", d / "up.tsv", "--out", d / "su.tsv",
        "--set", "update.l_s=150", "--set", "update.tau_u=0.99", "--set", "update.update_epochs=3",
    )
    assert rc == 0
    log = (d / "up.tsv").read_text().splitlines()
    assert log[0] == "cycle\tsim\tretrained\twall_time_s\tbuffer_size"
    assert len(log) >= 2 and all(r.split("\t")[4] == "150" for r in log[1:])
    assert len((d / "su.tsv").read_text().splitlines()) == 700 - 9 + 1


def test_stream_needs_history(workdir):
    d = workdir
    assert _run("stream", "--model", d / "m.json", "--data", d / "test.jsonl", "--out", d / "x.tsv") == 1


def test_eval_and_curve(workdir, capsys):
    d = workdir
    _run("detect", "--model", d / "m.json", "--data", d / "test.jsonl", "--out", d / "exact.tsv")
    capsys.readouterr()
    assert _run("eval", "--report", d / "exact.tsv", "--out", d / "curve.tsv", "--figure", d / "roc.png") == 0
    out = capsys.readouterr().out.strip().split("\t")
    assert out[0] == "auroc" and 0.0 <= float(out[1]) <= 1.0
    assert (d / "curve.tsv").read_text().startswith("fpr\ttpr\tthreshold\n")
    assert (d / "roc.png").stat().st_size > 0


def test_eval_perfect_scores(tmp_path, capsys):
    rows = ["\t".join(REPORT_COLUMNS)]
    for j, (s, y) in enumerate([(0.1, 0), (0.2, 0), (0.8, 1), (0.9, 1)]):
        rows.append(f"{j}\t{s}\t0.0\t{s}\t{y}\texact\t{y}")
    (tmp_path / "r.tsv").write_text("\n".join(rows) + "\n")
    assert _run("eval", "--report", tmp_path / "r.tsv") == 0
    assert capsys.readouterr().out.strip() == "auroc\t1.0"


def test_eval_rejects_pruned_report(workdir):
    d = workdir
    _run("detect", "--model", d / "m.json", "--data", d / "test.jsonl", "--ados", "--out", d / "ados.tsv")
    assert _run("eval", "--report", d / "ados.tsv") == 1


def test_eval_with_label_file(workdir, capsys):
    d = workdir
    _run("detect", "--model", d / "m.json", "--data", d / "test.jsonl", "--out", d / "exact.tsv")
    capsys.readouterr()
    assert _run("eval", "--report", d / "exact.tsv") == 0
    a = capsys.readouterr().out
    assert _run("eval", "--report", d / "exact.tsv", "--labels", d / "test.jsonl") == 0
    assert capsys.readouterr().out == a


def test_bench_report(workdir):
    d = workdir
    rc = _run("bench", "--model", d / "m.json", "--data", d / "test.jsonl", "--out", d / "b.tsv", "--repeats", 1, "--figure", d / "b.png")
    assert rc == 0
    rows = dict(line.split("\t") for line in (d / "b.tsv").read_text().splitlines())
    assert rows.pop("metric") == "value"
    total = sum(float(rows[f"fraction.{p}"]) for p in ("L1_normal", "L1_anomaly", "group_pruned_normal", "exact"))
    assert abs(total - 1.0) < 1e-12
    assert int(rows["exact_js_calls"]) == int(rows["count.exact"])
    for key in ("exhaustive_us_mean", "exhaustive_us_p99", "ados_us_mean", "ados_us_p99", "fp"):
        assert np.isfinite(float(rows[key]))


def test_pipeline_deterministic(tmp_path):
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        _run("gen", "--seed", 3, "--n-segments", 250, "--anomaly-rate", 0.0, "--out", d / "tr.jsonl")
        _run("gen", "--seed", 4, "--n-segments", 250, "--out", d / "te.jsonl")
        _run("train", "--data", d / "tr.jsonl", "--calib", d / "te.jsonl", "--out", d / "m.json", "--report", d / "r.tsv", "--seed", 5, *TRAIN)
        _run("detect", "--model", d / "m.json", "--data", d / "te.jsonl", "--ados", "--out", d / "s.tsv")
        outs.append([(d / f).read_bytes() for f in ("tr.jsonl", "m.json", "r.tsv", "s.tsv")])
    assert outs[0] == outs[1]


def test_print_config(capsys):
    assert _run("gen", "--print-config", "--set", "model.h1=7") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["model"]["h1"] == 7 and set(doc) == {"stream", "model", "scoring", "ados", "update", "run"}


def test_exit_codes(tmp_path, workdir):
    assert _run("gen", "--set", "nope.x=1") == 1
    assert _run("detect", "--model", tmp_path / "absent.json", "--data", workdir / "test.jsonl") == 2
    (tmp_path / "bad.jsonl").write_text('{"id": 0, "f": [0.9, 0.9], "a": [0.1]}\n')
    assert _run("detect", "--model", workdir / "m.json", "--data", tmp_path / "bad.jsonl") == 1
    assert _run("detect", "--model", workdir / "m.json", "--data", tmp_path / "missing.jsonl") == 2
    (tmp_path / "trunc.json").write_text((workdir / "m.json").read_text()[:100])
    assert _run("detect", "--model", tmp_path / "trunc.json", "--data", workdir / "test.jsonl") == 2


@pytest.mark.skipif(shutil.which("streamwatch") is None, reason="console script not installed")
def test_console_script_stdin(workdir):
    d = workdir
    with open(d / "test.jsonl") as src:
        out = subprocess.run(
            ["streamwatch", "stream", "--model", str(d / "m.json"), "--no-update"],
            stdin=src, capture_output=True, text=True, check=True,
        ).stdout
    _run("detect", "--model", d / "m.json", "--data", d / "test.jsonl", "--out", d / "exact.tsv")
    assert out == (d / "exact.tsv").read_text()
    bad = subprocess.run([sys.executable, "-m", "streamwatch.cli", "eval", "--report", str(d / "nope.tsv")], capture_output=True)
    assert bad.returncode == 2
