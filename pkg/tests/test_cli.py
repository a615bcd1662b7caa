import csv
import json
import os

import pytest

from lreidpy import __main__ as cli
from lreidpy.trainer import Trainer


def _run(tiny_config_file, out, *extra, **config):
    return cli.main(["run", "--config", tiny_config_file(**config), "--out", str(out)] + list(extra))


def test_run_writes_all_artifacts(tiny_config_file, tmp_path):
    out = tmp_path / "aka"
    assert _run(tiny_config_file, out, "--seed", "4") == cli.EXIT_OK

    for name in ("config.json", "metrics.csv", "losses.csv", "step_1.ckpt", "step_2.ckpt", "forgetting.png"):
        assert (out / name).exists(), name
    assert json.load(open(str(out / "config.json")))["seed"] == 4
    with open(str(out / "metrics.csv")) as stream:
        rows = list(csv.DictReader(stream))
    assert [row["domain"] for row in rows[-2:]] == ["s_bar", "u_bar"]


def test_run_honours_the_output_root(tiny_config_file, tmp_path, monkeypatch):
    monkeypatch.setenv("LREIDPY_OUTPUT_ROOT", str(tmp_path / "root"))
    assert cli.main(["run", "--config", tiny_config_file(), "--out", "nested", "--method", "lwf"]) == cli.EXIT_OK
    assert (tmp_path / "root" / "nested" / "metrics.csv").exists()


def test_run_usage_errors(tiny_config_file, tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_USAGE
    assert _run(tiny_config_file, tmp_path / "x", "--set", "train.epochz=2") == cli.EXIT_USAGE
    assert _run(tiny_config_file, tmp_path / "y", "--order", "order-2") == cli.EXIT_USAGE


def test_run_with_missing_dataset_folder(tiny_config_file, tmp_path):
    stream = {"kind": "directory", "paths": [str(tmp_path / "nowhere")]}
    assert _run(tiny_config_file, tmp_path / "z", stream=stream) == cli.EXIT_USAGE


def test_runtime_failures_exit_with_one(tiny_config_file, tmp_path, monkeypatch):
    def explode(*args, **kwargs):
        raise RuntimeError("out of memory")

    monkeypatch.setattr(Trainer, "run_stream", explode)
    assert _run(tiny_config_file, tmp_path / "boom") == cli.EXIT_FAILURE


def test_resume_from_checkpoint(tiny_config_file, tmp_path):
    first = tmp_path / "first"
    assert _run(tiny_config_file, first) == cli.EXIT_OK
    resumed = tmp_path / "resumed"
    checkpoint = str(first / "step_1.ckpt")
    assert _run(tiny_config_file, resumed, "--set", "resume_from=%s" % checkpoint) == cli.EXIT_OK
    with open(str(resumed / "metrics.csv")) as stream:
        steps = set(row["step"] for row in csv.DictReader(stream))
    assert steps == {"2", "final"}


def test_compare_runs(tiny_config_file, tmp_path, capsys):
    runs = []
    for method in ("lwf", "aka"):
        for seed in ("1", "2"):
            out = tmp_path / ("%s-%s" % (method, seed))
            assert _run(tiny_config_file, out, "--method", method, "--seed", seed) == cli.EXIT_OK
            runs.append(str(out))
    capsys.readouterr()

    report = tmp_path / "report"
    assert cli.main(["compare"] + runs + ["--out", str(report)]) == cli.EXIT_OK

    table = capsys.readouterr().out.splitlines()
    assert table[0].split()[:2] == ["method", "runs"]
    assert [line.split()[0] for line in table[1:]] == ["lwf", "aka"]
    with open(str(report / "compare.csv")) as stream:
        rows = list(csv.DictReader(stream))
    assert [row["runs"] for row in rows] == ["2", "2"]
    assert "±" in rows[0]["s_bar_mAP"]
    for name in ("forgetting_mAP.png", "forgetting_rank1.csv", "generalization_mAP.png"):
        assert (report / name).exists(), name


def test_compare_writes_under_the_output_root(tiny_config_file, tmp_path, monkeypatch):
    run = tmp_path / "lwf"
    assert _run(tiny_config_file, run, "--method", "lwf") == cli.EXIT_OK
    monkeypatch.setenv("LREIDPY_OUTPUT_ROOT", str(tmp_path / "root"))
    monkeypatch.chdir(tmp_path)

    assert cli.main(["compare", str(run), "--out", "report"]) == cli.EXIT_OK

    assert not (tmp_path / "report").exists()
    with open(str(tmp_path / "root" / "report" / "compare.csv"), newline="") as stream:
        header, *rows = list(csv.reader(stream))
    assert header[:2] == ["method", "runs"]
    assert [len(row) for row in rows] == [len(header)]
    assert rows[0][:2] == ["lwf", "1"]


def test_compare_rejects_incompatible_runs(tiny_config_file, tmp_path):
    assert _run(tiny_config_file, tmp_path / "two") == cli.EXIT_OK
    assert _run(tiny_config_file, tmp_path / "three", "--set", "stream.domains=3") == cli.EXIT_OK
    runs = [str(tmp_path / "two"), str(tmp_path / "three")]
    assert cli.main(["compare"] + runs + ["--out", str(tmp_path / "c")]) == cli.EXIT_USAGE
    assert cli.main(["compare", str(tmp_path / "empty"), "--out", str(tmp_path / "c")]) == cli.EXIT_USAGE


def test_diagnose(tiny_config_file, tmp_path):
    out = tmp_path / "diag"
    assert _run(tiny_config_file, out, diagnostics=True) == cli.EXIT_OK
    assert cli.main(["diagnose", str(out)]) == cli.EXIT_OK
    assert (out / "heatmap_step_1.png").exists()
    assert (out / "heatmap_step_2.png").exists()
    lines = (out / "similarity_trend.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,mean_self_similarity"
    assert len(lines) == 3


def test_diagnose_without_dumps(tiny_config_file, tmp_path):
    out = tmp_path / "plain"
    assert _run(tiny_config_file, out) == cli.EXIT_OK
    assert cli.main(["diagnose", str(out)]) == cli.EXIT_USAGE


def test_eval_checkpoint(tiny_config_file, tmp_path, capsys):
    out = tmp_path / "run"
    config = tiny_config_file()
    assert _run(tiny_config_file, out) == cli.EXIT_OK
    capsys.readouterr()

    assert cli.main(["eval", str(out / "step_2.ckpt"), "--config", config]) == cli.EXIT_OK
    results = json.loads(capsys.readouterr().out)
    assert sorted(results) == ["synthetic-0", "synthetic-1", "unseen"]
    assert 0.0 < results["unseen"]["mAP"] <= 1.0


def test_eval_on_a_csv_folder(tiny_config_file, tmp_path, capsys):
    from lreidpy.data import SyntheticSpec, export_csv, generate_domain

    out = tmp_path / "run"
    assert _run(tiny_config_file, out) == cli.EXIT_OK
    spec = SyntheticSpec(identities=3, test_identities=3, samples_per_identity=(3, 3), input_dim=6)
    folder = export_csv(generate_domain(spec, 9), str(tmp_path / "market"))
    capsys.readouterr()

    assert cli.main(["eval", str(out / "step_1.ckpt"), "--data", folder]) == cli.EXIT_OK
    assert "market" in json.loads(capsys.readouterr().out)


def test_eval_needs_a_dataset(tiny_config_file, tmp_path):
    out = tmp_path / "run"
    assert _run(tiny_config_file, out) == cli.EXIT_OK
    assert cli.main(["eval", str(out / "step_1.ckpt")]) == cli.EXIT_USAGE
    assert cli.main(["eval", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path)]) == cli.EXIT_USAGE


def test_unknown_method_is_an_argparse_error(tiny_config_file):
    with pytest.raises(SystemExit) as error:
        cli.main(["run", "--config", tiny_config_file(), "--method", "ewc"])
    assert error.value.code == 2
