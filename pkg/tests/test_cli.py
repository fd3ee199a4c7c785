"""The sdlab command line: verbs, exit codes, artifacts, determinism."""

import json

import numpy as np
import pytest

from sdlab.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main

ORACLE_ARGS = [
    "--set", "denoiser.kind=oracle",
    "--set", "run.class_ids=[0]",
    "--set", "run.iterations=25",
    "--set", "run.batch_size=4",
]


@pytest.fixture(scope="module")
def cli_checkpoint(tmp_path_factory):
    """Train a tiny model once through the CLI and reuse its checkpoint."""
    out = tmp_path_factory.mktemp("ckpt")
    code = main(["train-denoiser",
                 "--set", "denoiser.hidden=32", "--set", "denoiser.depth=1",
                 "--set", "denoiser.train.steps=40",
                 "--set", "denoiser.train.batch_size=32",
                 "--out", str(out)])
    assert code == EXIT_OK
    path = out / "denoiser.pt"
    assert path.exists()
    return path


# ---------------------------------------------------------------------------
# Parsing and exit codes


def test_unknown_verb_exits_2(capsys):
    assert main(["nonsense"]) == 2
    capsys.readouterr()


def test_no_verb_exits_2(capsys):
    assert main([]) == 2
    capsys.readouterr()


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "score distillation" in capsys.readouterr().out


def test_missing_config_exits_2_and_names_path(tmp_path, capsys):
    missing = tmp_path / "absent.yaml"
    code = main(["distill", "--config", str(missing)])
    assert code == EXIT_CONFIG
    assert "absent.yaml" in capsys.readouterr().err


def test_unknown_override_exits_2(capsys):
    code = main(["distill", "--set", "run.bananas=3"])
    assert code == EXIT_CONFIG
    assert "bananas" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# distill


def test_distill_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["distill", *ORACLE_ARGS, "--seed", "7", "--out", str(out)])
    assert code == EXIT_OK
    assert "status completed" in capsys.readouterr().out
    for name in ("metrics.csv", "config.yaml", "record.json",
                 "final_render.npy", "scene_final.pt"):
        assert (out / name).exists(), name
    assert "seed: 7" in (out / "config.yaml").read_text()


def test_distill_repeat_is_bitwise_identical(tmp_path, capsys):
    args = ["distill", "--set", "objective.kind=ASD", *ORACLE_ARGS, "--seed", "7"]
    main([*args, "--out", str(tmp_path / "a")])
    main([*args, "--out", str(tmp_path / "b")])
    capsys.readouterr()
    assert ((tmp_path / "a" / "metrics.csv").read_bytes()
            == (tmp_path / "b" / "metrics.csv").read_bytes())
    np.testing.assert_array_equal(np.load(tmp_path / "a" / "final_render.npy"),
                                  np.load(tmp_path / "b" / "final_render.npy"))


def test_distill_numerical_abort_exits_3(tmp_path, capsys):
    out = tmp_path / "blowup"
    code = main(["distill", *ORACLE_ARGS,
                 "--set", "run.optimizer.family=sgd",
                 "--set", "run.optimizer.lr=1e12",
                 "--set", "run.optimizer.decay=none",
                 "--out", str(out)])
    assert code == EXIT_NUMERIC
    captured = capsys.readouterr()
    assert "abort detail" in captured.err
    # The aborted run still leaves a record behind.
    record = json.loads((out / "record.json").read_text())
    assert record["status"] == "numerical_abort"
    assert record["extras"]["abort"]["message"]


def test_distill_out_root_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DISTILL_OUT_ROOT", str(tmp_path))
    monkeypatch.setenv("DISTILL_THREADS", "1")
    code = main(["distill", *ORACLE_ARGS])
    capsys.readouterr()
    assert code == EXIT_OK
    assert (tmp_path / "distill" / "metrics.csv").exists()


def test_distill_from_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(
        "denoiser:\n  kind: oracle\n"
        "objective:\n  kind: SDS\n"
        "run:\n  class_ids: [0]\n  iterations: 10\n  batch_size: 4\n"
    )
    out = tmp_path / "run"
    code = main(["distill", "--config", str(cfg), "--out", str(out)])
    capsys.readouterr()
    assert code == EXIT_OK
    record = json.loads((out / "record.json").read_text())
    assert record["config"]["objective"]["kind"] == "SDS"


# ---------------------------------------------------------------------------
# train-denoiser and checkpoint reuse


def test_train_denoiser_refuses_oracle(capsys):
    code = main(["train-denoiser", "--set", "denoiser.kind=oracle"])
    assert code == EXIT_CONFIG
    assert "oracle" in capsys.readouterr().err


def test_distill_reuses_checkpoint(cli_checkpoint, tmp_path, capsys):
    out = tmp_path / "reuse"
    code = main(["distill",
                 "--set", f"denoiser.checkpoint={cli_checkpoint}",
                 "--set", "run.iterations=10", "--set", "run.batch_size=4",
                 "--out", str(out)])
    capsys.readouterr()
    assert code == EXIT_OK
    assert (out / "metrics.csv").exists()


def test_distill_amortized_runs(cli_checkpoint, tmp_path, capsys):
    out = tmp_path / "amort"
    code = main(["distill-amortized",
                 "--set", f"denoiser.checkpoint={cli_checkpoint}",
                 "--set", "scene.kind=direct_mlp",
                 "--set", "run.iterations=10", "--set", "run.batch_size=4",
                 "--out", str(out)])
    capsys.readouterr()
    assert code == EXIT_OK
    record = json.loads((out / "record.json").read_text())
    assert "class_counts" in record["extras"]


# ---------------------------------------------------------------------------
# ablate


def test_ablate_sweeps_axis(tmp_path, capsys):
    out = tmp_path / "sweep"
    code = main(["ablate", *ORACLE_ARGS, "--set", "run.iterations=10",
                 "--axis", "objective.eta", "--values", "0,0.1,0.2",
                 "--out", str(out)])
    assert code == EXIT_OK
    stdout = capsys.readouterr().out
    for val in ("0", "0.1", "0.2"):
        assert f"objective.eta={val}: completed" in stdout
    assert (out / "comparison.csv").exists()
    rows = (out / "comparison.csv").read_text().splitlines()
    assert len(rows) == 4
    for name in ("eta=0", "eta=0.1", "eta=0.2"):
        assert (out / name / "metrics.csv").exists()


def test_ablate_unknown_axis_exits_2(capsys):
    code = main(["ablate", *ORACLE_ARGS, "--axis", "objective.gamma",
                 "--values", "1,2"])
    assert code == EXIT_CONFIG
    capsys.readouterr()


# ---------------------------------------------------------------------------
# check-inequality and profile-error


def test_check_inequality_oracle(tmp_path, capsys):
    out = tmp_path / "ineq"
    code = main(["check-inequality", "--set", "denoiser.kind=oracle",
                 "--pairs", "200:100,600:100", "--draws", "64",
                 "--out", str(out)])
    assert code == EXIT_OK
    stdout = capsys.readouterr().out
    assert stdout.count("pass") == 2
    assert "FAIL" not in stdout
    assert (out / "table_inequality.csv").exists()


def test_check_inequality_bad_pair_exits_2(capsys):
    code = main(["check-inequality", "--set", "denoiser.kind=oracle",
                 "--pairs", "950:100"])
    assert code == EXIT_CONFIG
    capsys.readouterr()


def test_profile_error_oracle(tmp_path, capsys):
    out = tmp_path / "profile"
    code = main(["profile-error", "--set", "denoiser.kind=oracle",
                 "--out", str(out)])
    assert code == EXIT_OK
    stdout = capsys.readouterr().out
    assert "spearman" in stdout
    assert (out / "curve_oracle.csv").exists()
    assert (out / "curve_oracle.png").exists()
    assert (out / "manifest.json").exists()


# ---------------------------------------------------------------------------
# report


def test_report_over_runs(tmp_path, capsys):
    a = tmp_path / "a"
    b = tmp_path / "b"
    main(["distill", *ORACLE_ARGS, "--set", "objective.kind=SDS", "--out", str(a)])
    main(["distill", *ORACLE_ARGS, "--set", "objective.kind=CSD", "--out", str(b)])
    out = tmp_path / "report"
    code = main(["report", str(a), str(b), "--out", str(out)])
    assert code == EXIT_OK
    assert "2 runs" in capsys.readouterr().out
    assert (out / "runs.csv").exists()
    table = (out / "table_grad_norms.csv").read_text().splitlines()
    assert table[0] == "objective,median,p10,p90"
    assert len(table) == 3


def test_report_missing_run_exits_2(tmp_path, capsys):
    code = main(["report", str(tmp_path / "ghost")])
    assert code == EXIT_CONFIG
    capsys.readouterr()
