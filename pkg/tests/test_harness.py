"""End-to-end run loops: records, artifacts, determinism, aborts, sweeps."""

import numpy as np
import pytest
import torch
from scipy import stats

from sdlab.config import apply_overrides, build_config
from sdlab.denoiser import DenoiserArch, DenoiserTrainConfig, train_denoiser
from sdlab.errors import ConfigurationError, ValidationError
from sdlab.harness import (
    METRIC_COLUMNS,
    ablation_sweep,
    load_record,
    run_amortized,
    run_from_config,
    run_prompt_specific,
    write_metrics_csv,
)
from sdlab.schedule import build_schedule


def _oracle_cfg(**run_overrides):
    run = {"corpus": "point", "class_ids": [0], "iterations": 30, "batch_size": 4,
           "seed": 0}
    run.update(run_overrides)
    return build_config({
        "denoiser": {"kind": "oracle"},
        "objective": {"kind": "ASD"},
        "run": run,
    })


@pytest.fixture(scope="module")
def quick_model(schedule, point_corpus):
    """Intentionally undertrained; harness plumbing does not need quality."""
    return train_denoiser(point_corpus, schedule, DenoiserArch(hidden=32, depth=1),
                          DenoiserTrainConfig(steps=40, batch_size=32),
                          np.random.default_rng(77))


class _NanDenoiser:
    """Matches the predictor surface but always returns NaN."""

    prediction_type = "epsilon"
    data_shape = (2,)

    def __init__(self, schedule):
        self.schedule_fingerprint = schedule.fingerprint

    def predict_noise(self, x_t, t, cond):
        return torch.full(tuple(x_t.shape), float("nan"))


# ---------------------------------------------------------------------------
# Prompt-specific runs


def test_prompt_specific_record_shape(schedule, tmp_path):
    cfg = _oracle_cfg()
    rec = run_prompt_specific(cfg, schedule=schedule, out_dir=tmp_path / "run")
    assert rec.status == "completed"
    assert rec.iterations_run == 30
    assert len(rec.metrics) == 30
    assert set(rec.metrics[0]) == set(METRIC_COLUMNS)
    assert rec.extras["schedule_fingerprint"] == schedule.fingerprint
    assert len(rec.extras["final_particles"]) == 1
    assert len(rec.extras["distance_to_target"]) == 1
    for name in ("metrics.csv", "config.yaml", "record.json",
                 "final_render.npy", "scene_final.pt"):
        assert (tmp_path / "run" / name).exists(), name


def test_metrics_csv_bitwise_deterministic(schedule, tmp_path):
    cfg = _oracle_cfg()
    run_prompt_specific(cfg, schedule=schedule, out_dir=tmp_path / "a")
    run_prompt_specific(cfg, schedule=schedule, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b
    render_a = np.load(tmp_path / "a" / "final_render.npy")
    render_b = np.load(tmp_path / "b" / "final_render.npy")
    np.testing.assert_array_equal(render_a, render_b)


def test_different_seeds_diverge(schedule):
    rec0 = run_prompt_specific(_oracle_cfg(seed=0), schedule=schedule)
    rec1 = run_prompt_specific(_oracle_cfg(seed=1), schedule=schedule)
    assert rec0.extras["final_particles"] != rec1.extras["final_particles"]


def test_numerical_abort_is_recorded_not_raised(schedule, tmp_path):
    cfg = _oracle_cfg()
    rec = run_prompt_specific(cfg, denoiser=_NanDenoiser(schedule), schedule=schedule,
                              out_dir=tmp_path / "run")
    assert rec.status == "numerical_abort"
    assert rec.iterations_run == 0
    assert "non-finite" in rec.extras["abort"]["message"]
    assert rec.extras["abort"]["diagnostics"]["objective"] == "ASD"
    # The run directory still documents the aborted attempt.
    loaded = load_record(tmp_path / "run")
    assert loaded.status == "numerical_abort"


def test_denoiser_schedule_mismatch_rejected(point_corpus):
    from sdlab.denoiser import OracleDenoiser

    short = build_schedule(500)
    oracle = OracleDenoiser(short, point_corpus)
    with pytest.raises(ConfigurationError):
        run_prompt_specific(_oracle_cfg(), denoiser=oracle, schedule=build_schedule(1000))


def test_denoiser_kind_must_fit_corpus():
    cfg = build_config({"denoiser": {"kind": "image_conv"},
                        "run": {"corpus": "point", "iterations": 1}})
    with pytest.raises(ConfigurationError):
        run_prompt_specific(cfg)


def test_wrong_scene_kind_dispatch(schedule):
    gen_cfg = apply_overrides(_oracle_cfg(), ["scene.kind=direct_mlp"])
    with pytest.raises(ConfigurationError):
        run_prompt_specific(gen_cfg, schedule=schedule)
    with pytest.raises(ConfigurationError):
        run_amortized(_oracle_cfg(), schedule=schedule)


def test_vsd_requires_trainable_model(schedule):
    cfg = apply_overrides(_oracle_cfg(), ["objective.kind=VSD"])
    with pytest.raises(ConfigurationError):
        run_prompt_specific(cfg, schedule=schedule)


def test_vsd_populates_adapter_loss(quick_model, schedule, tmp_path):
    cfg = build_config({
        "denoiser": {"kind": "point_mlp"},
        "objective": {"kind": "VSD"},
        "run": {"corpus": "point", "iterations": 10, "batch_size": 4, "seed": 0},
    })
    rec = run_prompt_specific(cfg, denoiser=quick_model, schedule=schedule,
                              out_dir=tmp_path / "vsd")
    assert rec.status == "completed"
    assert all(np.isfinite(r["adapter_loss"]) for r in rec.metrics)
    # Frozen base must be bit-identical after the run.
    assert rec.extras["denoiser_fingerprint"] is not None
    loaded = load_record(tmp_path / "vsd")
    assert loaded.metrics[3]["adapter_loss"] == pytest.approx(
        rec.metrics[3]["adapter_loss"], rel=1e-9)


def test_non_vsd_leaves_adapter_column_empty(schedule, tmp_path):
    rec = run_prompt_specific(_oracle_cfg(), schedule=schedule, out_dir=tmp_path / "r")
    assert all(r["adapter_loss"] is None for r in rec.metrics)
    text = (tmp_path / "r" / "metrics.csv").read_text().splitlines()
    assert text[0] == ",".join(METRIC_COLUMNS)
    assert text[1].endswith(",")  # empty trailing adapter_loss field


def test_shift_per_batch_shares_one_draw(schedule):
    # A shared scalar t yields one dt per step, so both diagnostics are
    # integer-valued; per-sample mode averages distinct draws.
    cfg = _oracle_cfg(shift_per="batch", iterations=40)
    cfg = apply_overrides(cfg, ["objective.eta=0.2"])
    rec = run_prompt_specific(cfg, schedule=schedule)
    for row in rec.metrics:
        assert row["t"] == int(row["t"])
        assert row["dt"] == int(row["dt"])
    per_sample = apply_overrides(cfg, ["run.shift_per=sample"])
    rec2 = run_prompt_specific(per_sample, schedule=schedule)
    assert any(row["dt"] != int(row["dt"]) for row in rec2.metrics)


def test_anneal_narrows_sampled_timesteps(schedule):
    cfg = _oracle_cfg(iterations=60)
    cfg = apply_overrides(cfg, ["schedule.anneal.t_min_start=500"])
    rec = run_prompt_specific(cfg, schedule=schedule)
    early = [r["t"] for r in rec.metrics[:10]]
    late = [r["t"] for r in rec.metrics[-10:]]
    # Early draws live in [500, 980], late ones in [20, 500].
    assert min(early) >= 500
    assert max(late) <= 500


# ---------------------------------------------------------------------------
# Amortized runs


def test_amortized_record_and_artifacts(quick_model, schedule, tmp_path):
    cfg = build_config({
        "denoiser": {"kind": "point_mlp"},
        "objective": {"kind": "ASD"},
        "scene": {"kind": "direct_mlp"},
        "run": {"corpus": "point", "iterations": 20, "batch_size": 4, "seed": 0,
                "checkpoint_every": 10},
    })
    rec = run_amortized(cfg, denoiser=quick_model, schedule=schedule,
                        out_dir=tmp_path / "amort")
    assert rec.status == "completed"
    counts = rec.extras["class_counts"]
    assert sum(counts.values()) == 20 * 4
    final = np.load(tmp_path / "amort" / "final_render.npy")
    assert final.shape == (8, 2)  # one render per class
    assert (tmp_path / "amort" / "checkpoints" / "step_000010.pt").exists()
    assert (tmp_path / "amort" / "checkpoints" / "step_000020.pt").exists()


def test_amortized_class_coverage_is_uniform(quick_model, schedule):
    cfg = build_config({
        "denoiser": {"kind": "point_mlp"},
        "scene": {"kind": "direct_mlp"},
        "run": {"corpus": "point", "iterations": 60, "batch_size": 8, "seed": 3},
    })
    rec = run_amortized(cfg, denoiser=quick_model, schedule=schedule)
    counts = np.array(list(rec.extras["class_counts"].values()), dtype=float)
    assert counts.sum() == 480
    chi2 = ((counts - counts.mean()) ** 2 / counts.mean()).sum()
    assert chi2 < stats.chi2.ppf(0.999, df=len(counts) - 1)


def test_amortized_with_latent_and_hypernet(quick_model, schedule):
    cfg = build_config({
        "denoiser": {"kind": "point_mlp"},
        "scene": {"kind": "hypernet", "noise_dim": 4},
        "run": {"corpus": "point", "iterations": 10, "batch_size": 4, "seed": 0},
    })
    rec = run_amortized(cfg, denoiser=quick_model, schedule=schedule)
    assert rec.status == "completed"
    assert rec.iterations_run == 10


def test_amortized_needs_embedding_capable_model(schedule):
    cfg = build_config({
        "denoiser": {"kind": "oracle"},
        "scene": {"kind": "direct_mlp"},
        "run": {"corpus": "point", "iterations": 5},
    })
    with pytest.raises(ConfigurationError):
        run_amortized(cfg, schedule=schedule)


def test_run_from_config_dispatch(quick_model, schedule):
    particles = run_from_config(_oracle_cfg(iterations=5), schedule=schedule)
    assert "final_particles" in particles.extras
    gen_cfg = build_config({
        "denoiser": {"kind": "point_mlp"},
        "scene": {"kind": "direct_mlp"},
        "run": {"corpus": "point", "iterations": 5, "batch_size": 4},
    })
    amortized = run_from_config(gen_cfg, denoiser=quick_model, schedule=schedule)
    assert "class_counts" in amortized.extras


# ---------------------------------------------------------------------------
# Records on disk


def test_load_record_round_trip(schedule, tmp_path):
    rec = run_prompt_specific(_oracle_cfg(), schedule=schedule, out_dir=tmp_path / "rt")
    loaded = load_record(tmp_path / "rt")
    assert loaded.status == rec.status
    assert loaded.iterations_run == rec.iterations_run
    assert loaded.config == rec.config
    assert len(loaded.metrics) == len(rec.metrics)
    for a, b in zip(loaded.metrics, rec.metrics):
        assert a["grad_norm"] == pytest.approx(b["grad_norm"], rel=1e-9)


def test_load_record_missing_dir(tmp_path):
    with pytest.raises(ValidationError):
        load_record(tmp_path / "does_not_exist")


def test_write_metrics_csv_formatting(tmp_path):
    rows = [{"iter": 0, "t": 500.0, "dt": 12.5, "grad_norm": 0.123456789012345,
             "term1_norm": 1.0, "term2_norm": float("nan"), "adapter_loss": None}]
    path = tmp_path / "m.csv"
    write_metrics_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[1] == "0,500,12.5,0.123456789,1,,"


# ---------------------------------------------------------------------------
# Ablation sweeps


def test_ablation_sweep_empty_values():
    assert ablation_sweep(_oracle_cfg(), "objective.eta", []) == []


def test_ablation_sweep_unknown_axis():
    with pytest.raises(ConfigurationError):
        ablation_sweep(_oracle_cfg(), "objective.rate", [0.1])
    with pytest.raises(ConfigurationError):
        ablation_sweep(_oracle_cfg(), "objective.eta", [0.1], seed_policy="random")


def test_ablation_sweep_writes_runs_and_comparison(tmp_path):
    cfg = _oracle_cfg(iterations=15)
    records = ablation_sweep(cfg, "objective.eta", [0.0, 0.2], out_root=tmp_path)
    assert len(records) == 2
    assert records[0].config["objective"]["eta"] == 0.0
    assert records[1].config["objective"]["eta"] == 0.2
    # eta=0 forbids any shift; eta=0.2 must produce some.
    assert all(r["dt"] == 0.0 for r in records[0].metrics)
    assert any(r["dt"] > 0.0 for r in records[1].metrics)
    for name in ("eta=0.0", "eta=0.2"):
        assert (tmp_path / name / "metrics.csv").exists()
    lines = (tmp_path / "comparison.csv").read_text().splitlines()
    assert lines[0].startswith("value,status,iterations")
    assert len(lines) == 3
    assert lines[1].split(",")[0] == "0" and lines[2].split(",")[0] == "0.2"


def test_ablation_seed_policy_increment(tmp_path):
    cfg = _oracle_cfg(iterations=5, seed=10)
    records = ablation_sweep(cfg, "objective.eta", [0.1, 0.1], seed_policy="increment")
    assert records[0].config["run"]["seed"] == 10
    assert records[1].config["run"]["seed"] == 11
    assert records[0].extras["final_particles"] != records[1].extras["final_particles"]


def test_ablation_shift_mode_axis(schedule):
    cfg = _oracle_cfg(iterations=25)
    records = ablation_sweep(cfg, "objective.shift_mode", ["deterministic", "uniform"])
    det = np.mean([r["dt"] for r in records[0].metrics])
    uni = np.mean([r["dt"] for r in records[1].metrics])
    # Deterministic mode always takes the cap, uniform averages about half.
    assert det > uni > 0.0
