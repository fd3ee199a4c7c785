"""Distillation run loops: prompt-specific, prompt-amortized, and sweeps.

A run is fully determined by (config, seed). Every run directory receives
the resolved config snapshot, a metrics CSV with a fixed column order, a
final checkpoint, and a JSON record; numerical blow-ups are recorded as an
abort status instead of being swallowed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .config import (RootConfig, apply_overrides, build_config, config_to_dict,
                     config_to_yaml, resolve_anneal, resolve_lr, resolve_objective,
                     resolve_range)
from .corpus import build_corpus
from .denoiser import (Condition, Denoiser, DenoiserArch, DenoiserTrainConfig,
                       OracleDenoiser, load_denoiser, train_denoiser)
from .distill import VsdAdapter, apply_gradient_field, objective_gradient, vsd_adapter_step
from .errors import ConfigurationError, NumericalAbort, ValidationError
from .scene import ConditionalGenerator, ParticleScene, RenderSpec, render
from .schedule import anneal_range, build_schedule, sample_timestep

METRIC_COLUMNS = ("iter", "t", "dt", "grad_norm", "term1_norm", "term2_norm", "adapter_loss")

# augmentation ranges used when render_mode is 'augmented' (stress-test only)
_POINT_AUG = RenderSpec(mode="augmented", rotate=0.35, scale=0.1, translate=0.25)
_IMAGE_AUG = RenderSpec(mode="augmented", max_shift=1)


@dataclasses.dataclass
class ExperimentRecord:
    """Everything a finished (or aborted) run leaves behind."""

    config: dict
    status: str                    # completed | numerical_abort
    iterations_run: int
    wall_clock: float
    out_dir: str | None
    metrics: list
    extras: dict = dataclasses.field(default_factory=dict)


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, float):
        return "%.10g" % value
    return str(value)


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def _param_fingerprint(model) -> str | None:
    if not isinstance(model, torch.nn.Module):
        return None
    digest = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().numpy().tobytes())
    return digest.hexdigest()[:16]


def build_run_denoiser(cfg: RootConfig, corpus, schedule, rng: np.random.Generator):
    """Denoiser per config: checkpoint, analytic oracle, or freshly trained."""
    d = cfg.denoiser
    if d.kind == "oracle":
        if cfg.run.corpus != "point":
            raise ConfigurationError("the analytic oracle exists only for the point corpus")
        return OracleDenoiser(schedule, corpus)
    if d.checkpoint is not None:
        model = load_denoiser(d.checkpoint)
        if model.schedule_fingerprint != schedule.fingerprint:
            raise ConfigurationError(
                "checkpoint was trained on a different schedule than this run requests"
            )
        return model
    arch = DenoiserArch(kind=d.kind, hidden=d.hidden, depth=d.depth, cond_dim=d.cond_dim,
                        time_dim=d.time_dim, prediction_type=d.prediction_type)
    train_cfg = DenoiserTrainConfig(steps=d.train.steps, batch_size=d.train.batch_size,
                                    lr=d.train.lr, cond_dropout=d.train.cond_dropout)
    return train_denoiser(corpus, schedule, arch, train_cfg, rng)


def _expected_kind(d_kind: str, regime: str) -> None:
    wanted = {"point": ("point_mlp", "oracle"), "image": ("image_conv",)}[regime]
    if d_kind not in wanted:
        raise ConfigurationError(
            f"denoiser kind {d_kind!r} does not fit the {regime!r} corpus (use one of {wanted})"
        )


def _make_optimizer(params, cfg: RootConfig, lr: float):
    fam = cfg.run.optimizer.family
    if fam == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr)


def _set_lr(opt, base: float, decay: str, frac: float) -> None:
    lr = base if decay == "none" else base * 0.5 * (1.0 + math.cos(math.pi * frac))
    for grp in opt.param_groups:
        grp["lr"] = lr


def _render_spec(cfg: RootConfig) -> RenderSpec:
    if cfg.scene.render_mode == "identity":
        return RenderSpec()
    return _POINT_AUG if cfg.run.corpus == "point" else _IMAGE_AUG


def _draw_step_inputs(cfg, trange, rng, batch, data_shape):
    """Per-step (t, eps) draws.

    shift_per 'sample' draws one (t, dt) pair per batch element; 'batch'
    draws a single shared t, and with it a single shared dt downstream.
    """
    if cfg.run.shift_per == "sample":
        t = sample_timestep(trange, rng, size=batch)
    else:
        t = int(sample_timestep(trange, rng))
    eps = torch.as_tensor(rng.standard_normal((batch,) + tuple(data_shape)),
                          dtype=torch.float32)
    return t, eps


def _metrics_row(i, field, adapter_loss):
    d = field.diagnostics
    return {
        "iter": i,
        "t": float(d.get("t", 0.0)),
        "dt": float(d.get("dt", 0.0)),
        "grad_norm": field.norm,
        "term1_norm": float(d.get("term1_norm", 0.0)),
        "term2_norm": float(d.get("term2_norm", 0.0)),
        "adapter_loss": adapter_loss,
    }


def _save_outputs(out: Path, scene, rendered: torch.Tensor, record: ExperimentRecord,
                  cfg: RootConfig) -> None:
    arr = rendered.detach().numpy()
    np.save(out / "final_render.npy", arr)
    payload = {
        "version": 1,
        "scene_kind": cfg.scene.kind,
        "state_dict": scene.state_dict(),
    }
    torch.save(payload, out / "scene_final.pt")
    if arr.ndim == 4:  # image grid
        _save_image_grid(arr, out / "final_grid.png")
    record.extras["artifacts"] = ["final_render.npy", "scene_final.pt"] + (
        ["final_grid.png"] if arr.ndim == 4 else []
    )


def _save_image_grid(arr: np.ndarray, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = arr.shape[0]
    cols = min(n, 8)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.2 * cols, 1.2 * rows), squeeze=False)
    for k in range(rows * cols):
        ax = axes[k // cols][k % cols]
        ax.axis("off")
        if k < n:
            ax.imshow(arr[k, 0], cmap="gray", vmin=-1.2, vmax=1.2)
    fig.tight_layout(pad=0.2)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _finalize(record: ExperimentRecord, out: Path | None, cfg: RootConfig) -> ExperimentRecord:
    if out is not None:
        write_metrics_csv(record.metrics, out / "metrics.csv")
        (out / "config.yaml").write_text(config_to_yaml(cfg))
        with open(out / "record.json", "w") as fh:
            json.dump({
                "config": record.config,
                "status": record.status,
                "iterations_run": record.iterations_run,
                "wall_clock": record.wall_clock,
                "extras": record.extras,
            }, fh, indent=2, default=str)
    return record


def _prepare(cfg: RootConfig, denoiser, schedule, out_dir):
    """Shared setup: schedule, corpus, denoiser, objective, rng, run dir."""
    if schedule is None:
        schedule = build_schedule(cfg.schedule.T, cfg.schedule.beta_family)
    corpus = build_corpus(cfg.run.corpus, cfg.run.class_ids)
    rng = np.random.default_rng(cfg.run.seed)
    if denoiser is None:
        _expected_kind(cfg.denoiser.kind, cfg.run.corpus)
        denoiser = build_run_denoiser(cfg, corpus, schedule, rng)
    if denoiser.schedule_fingerprint != schedule.fingerprint:
        raise ConfigurationError("denoiser schedule does not match the run schedule")
    for cid in corpus.class_ids:
        if isinstance(denoiser, Denoiser) and cid not in denoiser.class_ids:
            raise ValidationError(f"class id {cid} missing from denoiser vocabulary")
    objective = resolve_objective(cfg)
    trange = resolve_range(cfg)
    plan = resolve_anneal(cfg, cfg.run.iterations)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    return schedule, corpus, denoiser, objective, trange, plan, rng, out


def _maybe_adapter(cfg: RootConfig, objective, denoiser):
    if objective.kind != "VSD":
        return None
    if not isinstance(denoiser, Denoiser):
        raise ConfigurationError("VSD needs a trainable denoiser copy, not an oracle")
    a = cfg.objective.adapter
    # seed + 1 keeps the adapter's init stream distinct from the scene's
    with torch.random.fork_rng():
        torch.manual_seed(cfg.run.seed + 1)
        return VsdAdapter(denoiser, rank=a.rank, lr=a.lr)


def run_prompt_specific(cfg: RootConfig, denoiser=None, schedule=None,
                        out_dir=None) -> ExperimentRecord:
    """Optimize free particles, one condition each, for cfg.run.iterations steps."""
    if cfg.scene.kind != "particles":
        raise ConfigurationError("run_prompt_specific needs scene.kind = particles")
    start = time.time()
    schedule, corpus, denoiser, objective, trange, plan, rng, out = _prepare(
        cfg, denoiser, schedule, out_dir)
    spec = _render_spec(cfg)
    conds = [Condition(cid) for cid in corpus.class_ids
             for _ in range(cfg.scene.num_particles)]
    scene = ParticleScene(conds, corpus.data_shape, init_std=cfg.scene.init_std, rng=rng)
    base_lr = resolve_lr(cfg)
    opt = _make_optimizer(scene.parameters(), cfg, base_lr)
    adapter = _maybe_adapter(cfg, objective, denoiser)
    fp_before = _param_fingerprint(denoiser)

    batch = cfg.run.batch_size
    record = ExperimentRecord(config=config_to_dict(cfg), status="completed",
                              iterations_run=0, wall_clock=0.0,
                              out_dir=str(out) if out else None, metrics=[])
    try:
        for i in range(cfg.run.iterations):
            trange_i = anneal_range(plan, i) if plan else trange
            _set_lr(opt, base_lr, cfg.run.optimizer.decay, i / max(cfg.run.iterations, 1))
            p = int(rng.integers(0, scene.num_particles))
            idx = np.full(batch, p, dtype=np.int64)
            x, used = render(scene, index=idx, spec=spec, rng=rng)
            t, eps = _draw_step_inputs(cfg, trange_i, rng, batch, corpus.data_shape)
            field = objective_gradient(objective, denoiser, schedule, x.detach(), t, eps,
                                       used, trange=trange_i, rng=rng, adapter=adapter)
            opt.zero_grad()
            (apply_gradient_field(field, x) / batch).backward()
            opt.step()
            if not torch.isfinite(scene.particles).all():
                raise NumericalAbort("particle values became non-finite",
                                     last_state=field.diagnostics, step=i)
            adapter_loss = None
            if adapter is not None:
                for _ in range(cfg.objective.adapter.steps_per_iter):
                    adapter_loss = vsd_adapter_step(adapter, schedule, x.detach(), used,
                                                    trange_i, rng)
            record.metrics.append(_metrics_row(i, field, adapter_loss))
            record.iterations_run = i + 1
    except NumericalAbort as err:
        record.status = "numerical_abort"
        record.extras["abort"] = {"step": getattr(err, "step", None), "message": str(err),
                                  "diagnostics": getattr(err, "last_state", None)}

    fp_after = _param_fingerprint(denoiser)
    if fp_before != fp_after:
        raise RuntimeError("denoiser base parameters changed during distillation")
    record.extras["denoiser_fingerprint"] = fp_after
    record.extras["schedule_fingerprint"] = schedule.fingerprint
    if cfg.run.corpus == "point":
        final = scene.particles.detach().numpy()
        record.extras["final_particles"] = final.tolist()
        record.extras["distance_to_target"] = [
            float(np.linalg.norm(final[j] - corpus.target_mean(c.class_id)))
            for j, c in enumerate(scene.conds)
        ]
    record.wall_clock = time.time() - start
    if out is not None:
        with torch.no_grad():
            rendered, _ = render(scene)
        _save_outputs(out, scene, rendered, record, cfg)
    return _finalize(record, out, cfg)


def run_amortized(cfg: RootConfig, denoiser=None, schedule=None,
                  out_dir=None) -> ExperimentRecord:
    """Train a conditional generator against the distillation objective."""
    if cfg.scene.kind not in ("direct_mlp", "hypernet"):
        raise ConfigurationError("run_amortized needs scene.kind direct_mlp or hypernet")
    start = time.time()
    schedule, corpus, denoiser, objective, trange, plan, rng, out = _prepare(
        cfg, denoiser, schedule, out_dir)
    if not isinstance(denoiser, Denoiser):
        raise ConfigurationError("amortized runs need a trained denoiser for its "
                                 "condition embeddings")
    spec = _render_spec(cfg)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.run.seed)
        scene = ConditionalGenerator(cfg.scene.kind, embed_dim=denoiser.arch.cond_dim,
                                     data_shape=corpus.data_shape,
                                     noise_dim=cfg.scene.noise_dim,
                                     spectral_norm=cfg.scene.spectral_norm)
    base_lr = resolve_lr(cfg)
    opt = _make_optimizer(scene.parameters(), cfg, base_lr)
    adapter = _maybe_adapter(cfg, objective, denoiser)
    fp_before = _param_fingerprint(denoiser)

    batch = cfg.run.batch_size
    ids_all = np.asarray(corpus.class_ids, dtype=np.int64)
    class_counts = {int(c): 0 for c in ids_all}
    record = ExperimentRecord(config=config_to_dict(cfg), status="completed",
                              iterations_run=0, wall_clock=0.0,
                              out_dir=str(out) if out else None, metrics=[])
    if out is not None and cfg.run.checkpoint_every > 0:
        (out / "checkpoints").mkdir(exist_ok=True)

    def conds_for(ids: np.ndarray) -> list:
        emb = denoiser.embed_ids(ids)
        return [Condition(int(c), embedding=emb[j].numpy()) for j, c in enumerate(ids)]

    try:
        for i in range(cfg.run.iterations):
            trange_i = anneal_range(plan, i) if plan else trange
            _set_lr(opt, base_lr, cfg.run.optimizer.decay, i / max(cfg.run.iterations, 1))
            ids = ids_all[rng.integers(0, len(ids_all), size=batch)]
            for c in ids:
                class_counts[int(c)] += 1
            used = conds_for(ids)
            latent = None
            if cfg.scene.noise_dim > 0:
                latent = torch.as_tensor(
                    rng.standard_normal((batch, cfg.scene.noise_dim)), dtype=torch.float32)
            x, used = render(scene, used, latent=latent, spec=spec, rng=rng)
            t, eps = _draw_step_inputs(cfg, trange_i, rng, batch, corpus.data_shape)
            field = objective_gradient(objective, denoiser, schedule, x.detach(), t, eps,
                                       used, trange=trange_i, rng=rng, adapter=adapter)
            opt.zero_grad()
            (apply_gradient_field(field, x) / batch).backward()
            opt.step()
            for prm in scene.parameters():
                if not torch.isfinite(prm).all():
                    raise NumericalAbort("generator weights became non-finite",
                                         last_state=field.diagnostics, step=i)
            adapter_loss = None
            if adapter is not None:
                for _ in range(cfg.objective.adapter.steps_per_iter):
                    adapter_loss = vsd_adapter_step(adapter, schedule, x.detach(), used,
                                                    trange_i, rng)
            record.metrics.append(_metrics_row(i, field, adapter_loss))
            record.iterations_run = i + 1
            if (out is not None and cfg.run.checkpoint_every > 0
                    and (i + 1) % cfg.run.checkpoint_every == 0):
                torch.save({"version": 1, "scene_kind": cfg.scene.kind,
                            "state_dict": scene.state_dict()},
                           out / "checkpoints" / f"step_{i + 1:06d}.pt")
    except NumericalAbort as err:
        record.status = "numerical_abort"
        record.extras["abort"] = {"step": getattr(err, "step", None), "message": str(err),
                                  "diagnostics": getattr(err, "last_state", None)}

    fp_after = _param_fingerprint(denoiser)
    if fp_before != fp_after:
        raise RuntimeError("denoiser base parameters changed during distillation")
    record.extras["denoiser_fingerprint"] = fp_after
    record.extras["schedule_fingerprint"] = schedule.fingerprint
    record.extras["class_counts"] = class_counts
    record.wall_clock = time.time() - start
    if out is not None:
        with torch.no_grad():
            latent = None
            if cfg.scene.noise_dim > 0:
                latent = torch.zeros(len(ids_all), cfg.scene.noise_dim)
            rendered, _ = render(scene, conds_for(ids_all), latent=latent)
        _save_outputs(out, scene, rendered, record, cfg)
    return _finalize(record, out, cfg)


def run_from_config(cfg: RootConfig, denoiser=None, schedule=None,
                    out_dir=None) -> ExperimentRecord:
    if cfg.scene.kind == "particles":
        return run_prompt_specific(cfg, denoiser, schedule, out_dir)
    return run_amortized(cfg, denoiser, schedule, out_dir)


def load_record(run_dir) -> ExperimentRecord:
    """Rehydrate a run's record and metrics from its directory."""
    run_dir = Path(run_dir)
    rec_path = run_dir / "record.json"
    if not rec_path.exists():
        raise ValidationError(f"no record.json under {run_dir}")
    payload = json.loads(rec_path.read_text())
    metrics = []
    csv_path = run_dir / "metrics.csv"
    if csv_path.exists():
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                metrics.append({
                    "iter": int(row["iter"]),
                    "adapter_loss": float(row["adapter_loss"]) if row["adapter_loss"] else None,
                    **{c: float(row[c]) for c in
                       ("t", "dt", "grad_norm", "term1_norm", "term2_norm")},
                })
    return ExperimentRecord(config=payload["config"], status=payload["status"],
                            iterations_run=payload["iterations_run"],
                            wall_clock=payload["wall_clock"], out_dir=str(run_dir),
                            metrics=metrics, extras=payload.get("extras", {}))


def _sweep_worker(args):
    data, out_dir = args
    return run_from_config(build_config(data), out_dir=out_dir)


def _value_slug(value) -> str:
    return str(value).replace("/", "_").replace(" ", "")


def ablation_sweep(base_cfg: RootConfig, axis: str, values, out_root=None,
                   jobs: int = 1, seed_policy: str = "same") -> list:
    """One run per value of a single config axis, plus a comparison table.

    seed_policy 'same' reuses base seed for every run; 'increment' adds the
    value index to it.
    """
    if seed_policy not in ("same", "increment"):
        raise ConfigurationError(f"seed_policy {seed_policy!r} unknown")
    values = list(values)
    if not values:
        return []
    jobs = max(1, int(jobs))
    tasks = []
    for k, value in enumerate(values):
        pairs = [f"{axis}={value}"]
        if seed_policy == "increment":
            pairs.append(f"run.seed={base_cfg.run.seed + k}")
        cfg_k = apply_overrides(base_cfg, pairs)  # raises on an unknown axis
        out_k = None
        if out_root is not None:
            out_k = str(Path(out_root) / f"{axis.split('.')[-1]}={_value_slug(value)}")
        tasks.append((config_to_dict(cfg_k), out_k))

    if jobs == 1:
        records = [_sweep_worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_sweep_worker, tasks))

    if out_root is not None:
        _write_comparison(Path(out_root) / "comparison.csv", axis, values, records)
    return records


def _write_comparison(path: Path, axis: str, values, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["value", "status", "iterations", "final_grad_norm",
                         "mean_dt", "mean_distance", "wall_clock"])
        for value, rec in zip(values, records):
            tail = rec.metrics[-10:]
            grad = float(np.mean([r["grad_norm"] for r in tail])) if tail else None
            mean_dt = float(np.mean([r["dt"] for r in rec.metrics])) if rec.metrics else None
            dist = rec.extras.get("distance_to_target")
            writer.writerow([
                _fmt(value), rec.status, rec.iterations_run, _fmt(grad), _fmt(mean_dt),
                _fmt(float(np.mean(dist)) if dist else None), _fmt(rec.wall_clock),
            ])
