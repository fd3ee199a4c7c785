"""Measurement: error curves, shift inequality, norm tables, recall, reports.

Everything here is read-only over models and deterministic given an rng, so
measurements can be rerun and compared byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import GaussianMixture
from .denoiser import Condition, predict_noise
from .errors import ValidationError
from .schedule import NoiseSchedule, gather_coeffs

CLASSIFIER_GATE = 0.98


@dataclass(frozen=True)
class ErrorCurve:
    """Mean squared noise-prediction error over a grid of probe timesteps."""

    timesteps: np.ndarray
    mean_error: np.ndarray
    std_error: np.ndarray
    sample_count: int
    tag: str = "pretrained"

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValidationError("sample_count must be >= 1")
        if not (len(self.timesteps) == len(self.mean_error) == len(self.std_error)):
            raise ValidationError("curve arrays must align")
        if self.tag not in ("pretrained", "adapter", "oracle"):
            raise ValidationError(f"curve tag {self.tag!r} unknown")


@dataclass(frozen=True)
class RecallReport:
    hits: dict                 # class id -> [hits, total]
    recall: float
    classifier_fingerprint: str

    def __post_init__(self):
        if not 0.0 <= self.recall <= 1.0:
            raise ValidationError(f"recall {self.recall} outside [0, 1]")


def error_probe_grid(t_min: int = 20, t_max: int = 980, n: int = 100) -> np.ndarray:
    """n distinct integer probes spread evenly across [t_min, t_max]."""
    return np.unique(np.linspace(t_min, t_max, n).round().astype(np.int64))


def corpus_probe_set(corpus, n_per_cond: int, rng: np.random.Generator):
    """Equal-weight probe samples: n per class, with matching conditions."""
    xs, conds = [], []
    for cid in corpus.class_ids:
        x, ids = corpus.sample(n_per_cond, rng, class_ids=cid)
        xs.append(x)
        conds.extend(Condition(int(c)) for c in ids)
    return np.concatenate(xs, axis=0), conds


def _per_sample_sq(a: torch.Tensor) -> np.ndarray:
    return a.pow(2).flatten(1).sum(dim=1).numpy()


def profile_error_curve(model, schedule: NoiseSchedule, samples, conds, probes,
                        rng: np.random.Generator, tag: str = "pretrained") -> ErrorCurve:
    """Squared error of the model's noise prediction across probe timesteps.

    Each sample gets a single noise instance, reused at every probe, so the
    curve varies only through the timestep and not through fresh noise.
    """
    x = torch.as_tensor(np.asarray(samples), dtype=torch.float32)
    if x.ndim == 0 or x.shape[0] == 0:
        raise ValidationError("need at least one probe sample")
    if len(conds) != x.shape[0]:
        raise ValidationError(f"{x.shape[0]} samples but {len(conds)} conditions")
    probes = np.asarray(probes, dtype=np.int64)
    if probes.min() < 0 or probes.max() >= len(schedule.alpha):
        raise ValidationError("probe timesteps outside the schedule")
    eps = torch.as_tensor(rng.standard_normal(tuple(x.shape)), dtype=torch.float32)
    means, stds = [], []
    with torch.no_grad():
        for t in probes:
            a, s = gather_coeffs(schedule, int(t), like=x)
            x_t = a * x + s * eps
            pred = predict_noise(model, x_t, int(t), conds)
            errs = _per_sample_sq(pred - eps)
            means.append(float(errs.mean()))
            stds.append(float(errs.std()))
    return ErrorCurve(timesteps=probes, mean_error=np.asarray(means),
                      std_error=np.asarray(stds), sample_count=int(x.shape[0]), tag=tag)


def spearman(x, y) -> float:
    """Rank correlation; ties broken by average rank."""
    from scipy.stats import spearmanr

    return float(spearmanr(np.asarray(x), np.asarray(y)).statistic)


def mc_bayes_error(mixture: GaussianMixture, schedule: NoiseSchedule, t: int,
                   n: int = 100_000, rng: np.random.Generator | None = None):
    """Monte-Carlo estimate of the best achievable squared noise error.

    Returns (mean, standard error of the mean). The optimal predictor is the
    posterior-mean noise, recovered from the diffused mixture's score.
    """
    rng = rng or np.random.default_rng(0)
    a, s = float(schedule.alpha[t]), float(schedule.sigma[t])
    x0 = mixture.sample(n, rng)
    eps = rng.standard_normal(x0.shape)
    x_t = a * x0 + s * eps
    star = -s * mixture.diffused(a, s).score(x_t)
    errs = ((star - eps) ** 2).sum(axis=1)
    return float(errs.mean()), float(errs.std() / np.sqrt(n))


def check_shift_inequality(model, schedule: NoiseSchedule, samples, conds, pairs,
                           n_draws: int, rng: np.random.Generator) -> list:
    """Compare mean prediction error at t against t+dt on shared (x, eps).

    Returns one report dict per (t, dt) pair with both means and a pass flag
    for mean_error(t + dt) <= mean_error(t).
    """
    x_all = torch.as_tensor(np.asarray(samples), dtype=torch.float32)
    if x_all.ndim == 0 or x_all.shape[0] == 0:
        raise ValidationError("need at least one sample")
    if len(conds) != x_all.shape[0]:
        raise ValidationError(f"{x_all.shape[0]} samples but {len(conds)} conditions")
    total = len(schedule.alpha)
    reports = []
    with torch.no_grad():
        for t, dt in pairs:
            t, dt = int(t), int(dt)
            if dt < 0 or t < 0 or t + dt >= total:
                raise ValidationError(f"pair ({t}, {dt}) leaves the schedule")
            idx = rng.integers(0, x_all.shape[0], size=n_draws)
            x = x_all[torch.as_tensor(idx)]
            used = [conds[i] for i in idx]
            eps = torch.as_tensor(rng.standard_normal(tuple(x.shape)), dtype=torch.float32)
            errs = {}
            for probe in (t, t + dt):
                a, s = gather_coeffs(schedule, probe, like=x)
                pred = predict_noise(model, a * x + s * eps, probe, used)
                errs[probe] = float(_per_sample_sq(pred - eps).mean())
            reports.append({
                "t": t, "dt": dt,
                "err_t": errs[t], "err_shifted": errs[t + dt],
                "passes": bool(errs[t + dt] <= errs[t]),
            })
    return reports


def grad_norm_stats(records) -> list:
    """Median and decile gradient norms per objective across run records.

    Records must come from the same scene and corpus configuration so the
    norms are comparable.
    """
    records = list(records)
    if not records:
        raise ValidationError("no records to summarize")
    base = records[0].config
    for rec in records[1:]:
        same = (rec.config["scene"] == base["scene"]
                and rec.config["run"]["corpus"] == base["run"]["corpus"]
                and rec.config["run"]["class_ids"] == base["run"]["class_ids"])
        if not same:
            raise ValidationError("records mix different scenes or corpora")
    pooled: dict[str, list] = {}
    for rec in records:
        pooled.setdefault(rec.config["objective"]["kind"], []).extend(
            row["grad_norm"] for row in rec.metrics)
    rows = []
    for kind in sorted(pooled):
        norms = np.asarray(pooled[kind], dtype=np.float64)
        if norms.size == 0:
            raise ValidationError(f"no logged steps for objective {kind}")
        rows.append({
            "objective": kind,
            "median": float(np.median(norms)),
            "p10": float(np.percentile(norms, 10)),
            "p90": float(np.percentile(norms, 90)),
        })
    return rows


class _PointClassifier(nn.Module):
    def __init__(self, k: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2, 64), nn.SiLU(),
                                 nn.Linear(64, 64), nn.SiLU(), nn.Linear(64, k))

    def forward(self, x):
        return self.net(x)


class _ImageClassifier(nn.Module):
    def __init__(self, k: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, 16, 3, padding=1), nn.SiLU(), nn.AvgPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.SiLU(), nn.AvgPool2d(2),
            nn.Flatten(), nn.Linear(32 * 16, 64), nn.SiLU(), nn.Linear(64, k))

    def forward(self, x):
        return self.net(x)


@dataclass
class ClassifierBundle:
    """Trained auxiliary classifier plus its held-out accuracy gate."""

    module: nn.Module
    class_ids: list
    accuracy: float
    fingerprint: str

    def predict(self, samples) -> np.ndarray:
        x = torch.as_tensor(np.asarray(samples), dtype=torch.float32)
        with torch.no_grad():
            rows = self.module(x).argmax(dim=1).numpy()
        return np.asarray(self.class_ids, dtype=np.int64)[rows]


def train_classifier(corpus, rng: np.random.Generator, steps: int = 600,
                     batch_size: int = 128, lr: float = 2e-3,
                     holdout: int = 1024) -> ClassifierBundle:
    """Small supervised classifier over the corpus, gated on held-out data."""
    k = len(corpus.class_ids)
    id_to_row = {cid: j for j, cid in enumerate(corpus.class_ids)}
    seed = int(rng.integers(0, 2**31 - 1))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = (_ImageClassifier(k) if len(corpus.data_shape) == 3
                  else _PointClassifier(k))
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    for _ in range(steps):
        x, ids = corpus.sample(batch_size, rng)
        rows = torch.as_tensor([id_to_row[int(c)] for c in ids])
        loss = nn.functional.cross_entropy(module(torch.as_tensor(x)), rows)
        opt.zero_grad()
        loss.backward()
        opt.step()
    module.eval()
    xh, ih = corpus.sample(holdout, rng)
    with torch.no_grad():
        pred = module(torch.as_tensor(xh)).argmax(dim=1).numpy()
    truth = np.asarray([id_to_row[int(c)] for c in ih])
    acc = float((pred == truth).mean())
    digest = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().numpy().tobytes())
    return ClassifierBundle(module=module, class_ids=list(corpus.class_ids),
                            accuracy=acc, fingerprint=digest.hexdigest()[:16])


def recall_at_1(samples, intended_ids, classifier: ClassifierBundle) -> RecallReport:
    """Fraction of generated samples classified as their intended class."""
    if classifier.accuracy < CLASSIFIER_GATE:
        raise ValidationError(
            f"classifier accuracy {classifier.accuracy:.4f} below the "
            f"{CLASSIFIER_GATE} gate; refusing to score recall"
        )
    intended = np.asarray(intended_ids, dtype=np.int64)
    samples = np.asarray(samples)
    if samples.shape[0] == 0:
        raise ValidationError("empty generated set")
    if samples.shape[0] != intended.shape[0]:
        raise ValidationError("samples and intended ids differ in length")
    pred = classifier.predict(samples)
    hits: dict[int, list] = {}
    for want, got in zip(intended, pred):
        slot = hits.setdefault(int(want), [0, 0])
        slot[0] += int(got == want)
        slot[1] += 1
    return RecallReport(hits=hits, recall=float((pred == intended).mean()),
                        classifier_fingerprint=classifier.fingerprint)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_csv(path: Path, header, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def emit_report(out_dir, curves: dict | None = None, tables: dict | None = None,
                records=None, recall: RecallReport | None = None) -> dict:
    """Write curves, tables and run summaries; return {file: sha256} manifest.

    File names are derived from the input keys, so the same inputs always
    produce the same manifest.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    for name, curve in sorted((curves or {}).items()):
        path = out / f"curve_{name}.csv"
        _write_csv(path, ("t", "mean", "std", "n"),
                   [("%d" % t, "%.10g" % m, "%.10g" % s, "%d" % curve.sample_count)
                    for t, m, s in zip(curve.timesteps, curve.mean_error, curve.std_error)])
        files.append(path)
        files.append(_plot_curves(out / f"curve_{name}.png", {name: curve}))

    for name, rows in sorted((tables or {}).items()):
        path = out / f"table_{name}.csv"
        if rows:
            header = list(rows[0].keys())
            _write_csv(path, header,
                       [[_cell(r[h]) for h in header] for r in rows])
        else:
            _write_csv(path, (), [])
        files.append(path)

    if records:
        path = out / "runs.csv"
        _write_csv(path, ("objective", "status", "iterations", "median_grad_norm",
                          "mean_dt"),
                   [[rec.config["objective"]["kind"], rec.status, rec.iterations_run,
                     _cell(float(np.median([r["grad_norm"] for r in rec.metrics]))
                           if rec.metrics else ""),
                     _cell(float(np.mean([r["dt"] for r in rec.metrics]))
                           if rec.metrics else "")]
                    for rec in records])
        files.append(path)

    if recall is not None:
        path = out / "recall.csv"
        _write_csv(path, ("class", "hits", "total"),
                   [(cid, h, n) for cid, (h, n) in sorted(recall.hits.items())])
        files.append(path)

    manifest = {f.name: _sha256(f) for f in files}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _cell(value) -> str:
    if isinstance(value, float):
        return "%.10g" % value
    return str(value)


def _plot_curves(path: Path, curves: dict) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, curve in sorted(curves.items()):
        ax.plot(curve.timesteps, curve.mean_error, label=name)
        ax.fill_between(curve.timesteps,
                        curve.mean_error - curve.std_error,
                        curve.mean_error + curve.std_error, alpha=0.2)
    ax.set_xlabel("timestep")
    ax.set_ylabel("squared noise error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
