"""Run SDS, CSD, VSD and ASD on the 2D point corpus and compare the results.

Optimizes one particle per class under each objective, then writes per-run
artifacts, a 2x2 scatter of final particles over the data cloud, and a
gradient-norm summary table.
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from sdlab.analysis import emit_report, grad_norm_stats
from sdlab.config import apply_overrides, build_config
from sdlab.corpus import default_point_corpus
from sdlab.denoiser import (
    DenoiserArch,
    DenoiserTrainConfig,
    load_denoiser,
    save_denoiser,
    train_denoiser,
)
from sdlab.harness import run_prompt_specific
from sdlab.schedule import build_schedule

OBJECTIVES = ("SDS", "CSD", "VSD", "ASD")


def get_denoiser(args, out: Path):
    if args.checkpoint:
        return load_denoiser(args.checkpoint)
    cached = out / "denoiser.pt"
    if cached.exists():
        return load_denoiser(cached)
    print("no checkpoint given, training the default point denoiser ...")
    model = train_denoiser(default_point_corpus(), build_schedule(1000),
                           DenoiserArch(kind="point_mlp"), DenoiserTrainConfig(),
                           np.random.default_rng(args.seed))
    save_denoiser(model, cached)
    return model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", help="point denoiser checkpoint (default: train one)")
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/toy_comparison")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = get_denoiser(args, out)
    corpus = default_point_corpus()

    base = build_config({
        "run": {"corpus": "point", "iterations": args.iterations,
                "batch_size": 8, "seed": args.seed},
    })
    records = {}
    for kind in OBJECTIVES:
        cfg = apply_overrides(base, [f"objective.kind={kind}"])
        rec = run_prompt_specific(cfg, denoiser=model, out_dir=out / kind.lower())
        dist = rec.extras.get("distance_to_target", [])
        print(f"{kind}: {rec.status}, mean distance to class mean "
              f"{np.mean(dist):.4f}" if dist else f"{kind}: {rec.status}")
        records[kind] = rec

    cloud, _ = corpus.sample(2000, np.random.default_rng(1))
    fig, axes = plt.subplots(2, 2, figsize=(9, 9), sharex=True, sharey=True)
    for ax, kind in zip(axes.ravel(), OBJECTIVES):
        final = np.load(out / kind.lower() / "final_render.npy")
        ax.scatter(cloud[:, 0], cloud[:, 1], s=3, c="0.8")
        ax.scatter(final[:, 0], final[:, 1], s=40,
                   c=np.arange(final.shape[0]), cmap="tab10")
        ax.set_title(kind)
        ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(out / "scatter.png", dpi=120)
    plt.close(fig)

    manifest = emit_report(out, tables={"grad_norms": grad_norm_stats(records.values())},
                           records=list(records.values()))
    print(f"wrote {sorted(manifest)} and scatter.png to {out}")


if __name__ == "__main__":
    main()
