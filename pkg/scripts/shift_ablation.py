"""Sweep the timestep-shift strength for each shift mode and tabulate the runs.

Each (mode, eta) cell is one prompt-specific run against the analytic oracle.
Per-mode comparison tables land under the output root; a merged table with a
mode column is written alongside and echoed to stdout.
"""

import argparse
import csv
from pathlib import Path

from sdlab.config import apply_overrides, build_config
from sdlab.harness import ablation_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--etas", default="0,0.1,0.2", help="comma-separated shift strengths")
    ap.add_argument("--modes", default="deterministic,uniform")
    ap.add_argument("--iterations", type=int, default=800)
    ap.add_argument("--objective", default="ASD", choices=("SDS", "CSD", "ASD"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--seed-policy", default="same", choices=("same", "increment"))
    ap.add_argument("--out", default="runs/shift_ablation")
    args = ap.parse_args()

    etas = [float(v) for v in args.etas.split(",")]
    out = Path(args.out)
    base = build_config({
        "denoiser": {"kind": "oracle"},
        "objective": {"kind": args.objective},
        "run": {"corpus": "point", "iterations": args.iterations,
                "batch_size": 8, "seed": args.seed},
    })

    merged = []
    for mode in args.modes.split(","):
        cfg = apply_overrides(base, [f"objective.shift_mode={mode}"])
        records = ablation_sweep(cfg, "objective.eta", etas, out_root=out / mode,
                                 seed_policy=args.seed_policy)
        print(f"{mode}: {sum(r.status == 'completed' for r in records)}/"
              f"{len(records)} runs completed")
        with open(out / mode / "comparison.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                merged.append({"mode": mode, **row})

    path = out / "comparison_merged.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(merged[0].keys()))
        writer.writeheader()
        writer.writerows(merged)
    print(f"\nmerged table ({path}):")
    header = list(merged[0].keys())
    print("  ".join(header))
    for row in merged:
        print("  ".join(str(row[h]) for h in header))


if __name__ == "__main__":
    main()
