"""Guidance-map ablation: test MAE with and without the two maps, over several seeds.

The no-maps variant replaces both guidance channels with constant 0.5.

    python3 scripts/ablation.py --seeds 1 2 3 --steps 1000
"""

import argparse
import json

import numpy as np

from cpdm.experiments import DESK_LR, desk_data, run_desk


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=DESK_LR)
    p.add_argument("--sample-steps", type=int, default=50)
    p.add_argument("--out", default=None)
    a = p.parse_args()

    rows = []
    for seed in a.seeds:
        data = desk_data(seed)
        row = {"seed": seed}
        for name, no_maps in (("with_maps", False), ("without_maps", True)):
            res = run_desk(data, steps=a.steps, lr=a.lr, no_maps=no_maps, sample_steps=a.sample_steps)
            row[name] = res.test_mae
        rows.append(row)
        print(f"seed {seed}: with maps {row['with_maps']:.1f}  without maps {row['without_maps']:.1f}")
    full = float(np.mean([r["with_maps"] for r in rows]))
    plain = float(np.mean([r["without_maps"] for r in rows]))
    print(f"mean MAE with maps {full:.1f}, without maps {plain:.1f}, ratio {full / plain:.3f}")
    if a.out:
        with open(a.out, "w") as f:
            json.dump({"rows": rows, "mean_with_maps": full, "mean_without_maps": plain}, f, indent=2)


if __name__ == "__main__":
    main()
