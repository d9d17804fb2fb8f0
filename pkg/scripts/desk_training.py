"""Desk-scale training run: train, sample the test split, compare with the mean-image predictor.

    python3 scripts/desk_training.py --seed 1 --steps 3000 --lr 1e-3
"""

import argparse
import json

from cpdm.experiments import DESK_LR, desk_data, run_desk


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--T", type=int, default=200)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=DESK_LR)
    p.add_argument("--sample-steps", type=int, default=50)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--no-maps", action="store_true")
    p.add_argument("--out", default=None, help="write a JSON summary here")
    a = p.parse_args()

    data = desk_data(a.seed)
    res = run_desk(data, T=a.T, steps=a.steps, batch=a.batch, lr=a.lr, no_maps=a.no_maps,
                   sample_steps=a.sample_steps, eta=a.eta, log=print)
    summary = {
        "seed": a.seed, "steps": a.steps, "lr": a.lr, "no_maps": a.no_maps,
        "sample_steps": a.sample_steps, "eta": a.eta,
        "lead_loss": res.lead, "trail_loss": res.trail, "loss_ratio": res.loss_ratio,
        "test_mae": res.test_mae, "mean_image_mae": res.baseline_mae,
        "improvement": res.improvement,
        "train_seconds": res.train_seconds, "sample_seconds": res.sample_seconds,
    }
    print(json.dumps(summary, indent=2))
    if a.out:
        with open(a.out, "w") as f:
            json.dump(summary, f, indent=2)


if __name__ == "__main__":
    main()
