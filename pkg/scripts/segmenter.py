"""Train the attention-map segmenter on the desk dataset and report validation IoU per checkpoint.

    python3 scripts/segmenter.py --seed 1 --steps 600
"""

import argparse

from cpdm.core import Prng
from cpdm.experiments import desk_data
from cpdm.guidance import SegmenterConfig, train_segmenter


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--eval-every", type=int, default=50)
    a = p.parse_args()

    data = desk_data(a.seed)
    ct, mask = data.arrays("y"), data.arrays("truth_mask")
    res = train_segmenter(ct[data.train], mask[data.train], ct[data.val], mask[data.val],
                          Prng(a.seed, "segmenter"),
                          SegmenterConfig(steps=a.steps, lr=a.lr, eval_every=a.eval_every), log=print)
    print(f"best validation IoU {res.best_iou:.4f} at step {res.best_step}")


if __name__ == "__main__":
    main()
