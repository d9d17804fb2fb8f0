"""Write PGM previews of a CLI work directory: source, target, prediction and maps for a few test images.

    python3 scripts/export_pgm.py --workdir runs/demo --count 4
"""

import argparse
import json
from pathlib import Path

from cpdm.core import load_tensor
from cpdm.datagen import load_dataset, write_pgm


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workdir", required=True)
    p.add_argument("--count", type=int, default=4)
    a = p.parse_args()

    root = Path(a.workdir)
    out = root / "preview"
    out.mkdir(exist_ok=True)
    samples = load_dataset(root / "data")
    pred = load_tensor(root / "samples" / "pred.cpdt")
    test = json.loads((root / "samples" / "indices.json").read_text())["test"]
    mu = load_tensor(root / "maps" / "attenuation.cpdt")
    for k, i in enumerate(test[: a.count]):
        s = samples[i]
        write_pgm(s.y, out / f"{i:05d}_ct.pgm")
        write_pgm(s.x0, out / f"{i:05d}_pet.pgm")
        write_pgm(pred[k], out / f"{i:05d}_pred.pgm")
        write_pgm(s.truth_mask, out / f"{i:05d}_mask.pgm", 0.0, 1.0)
        write_pgm(mu[i], out / f"{i:05d}_mu.pgm", 0.0, 1.0)
    print(f"wrote previews to {out}")


if __name__ == "__main__":
    main()
