"""Command-line driver for the experiment lifecycle.

Every command works inside ``--workdir`` and reads only files written by
earlier commands::

    data/     dataset directory, split.json
    maps/     attenuation.cpdt, attention_truth.cpdt
    seg/      segmenter checkpoint; writes maps/attention_segmenter.cpdt
    model/    denoiser checkpoint, losses.csv
    samples/  pred.cpdt (test split), attention.cpdt, indices.json
    eval/     report.json, report.csv

Each artifact directory gets a ``resolved_config.json``.
Exit codes: 0 success, 2 usage, 3 configuration/input, 4 training failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from cpdm.bridge import LossConfig, SamplerConfig
from cpdm.config import RunConfig, load_config
from cpdm.core import Prng, load_tensor, save_tensor
from cpdm.datagen import SplitSpec, gen_dataset, load_dataset, make_split, save_dataset, stack
from cpdm.denoiser.net import NetConfig, load_checkpoint, save_checkpoint
from cpdm.denoiser.optim import EmaConfig
from cpdm.errors import CpdmError, TrainingError
from cpdm.guidance import LacTable, SegmenterConfig, attenuation_map, predict_masks, train_segmenter
from cpdm.metrics import EvalReport
from cpdm.schedule import build_schedule, consecutive_table
from cpdm.training import MapSet, TrainConfig, sample_set, train_denoiser

EXIT_USAGE, EXIT_CONFIG, EXIT_TRAINING = 2, 3, 4

# flag -> config key
FLAGS = {
    "seed": int, "T": int, "s_var": float, "image_size": int, "n_studies": int,
    "pairs_per_study": int, "sample_steps": int, "eta": float, "loss": str, "weighting": str,
    "lr": float, "batch": int, "train_steps": int, "map_source": str, "lac_table": str,
    "seg_steps": int, "sample_batch": int,
}
ALIASES = {"sample_steps": ["--steps"]}


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


class Run:
    def __init__(self, workdir, cfg: RunConfig):
        self.root = Path(workdir)
        self.cfg = cfg

    def dir(self, name) -> Path:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        (d / "resolved_config.json").write_text(self.cfg.dumps())
        return d

    def need(self, rel) -> Path:
        p = self.root / rel
        if not p.exists():
            raise FileNotFoundError(f"missing input {rel} under the work directory")
        return p

    def split(self) -> dict:
        return json.loads(self.need("data/split.json").read_text())

    def dataset(self):
        return load_dataset(self.need("data"))

    def map_set(self, samples, idx, attention_file="attention_truth.cpdt") -> MapSet:
        att = load_tensor(self.need(f"maps/{attention_file}"))[idx]
        mu = load_tensor(self.need("maps/attenuation.cpdt"))[idx]
        sub = [samples[i] for i in idx]
        ms = MapSet(stack(sub, "x0"), stack(sub, "y"), att, mu)
        return ms.without_maps() if self.cfg.no_maps else ms


def cmd_gen_data(run: Run, args):
    cfg = run.cfg
    d = run.dir("data")
    samples = gen_dataset(cfg.seed, cfg.n_studies, cfg.pairs_per_study, cfg.image_size)
    save_dataset(samples, d)
    tr, va, te = make_split([s.study_id for s in samples], SplitSpec(*cfg.split),
                            Prng(cfg.seed, "split"))
    (d / "split.json").write_text(json.dumps({"train": tr, "val": va, "test": te}))
    _log(f"wrote {len(samples)} pairs ({len(tr)}/{len(va)}/{len(te)})")


def cmd_make_maps(run: Run, args):
    cfg = run.cfg
    samples = run.dataset()
    table = LacTable.load(cfg.lac_table) if cfg.lac_table else LacTable()
    d = run.dir("maps")
    mu = np.stack([attenuation_map(s.raw_ct, cfg.slope, cfg.intercept, table, cfg.slice_thickness_cm)
                   for s in samples])
    save_tensor(mu, d / "attenuation.cpdt")
    save_tensor(stack(samples, "truth_mask"), d / "attention_truth.cpdt")
    (d / "lac_table.json").write_text(json.dumps(table.to_json(), indent=2))
    _log(f"wrote maps for {len(samples)} images")


def cmd_train_seg(run: Run, args):
    cfg = run.cfg
    samples, split = run.dataset(), run.split()
    ct, mask = stack(samples, "y"), stack(samples, "truth_mask")
    tr, va = split["train"], split["val"]
    res = train_segmenter(ct[tr], mask[tr], ct[va], mask[va], Prng(cfg.seed, "segmenter"),
                          SegmenterConfig(steps=cfg.seg_steps, batch=cfg.batch, lr=cfg.seg_lr,
                                          eval_every=cfg.seg_eval_every), log=_log)
    d = run.dir("seg")
    save_checkpoint(res.params, d / "segmenter", cfg.seg_lr)
    (d / "history.json").write_text(json.dumps(
        {"best_iou": res.best_iou, "best_step": res.best_step, "history": res.history}, indent=2))
    save_tensor(predict_masks(res.params, ct), run.dir("maps") / "attention_segmenter.cpdt")
    _log(f"best val IoU {res.best_iou:.4f} at step {res.best_step}")


def cmd_train(run: Run, args):
    cfg = run.cfg
    samples, split = run.dataset(), run.split()
    data = run.map_set(samples, split["train"])
    sched = build_schedule(cfg.T, cfg.s_var)
    tcfg = TrainConfig(steps=cfg.train_steps, batch=cfg.batch, lr=cfg.lr,
                       loss=LossConfig(cfg.loss, cfg.weighting),
                       ema=EmaConfig(**vars(cfg.ema)), plateau=cfg.plateau, log_every=100)
    res = train_denoiser(sched, data, Prng(cfg.seed, "train"), tcfg, NetConfig(T=cfg.T), log=_log)
    d = run.dir("model")
    save_checkpoint(res.params, d / "denoiser", res.lrs[-1])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "lr"])
    for i, (l, r) in enumerate(zip(res.losses, res.lrs), 1):
        w.writerow([i, repr(float(l)), repr(float(r))])
    (d / "losses.csv").write_text(buf.getvalue())


def cmd_sample(run: Run, args):
    cfg = run.cfg
    params, meta = load_checkpoint(run.need("model/denoiser.json").with_suffix(""))
    if params.config.T != cfg.T:
        raise CpdmError(f"checkpoint T={params.config.T} differs from config T={cfg.T}")
    samples, split = run.dataset(), run.split()
    te = split["test"]
    att_file = "attention_truth.cpdt" if cfg.map_source == "truth" else "attention_segmenter.cpdt"
    ms = run.map_set(samples, te, att_file)
    sched = build_schedule(cfg.T, cfg.s_var)
    scfg = SamplerConfig(cfg.sample_steps, cfg.eta)
    pred = sample_set(sched, params, ms.y, ms.attention, ms.attenuation, scfg,
                      Prng(cfg.seed, "sample"), batch=cfg.sample_batch)
    d = run.dir("samples")
    save_tensor(pred, d / "pred.cpdt")
    save_tensor(ms.attention, d / "attention.cpdt")
    (d / "indices.json").write_text(json.dumps({"test": te, "grid": scfg.grid(cfg.T)}))
    _log(f"sampled {len(te)} images with {len(scfg.grid(cfg.T))} model evaluations each")


def cmd_eval(run: Run, args):
    cfg = run.cfg
    pred = load_tensor(run.need("samples/pred.cpdt"))
    att = load_tensor(run.need("samples/attention.cpdt"))
    te = json.loads(run.need("samples/indices.json").read_text())["test"]
    samples = run.dataset()
    report = EvalReport(max_value=cfg.pet_max)
    for k, i in enumerate(te):
        s = samples[i]
        report.add(i, pred[k], s.x0, att[k], s.truth_mask, study_id=s.study_id)
    d = run.dir("eval")
    (d / "report.json").write_text(report.to_json())
    (d / "report.csv").write_text(report.to_csv())
    agg = report.aggregate()
    _log("aggregate " + " ".join(f"{k}={v}" for k, v in agg.items()))


def cmd_schedule_dump(run: Run, args):
    rows = consecutive_table(build_schedule(run.cfg.T, run.cfg.s_var))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


COMMANDS = {
    "gen-data": cmd_gen_data, "make-maps": cmd_make_maps, "train-seg": cmd_train_seg,
    "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
    "schedule-dump": cmd_schedule_dump,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="experiment root directory")
    common.add_argument("--config", default=None, help="JSON config (default: $CPDM_CONFIG)")
    for key, typ in FLAGS.items():
        names = ["--" + key.replace("_", "-")] + ALIASES.get(key, [])
        common.add_argument(*names, dest=key, type=typ, default=None)
    common.add_argument("--no-maps", dest="no_maps", action="store_const", const=True, default=None,
                        help="replace guidance maps by constant 0.5 channels")
    common.add_argument("--no-ema", dest="ema.enabled", action="store_const", const=False, default=None)
    common.add_argument("--out", default=None, help="schedule-dump output file (default stdout)")
    p = argparse.ArgumentParser(prog="cpdm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    overrides = {k: v for k, v in vars(args).items()
                 if k in FLAGS or k in ("no_maps", "ema.enabled")}
    try:
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](Run(args.workdir, cfg), args)
    except TrainingError as e:
        _log(f"training error: {e}")
        return EXIT_TRAINING
    except (CpdmError, ValueError, FileNotFoundError, KeyError) as e:
        _log(f"error: {e}")
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
