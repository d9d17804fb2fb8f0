import csv
import io
import json

import pytest

from cpdm.cli import main
from cpdm.config import RunConfig, load_config
from cpdm.core import load_tensor
from cpdm.errors import ConfigError

SMALL = ["--seed", "3", "--n-studies", "10", "--pairs-per-study", "2", "--image-size", "16",
         "--T", "10", "--train-steps", "4", "--steps", "3", "--batch", "4", "--seg-steps", "2"]


def run(*args):
    return main(list(args))


def test_schedule_dump(capsys):
    assert run("schedule-dump", "--T", "4", "--s-var", "1") == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 5
    r2 = rows[2]
    assert float(r2["delta_t"]) == 0.5 and float(r2["c_eps"]) == pytest.approx(0.5)
    assert list(r2) == ["t", "m_t", "delta_t", "c_x", "c_y", "c_eps", "tilde_delta"]


def test_usage_and_config_exit_codes(tmp_path, capsys):
    assert run("frobnicate") == 2
    assert run("schedule-dump", "--T", "1") == 3
    assert run("schedule-dump", "--loss", "l3") == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("schedule-dump", "--config", str(bad)) == 3
    assert run("train", "--workdir", str(tmp_path / "nothing")) == 3
    assert run("schedule-dump", "--T", "4", "--steps", "0") == 3


def test_config_file_env_and_flags(tmp_path, monkeypatch):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"T": 50, "lr": 0.01, "ema": {"start": 5}}))
    monkeypatch.setenv("CPDM_CONFIG", str(p))
    cfg = load_config(None, {"lr": 0.5, "sample_steps": 20})
    assert (cfg.T, cfg.lr, cfg.ema.start, cfg.ema.decay, cfg.sample_steps) == (50, 0.5, 5, 0.995, 20)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nonsense": 1})


def test_default_hyperparameters():
    cfg = RunConfig()
    assert (cfg.T, cfg.sample_steps, cfg.lr, cfg.batch) == (1000, 200, 1e-4, 16)
    assert (cfg.pet_max, cfg.ct_max, cfg.ema.decay) == (2**15 - 1, 2**11 - 1, 0.995)
    assert cfg.split == (0.8, 0.1, 0.1) and cfg.intercept == -1024.0 and cfg.slope == 1.0


def _pipeline(root):
    for cmd in ("gen-data", "make-maps", "train-seg", "train", "sample", "eval"):
        assert run(cmd, "--workdir", str(root), *SMALL) == 0, cmd
    return (root / "eval" / "report.json").read_bytes()


def test_pipeline_end_to_end(tmp_path):
    a = _pipeline(tmp_path / "a")
    root = tmp_path / "a"
    for d in ("data", "maps", "seg", "model", "samples", "eval"):
        cfg = json.loads((root / d / "resolved_config.json").read_text())
        assert cfg["seed"] == 3 and cfg["T"] == 10
    pred = load_tensor(root / "samples" / "pred.cpdt")
    idx = json.loads((root / "samples" / "indices.json").read_text())
    assert pred.shape == (len(idx["test"]), 16, 16)
    assert idx["grid"] == [10, 6, 1]
    rep = json.loads(a)
    assert set(rep["aggregate"]) >= {"mae", "psnr_db", "ssim", "iou", "n"}
    assert str(tmp_path) not in a.decode()
    assert (root / "eval" / "report.csv").exists()
    # segmenter attention can be selected for sampling
    assert run("sample", "--workdir", str(root), *SMALL, "--map-source", "segmenter") == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_failure_exit_code(tmp_path):
    root = tmp_path / "w"
    assert run("gen-data", "--workdir", str(root), *SMALL) == 0
    assert run("make-maps", "--workdir", str(root), *SMALL) == 0
    assert run("train", "--workdir", str(root), *SMALL, "--lr", "1e300") == 4
