import json
import subprocess
import sys

import numpy as np
import pytest

from spikegrid import io
from spikegrid.cli import main
from spikegrid.snn.network import SnnModel
from spikegrid.snn.train import TrainingBatch

SHORT = ["--set", "duration=0.1", "--set", "preroll=0.1", "--no-figures"]


@pytest.fixture(autouse=True)
def out_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SPIKEGRID_OUT", str(tmp_path / "out"))
    return tmp_path / "out"


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["replay", "--scenario", "no_such_scenario"],
    ["replay", "--scenario", "steady", "--set", "sampling.nw=5"],
    ["replay", "--scenario", "steady", "--set", "novalue"],
    ["replay", "--scenario", "steady", "--jobs", "0"],
    ["replay", "--scenario", "steady", "--checkpoint", "/nonexistent.ckpt"],
    ["replay", "--scenario", "steady", "--controller", "snn"],
    ["train", "--dataset", "/nonexistent"],
])
def test_validation_errors_exit_2(argv):
    assert main(argv) == 2


def test_replay_writes_bundle_under_env_dir(out_env):
    assert main(["replay", "--scenario", "steady", *SHORT]) == 0
    man = json.loads((out_env / "replay" / "steady" / "manifest.json").read_text())
    assert man["controller"] == "vsg_direct"
    assert len(man["content_hash"]) == 64


def test_mismatched_checkpoint_exit_2(tmp_path):
    ck = tmp_path / "m.ckpt"
    io.save_checkpoint(SnnModel.build(sizes=(4, 8, 3), dt=1e-5), ck)
    assert main(["replay", "--scenario", "steady", "--checkpoint", str(ck), *SHORT]) == 2


def test_generate_steady_warns_empty_dataset(out_env, caplog):
    assert main(["generate", "--scenario", "steady", *SHORT]) == 0
    man = json.loads((out_env / "generate" / "steady" / "dataset" / "manifest.json").read_text())
    assert man["n_segments"] == 0
    assert "empty" in caplog.text.lower() or "no active" in caplog.text.lower()


def fake_dataset(path):
    rng = np.random.default_rng(0)
    segs = [{"batch": TrainingBatch((rng.random((300, 6)) < 0.4).astype(float),
                                    rng.normal(0, 0.3, (300, 3)), 1e-5)}]
    io.save_dataset(segs, path, {"dt": 1e-5, "scenario": "fake", "config": {}})


def test_train_missing_target_exit_4(tmp_path):
    fake_dataset(tmp_path / "ds")
    ck = tmp_path / "m.ckpt"
    code = main(["train", "--dataset", str(tmp_path / "ds"), "--checkpoint", str(ck),
                 "--set", "train.sizes=[6, 16, 3]", "--set", "train.epochs=1",
                 "--set", "train.chunk=100", "--set", "train.target_mse=1e-12", "--no-figures"])
    assert code == 4
    assert io.load_checkpoint(ck).sizes == (6, 16, 3)


def test_energy_report(out_env):
    assert main(["energy", "--no-figures"]) == 0
    text = (out_env / "energy" / "report" / "table1.csv").read_text()
    assert text.startswith("architecture") and text.count("True") == 3


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "spikegrid.cli", "selftest"], capture_output=True,
                       text=True, timeout=120)
    assert r.returncode == 0
