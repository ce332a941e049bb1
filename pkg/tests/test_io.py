import json

import numpy as np
import pytest

from spikegrid.io import (
    CheckpointError, file_sha256, load_checkpoint, load_dataset, save_checkpoint, save_dataset,
)
from spikegrid.snn.network import SnnModel
from spikegrid.snn.train import TrainingBatch


def model():
    m = SnnModel.build(sizes=(6, 8, 3), dt=1e-5, tau_m=1e-3, seed=3)
    m.weights[-1] = np.random.default_rng(0).normal(size=m.weights[-1].shape)
    m.meta["scenario"] = "case1"
    return m


def test_checkpoint_round_trip(tmp_path):
    m = model()
    p = tmp_path / "m.ckpt"
    digest = save_checkpoint(m, p)
    assert digest == file_sha256(p)
    back = load_checkpoint(p)
    assert back.sizes == m.sizes and back.hidden == m.hidden and back.synapse == m.synapse
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, m.weights))
    assert back.meta["scenario"] == "case1"
    x = (np.random.default_rng(1).random((50, 6)) < 0.3).astype(float)
    assert np.array_equal(back.forward(x)[0], m.forward(x)[0])
    # saving twice is byte-identical
    save_checkpoint(back, tmp_path / "n.ckpt")
    assert file_sha256(tmp_path / "n.ckpt") == digest


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing"])
def test_corrupt_checkpoint_rejected(tmp_path, damage):
    p = tmp_path / "m.ckpt"
    save_checkpoint(model(), p)
    raw = bytearray(p.read_bytes())
    if damage == "magic":
        raw[0] ^= 0xFF
    elif damage == "truncate":
        raw = raw[:-8]
    else:
        raw += b"\0" * 8
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    segs = []
    for k, n in enumerate((13, 40)):
        b = TrainingBatch((rng.random((n, 6)) < 0.5).astype(float), rng.normal(size=(n, 3)),
                          1e-5, (np.arange(n) > 3).astype(float))
        segs.append({"batch": b, "converter": f"c{k}", "t_start": 0.1 * k, "t_end": 0.1 * k + 0.05})
    man = save_dataset(segs, tmp_path / "ds", {"dt": 1e-5, "scenario": "x"})
    assert man["n_segments"] == 2
    back, man2 = load_dataset(tmp_path / "ds")
    assert man2["scenario"] == "x"
    for s, b in zip(segs, back):
        assert np.array_equal(s["batch"].spikes, b.spikes)
        assert np.array_equal(s["batch"].target, b.target)
        assert np.array_equal(s["batch"].mask, b.mask)
    assert (tmp_path / "ds" / "segments.csv").read_text().count("\n") == 3


def test_dataset_checksum_and_binary_guard(tmp_path):
    b = TrainingBatch(np.full((5, 6), 0.5), np.zeros((5, 3)), 1e-5)
    with pytest.raises(ValueError):
        save_dataset([{"batch": b}], tmp_path / "bad", {"dt": 1e-5})
    ok = TrainingBatch(np.ones((5, 6)), np.zeros((5, 3)), 1e-5)
    save_dataset([{"batch": ok}], tmp_path / "ds", {"dt": 1e-5})
    man = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    man["segments"][0]["sha256"] = "0" * 64
    (tmp_path / "ds" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "ds")
