"""Datasets of training segments and model checkpoints on disk.

Checkpoint layout: ``b"SPKGRID\\0"`` magic, little-endian ``uint32`` format
version, ``uint32`` header length, a UTF-8 JSON header describing the model
and its arrays, then the weight matrices as raw little-endian float64 in
header order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .snn.lif import LifParams
from .snn.network import SnnModel, SynapseParams
from .snn.train import TrainingBatch

MAGIC = b"SPKGRID\0"
CHECKPOINT_VERSION = 1
DATASET_VERSION = 1


class CheckpointError(ValueError):
    pass


def _lif_dict(p: LifParams) -> dict:
    return {k: getattr(p, k) for k in ("tau_m", "v_th", "g_l", "v_rest", "v_reset", "dt")}


def save_checkpoint(model: SnnModel, path: str | Path) -> str:
    """Write ``model``; returns the SHA-256 of the file."""
    header = {
        "sizes": list(model.sizes),
        "hidden": _lif_dict(model.hidden),
        "output": _lif_dict(model.output),
        "synapse": {"tau_rise": model.synapse.tau_rise, "tau_decay": model.synapse.tau_decay},
        "slope": model.slope,
        "seed": model.seed,
        "meta": _plain(model.meta),
        "arrays": [{"shape": list(w.shape), "dtype": "<f8"} for w in model.weights],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for w in model.weights:
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
    return file_sha256(path)


def load_checkpoint(path: str | Path) -> SnnModel:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    off = len(MAGIC)
    version, n = struct.unpack_from("<II", raw, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += 8
    header = json.loads(raw[off: off + n].decode())
    off += n
    weights = []
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        end = off + 8 * count
        if end > len(raw):
            raise CheckpointError("truncated checkpoint")
        weights.append(np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).copy())
        off = end
    if off != len(raw):
        raise CheckpointError("trailing bytes in checkpoint")
    return SnnModel(
        tuple(header["sizes"]), weights, LifParams(**header["hidden"]),
        LifParams(**header["output"]), SynapseParams(**header["synapse"]),
        header["slope"], header["seed"], header["meta"],
    )


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


# ----------------------------------------------------------------------
# datasets

def save_dataset(segments: list[dict], out: str | Path, info: dict | None = None) -> dict:
    """Store training segments; each item holds ``batch`` plus descriptive keys.

    Spikes are bit-packed, targets and masks stored as float64. Returns the
    manifest written next to the arrays.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, seg in enumerate(segments):
        b: TrainingBatch = seg["batch"]
        name = f"segment_{k:04d}.npz"
        bits = b.spikes.astype(bool)
        if not np.array_equal(bits, b.spikes):
            raise ValueError("segment spikes must be binary")
        np.savez(out / name, spikes=np.packbits(bits, axis=0), target=b.target,
                 mask=b.mask, n_steps=np.int64(b.n_steps))
        entries.append({
            "file": name,
            "sha256": file_sha256(out / name),
            "n_steps": b.n_steps,
            "input_shape": list(b.spikes.shape),
            "target_shape": list(b.target.shape),
            **{key: _plain(v) for key, v in seg.items() if key != "batch"},
        })
    manifest = {"format": "spikegrid-dataset", "version": DATASET_VERSION,
                "segments": entries, "n_segments": len(entries), **_plain(info or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    with (out / "segments.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["file", "converter", "t_start", "t_end", "n_steps"])
        for e in entries:
            w.writerow([e["file"], e.get("converter", ""), e.get("t_start", ""),
                        e.get("t_end", ""), e["n_steps"]])
    return manifest


def load_dataset(path: str | Path) -> tuple[list[TrainingBatch], dict]:
    path = Path(path)
    man = json.loads((path / "manifest.json").read_text())
    if man.get("format") != "spikegrid-dataset":
        raise ValueError(f"{path} is not a dataset directory")
    dt = float(man["dt"])
    out = []
    for e in man["segments"]:
        if file_sha256(path / e["file"]) != e["sha256"]:
            raise ValueError(f"{e['file']}: checksum does not match the manifest")
        with np.load(path / e["file"]) as z:
            n = int(z["n_steps"])
            spikes = np.unpackbits(z["spikes"], axis=0, count=n).astype(float)
            out.append(TrainingBatch(spikes, z["target"], dt, z["mask"]))
    return out, man
