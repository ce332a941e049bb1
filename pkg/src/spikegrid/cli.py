"""Command line entry points: generate, train, replay, energy, selftest.

Exit codes: 0 ok, 2 invalid input, 3 divergence or instability, 4 a check
or acceptance threshold failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import io
from .energy import energy_rows, table1_rows, write_report
from .plant.scenario import (
    DEFAULTS, Scenario, apply_overrides, check_override_keys, deep_merge, load_scenario, parse_value,
)
from .plant.simulate import SimulationAborted, run_scenario
from .plant.traces import load_bundle, write_bundle
from .snn.network import SnnModel
from .snn.train import TrainingDiverged, split_batches, stack_batches, train

logger = logging.getLogger("spikegrid")

OUT_ENV = "SPIKEGRID_OUT"
EXIT_OK, EXIT_INVALID, EXIT_UNSTABLE, EXIT_FAILED = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    scenario: str | None = None
    controller: str | None = None
    checkpoint: str | None = None
    adapted: str | None = None
    out: str | None = None
    seed: int | None = None
    overrides: dict[str, Any] = field(default_factory=dict)
    figures: bool = True

    def load(self) -> Scenario:
        if self.scenario is None:
            raise CliError("--scenario is required")
        ov = dict(self.overrides)
        if self.seed is not None:
            ov["seed"] = int(self.seed)
        try:
            return load_scenario(self.scenario, ov or None)
        except (FileNotFoundError, ValueError, TypeError, KeyError) as e:
            raise CliError(f"invalid scenario {self.scenario!r}: {e}") from e


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "spikegrid-out"))


def _out_dir(cfg: RunConfig, verb: str, name: str) -> Path:
    return Path(cfg.out) if cfg.out else output_root() / verb / name


def parse_overrides(items: list[str] | None) -> dict[str, Any]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CliError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(value)
    return out


def _load_model(path: str | None) -> SnnModel | None:
    if path is None:
        return None
    try:
        return io.load_checkpoint(path)
    except FileNotFoundError as e:
        raise CliError(f"checkpoint not found: {path}") from e
    except (io.CheckpointError, ValueError, KeyError) as e:
        raise CliError(f"bad checkpoint {path}: {e}") from e


# ----------------------------------------------------------------------
# commands

def cmd_generate(cfg: RunConfig) -> dict:
    """Run the VSG reference controller and store the Active-interval dataset."""
    scn = cfg.load()
    out = _out_dir(cfg, "generate", scn.name)
    t0 = time.perf_counter()
    try:
        bundle = run_scenario(scn, "vsg_direct", record_dataset=True)
    except SimulationAborted as e:
        raise CliError(str(e), EXIT_UNSTABLE) from e
    segments = []
    for name, evs, segs in zip(bundle.conv_names, bundle.events, bundle.datasets):
        for k, b in enumerate(segs):
            seg = {"batch": b, "converter": name}
            if k < len(evs):
                seg.update(t_start=evs[k].t_start, t_end=evs[k].t_end)
            segments.append(seg)
    if not segments:
        logger.warning("scenario %s produced no Active interval: the dataset is empty", scn.name)
    manifest = io.save_dataset(segments, out / "dataset", {
        "dt": scn.dt, "scenario": scn.name, "config_hash": scn.hash(), "config": scn.config,
        "residual": bool(scn.config["snn"]["residual"]),
        "inputs": ["v_a", "v_b", "v_c", "i_a", "i_b", "i_c"], "outputs": ["m_a", "m_b", "m_c"],
    })
    trace_manifest = write_bundle(bundle, out / "traces")
    if cfg.figures:
        from .plotting import plot_traces
        plot_traces(bundle, out / "traces" / "traces.png")
    summary = {
        "scenario": scn.name, "out": str(out), "segments": len(segments),
        "shapes": [(e["input_shape"], e["target_shape"]) for e in manifest["segments"]],
        "unstable": bool(bundle.flags["unstable"]), "content_hash": trace_manifest["content_hash"],
        "seconds": time.perf_counter() - t0,
    }
    if bundle.flags["unstable"]:
        summary["exit"] = EXIT_UNSTABLE
    return summary


def fit_model(batches, dt: float, tcfg: dict, seed: int = 0):
    """Build, calibrate and train a network on dataset segments."""
    model = SnnModel.build(sizes=tuple(tcfg["sizes"]), dt=dt, tau_m=float(tcfg["tau_m"]), seed=seed)
    model.calibrate(stack_batches(batches)[0])
    warm = int(np.count_nonzero(batches[0].mask == 0))
    chunks = split_batches(batches, int(tcfg["chunk"]), warm) if tcfg.get("chunk") else batches
    result = train(model, chunks, epochs=int(tcfg["epochs"]), lr=float(tcfg["lr"]),
                   lr_final=tcfg.get("lr_final"), minibatch=tcfg.get("minibatch"), log_every=5)
    mse = result.model.loss(*stack_batches(batches))
    result.model.meta["dataset_mse"] = float(mse)
    return result, float(mse)


def cmd_train(cfg: RunConfig, dataset: str | None) -> dict:
    """Train on a dataset directory (or a scenario generated on the fly)."""
    t0 = time.perf_counter()
    if dataset is None:
        if cfg.scenario is None:
            raise CliError("train needs --dataset or --scenario")
        gen = cmd_generate(RunConfig(cfg.scenario, out=None if cfg.out is None else str(Path(cfg.out) / "generated"),
                                     seed=cfg.seed, overrides=cfg.overrides, figures=False))
        dataset = str(Path(gen["out"]) / "dataset")
    try:
        batches, man = io.load_dataset(dataset)
    except (FileNotFoundError, ValueError, KeyError) as e:
        raise CliError(f"cannot read dataset {dataset}: {e}") from e
    if not batches:
        raise CliError(f"dataset {dataset} is empty")
    try:
        check_override_keys(cfg.overrides)
    except ValueError as e:
        raise CliError(str(e)) from e
    conf = apply_overrides(deep_merge(DEFAULTS, man.get("config", {})), cfg.overrides)
    tcfg = conf["train"]
    seed = int(cfg.seed if cfg.seed is not None else conf.get("seed", 0))
    try:
        result, mse = fit_model(batches, float(man["dt"]), tcfg, seed)
    except TrainingDiverged as e:
        raise CliError(str(e), EXIT_UNSTABLE) from e
    name = man.get("scenario", "dataset")
    out = _out_dir(cfg, "train", name)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / f"{name}.ckpt"
    result.model.meta.update({"scenario": name, "dataset_config_hash": man.get("config_hash"),
                              "train": tcfg})
    digest = io.save_checkpoint(result.model, ckpt)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "losses.csv").open("w") as f:
        f.write("epoch,loss\n")
        for k, v in enumerate(result.losses):
            f.write(f"{k},{v:.10g}\n")
    if cfg.figures:
        from .plotting import plot_loss
        plot_loss(result.losses, out / "losses.png")
    summary = {"checkpoint": str(ckpt), "sha256": digest, "epochs": len(result.losses),
               "final_epoch_loss": result.final_loss, "dataset_mse": mse,
               "target_mse": tcfg.get("target_mse"), "seconds": time.perf_counter() - t0}
    if tcfg.get("target_mse") is not None and not mse < float(tcfg["target_mse"]):
        summary["exit"] = EXIT_FAILED
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default))
    return summary


def cmd_replay(cfg: RunConfig) -> dict:
    """Closed-loop run; snn when a checkpoint is given, else the VSG reference."""
    scn = cfg.load()
    controller = cfg.controller or ("snn" if cfg.checkpoint else "vsg_direct")
    model = _load_model(cfg.checkpoint)
    adapted = _load_model(cfg.adapted)
    if controller == "snn" and model is None:
        raise CliError("replay with the snn controller needs --checkpoint")
    t0 = time.perf_counter()
    try:
        bundle = run_scenario(scn, controller, models=model, adapted=adapted)
    except SimulationAborted as e:
        raise CliError(str(e), EXIT_UNSTABLE) from e
    except ValueError as e:
        raise CliError(str(e)) from e
    out = _out_dir(cfg, "replay", scn.name)
    extra = {"checkpoint_sha256": io.file_sha256(cfg.checkpoint) if cfg.checkpoint else None,
             "adapted_sha256": io.file_sha256(cfg.adapted) if cfg.adapted else None}
    manifest = write_bundle(bundle, out, extra)
    if cfg.figures:
        from .plotting import plot_traces
        plot_traces(bundle, out / "traces.png")
    metrics = manifest["metrics"]
    summary = {"scenario": scn.name, "controller": controller, "out": str(out),
               "content_hash": manifest["content_hash"], "metrics": metrics,
               "seconds": time.perf_counter() - t0}
    if bundle.flags["unstable"] and not metrics["thresholds"]["unstable"]:
        summary["exit"] = EXIT_UNSTABLE
    elif not metrics["passed"]:
        summary["exit"] = EXIT_FAILED
    return summary


def cmd_energy(cfg: RunConfig, traces: list[str], tolerance: float = 0.005) -> dict:
    """Reference powers recomputed from the tabulated counts, plus counts measured on bundles."""
    table = table1_rows()
    rows = []
    for r in table:
        err = max(_rel(r["P_on"], r["P_on_published"]), _rel(r["P_off"], r["P_off_published"]))
        rows.append({**r, "rel_error": err, "ok": err <= tolerance})
    out = _out_dir(cfg, "energy", "report")
    write_report(rows, out / "table1.csv")
    measured = []
    if traces:
        try:
            bundles = [load_bundle(p) for p in traces]
        except (FileNotFoundError, KeyError, ValueError) as e:
            raise CliError(f"cannot read traces: {e}") from e
        measured = energy_rows(bundles)
        write_report(measured, out / "measured.csv")
    if cfg.figures:
        from .plotting import plot_energy
        plot_energy(measured or table, out / "energy.png")
    summary = {"out": str(out), "table1": rows, "measured": measured}
    if not all(r["ok"] for r in rows):
        summary["exit"] = EXIT_FAILED
    return summary


def _rel(x: float, ref: float) -> float:
    if ref == 0:
        return abs(x)
    return abs(x - ref) / abs(ref)


def cmd_selftest(cfg: RunConfig) -> dict:
    from .selftest import run_checks
    results = run_checks()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    summary = {"checks": [{"name": n, "ok": ok, "detail": d} for n, ok, d in results]}
    if not all(ok for _, ok, _ in results):
        summary["exit"] = EXIT_FAILED
    return summary


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikegrid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("--scenario", action="append",
                            help="scenario file or built-in name; repeat to run several")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<verb>/<name>)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", dest="overrides",
                        help="override a dotted config key, e.g. sampling.n_w=2000")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for several scenarios")
        sp.add_argument("--no-figures", action="store_true")

    g = sub.add_parser("generate", help="record a training dataset with the VSG reference")
    common(g)
    t = sub.add_parser("train", help="train a network on a dataset")
    common(t)
    t.add_argument("--dataset", help="dataset directory from generate")
    t.add_argument("--checkpoint", help="checkpoint file to write")
    r = sub.add_parser("replay", help="closed-loop run, optionally under the network")
    common(r)
    r.add_argument("--checkpoint")
    r.add_argument("--adapted", help="checkpoint switched in after a line outage")
    r.add_argument("--controller", choices=["vsg_direct", "snn"])
    e = sub.add_parser("energy", help="reference power table and measured activity")
    common(e, scenario=False)
    e.add_argument("--traces", action="append", default=[], help="replay output directory")
    s = sub.add_parser("selftest", help="fast internal consistency checks")
    common(s, scenario=False)
    return p


def _dispatch(verb: str, cfg: RunConfig, args_dict: dict) -> dict:
    if verb == "generate":
        return cmd_generate(cfg)
    if verb == "train":
        return cmd_train(cfg, args_dict.get("dataset"))
    if verb == "replay":
        return cmd_replay(cfg)
    if verb == "energy":
        return cmd_energy(cfg, args_dict.get("traces") or [])
    return cmd_selftest(cfg)


def _worker(verb: str, cfg: RunConfig, args_dict: dict) -> dict:
    try:
        return _dispatch(verb, cfg, args_dict)
    except CliError as e:
        return {"error": str(e), "exit": e.code}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(args.overrides)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    scenarios = getattr(args, "scenario", None) or [None]
    extra = {k: getattr(args, k) for k in ("dataset", "traces") if hasattr(args, k)}
    cfgs = []
    for i, name in enumerate(scenarios):
        out = args.out
        if out and len(scenarios) > 1:
            out = str(Path(out) / Path(name).stem)
        cfgs.append(RunConfig(name, getattr(args, "controller", None), getattr(args, "checkpoint", None),
                              getattr(args, "adapted", None), out, args.seed, overrides,
                              not args.no_figures))
    if len(cfgs) > 1 and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_worker, [args.verb] * len(cfgs), cfgs, [extra] * len(cfgs)))
    else:
        results = [_worker(args.verb, c, extra) for c in cfgs]
    code = EXIT_OK
    for res in results:
        if "error" in res:
            print(f"error: {res['error']}", file=sys.stderr)
        print(json.dumps(res, indent=2, default=_json_default))
        code = max(code, int(res.get("exit", EXIT_OK)))
    return code


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


if __name__ == "__main__":
    sys.exit(main())
