"""Command-line entry point: ``emdnerf <command> ...``.

Commands: gen-scene, train, eval, ablate, uncertainty. Exit codes are 0 on
success, 2 for configuration errors, 3 for data errors and 4 for numerical
divergence. ``EMDNERF_WORKERS`` sets the number of ablation worker
processes (default 1).
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
import argparse
import csv
import json
import multiprocessing
import os
from pathlib import Path
import subprocess
import sys
import time

import numpy as np

from . import __version__
from .config import dump_config, load_config, parse_value, read_entries, parse_entries
from .errors import (ConfigError, ConvergenceError, DataError, DivergenceError, GenerationError, InputError,
                     NumericalError)
from .metrics import DEPTH_KEYS, aligned_error_map, evaluate_depths, write_report
from .objective import DEPTH_LOSSES
from .pfm import write_pfm
from .scenesim import CorruptionSpec, SceneSpec, default_spec, load_dataset, make_scene, save_dataset
from .trainer import (PROFILES, TrainConfig, blob_region_rmse, evaluate_pipeline, load_checkpoint, render_views,
                      save_checkpoint, train, write_log, Pipeline)
from .uncertainty import (DEFAULT_THRESHOLDS, default_tau, load_trajectory_pairs, threshold_curve,
                          trajectory_uncertainty)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
WORKERS_ENV = "EMDNERF_WORKERS"
MANIFEST_NAME = "manifest.json"
CURVE_COLUMNS = ("threshold", "fraction_above", "error_above", "error_below")
ABLATION_COLUMNS = ("loss", "uncertainty", "seeds", "status") + DEPTH_KEYS + ("psnr", "blob_rmse", "rmse_per_seed")


# ------------------------------------------------------------------ manifests

@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    version: str
    dataset: str | None
    outputs: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def write(self, run_dir):
        path = Path(run_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path):
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise DataError(f"unreadable run manifest {path}: {exc}") from exc


def version_stamp():
    stamp = __version__
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            stamp += "+g" + rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return stamp


def _make_dir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {path}: {exc}") from exc
    return Path(path)


# ------------------------------------------------------------------ gen-scene

def read_scene_file(path):
    """A scene spec JSON: plain scene keys, or ``{"scene": .., "corruption": ..}``."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"spec {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"spec {path} must hold a JSON object")
    wrapped = "scene" in data or "corruption" in data
    scene = data.get("scene", {}) if wrapped else data
    extras = {k: v for k, v in data.items() if k not in ("scene", "corruption")} if wrapped else {}
    unknown = set(extras) - {"trajectory_steps", "hypotheses"}
    if unknown:
        raise ConfigError(f"unknown spec keys: {sorted(unknown)}")
    try:
        base = default_spec().to_dict()
        spec = SceneSpec.from_dict({**base, **scene})
        corr = data.get("corruption", {}) if wrapped else {}
        known = {f.name for f in fields(CorruptionSpec)}
        if set(corr) - known:
            raise InputError(f"unknown corruption keys: {sorted(set(corr) - known)}")
        corruption = CorruptionSpec(**corr)
    except TypeError as exc:
        raise ConfigError(f"invalid spec {path}: {exc}") from exc
    return spec, corruption, int(extras.get("trajectory_steps", 20)), int(extras.get("hypotheses", 1))


def cmd_gen_scene(out, seed, spec_path=None):
    start = time.time()
    if spec_path is not None:
        spec, corruption, T, hypotheses = read_scene_file(spec_path)
    else:
        spec, corruption, T, hypotheses = default_spec(), CorruptionSpec(), 20, 1
    dataset, trajectories = make_scene(spec, seed=seed, corruption=corruption, T=T, hypotheses=hypotheses)
    out = _make_dir(out)
    save_dataset(dataset, out, trajectories)
    print(f"wrote {len(dataset.views)} views ({len(dataset.train_ids)} train, {len(dataset.test_ids)} test) to {out}")
    return dataset


# ------------------------------------------------------------------ train / eval

def run_training(data_dir, cfg, out_dir, evaluate=False):
    """Train one config into ``out_dir``; returns the manifest."""
    start = time.time()
    dataset = load_dataset(data_dir)
    out = _make_dir(out_dir)
    (out / "config.cfg").write_text(dump_config(cfg))
    manifest = RunManifest(command="train", seed=cfg.seed, config=cfg.to_dict(), version=version_stamp(),
                           dataset=str(Path(data_dir).resolve()))
    manifest.outputs = {"config": "config.cfg", "checkpoint": "checkpoint.ckpt", "log": "loss.csv"}
    if cfg.steps == 0:
        import torch

        torch.manual_seed(cfg.seed)
        pipe = Pipeline(cfg)
        log = []
    else:
        result = train(cfg, dataset=dataset, out_dir=out)
        pipe, log = result.pipeline, result.log
    save_checkpoint(out / "checkpoint.ckpt", pipe, cfg, len(log))
    write_log(out / "loss.csv", log)
    manifest.timing = {"train_seconds": round(time.time() - start, 3)}
    if evaluate:
        eval_start = time.time()
        summary = evaluate_run(pipe, cfg, dataset, out)
        manifest.outputs.update({"metrics_csv": "metrics.csv", "metrics_json": "metrics.json"})
        manifest.timing["eval_seconds"] = round(time.time() - eval_start, 3)
        manifest.outputs["summary"] = summary
    manifest.write(out)
    return manifest


def evaluate_run(pipe, cfg, dataset, out, split="test"):
    """Write metrics.csv / metrics.json and rendered depths; returns the summary dict."""
    ids = dataset.test_ids if split == "test" else dataset.train_ids
    renders = render_views(pipe, cfg, dataset, ids)
    report = evaluate_pipeline(pipe, cfg, dataset, split, renders)
    summary = report.summary()
    train_renders = render_views(pipe, cfg, dataset, dataset.train_ids) if split == "test" else renders
    summary["blob_rmse"] = blob_region_rmse(dataset, train_renders)
    summary["prior_scale"] = pipe.scale.value
    out = _make_dir(out)
    write_report(report, out / "metrics.csv", out / "metrics.json")
    with open(out / "metrics.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    depth_dir = _make_dir(out / "render_depth")
    for i, (_, depth) in renders.items():
        write_pfm(depth_dir / f"{i:04d}.pfm", depth)
    return summary


def cmd_eval(checkpoint, data_dir, out=None, split="test"):
    pipe, cfg, _ = load_checkpoint(checkpoint)
    dataset = load_dataset(data_dir)
    out = Path(out) if out is not None else Path(checkpoint).parent
    summary = evaluate_run(pipe, cfg, dataset, out, split)
    print(" ".join(f"{k}={summary[k]:.6g}" for k in ("abs_rel", "rmse", "psnr", "blob_rmse")))
    return summary


# ------------------------------------------------------------------ ablation

GRID_KEYS = ("grid_loss", "grid_uncertainty", "grid_seeds")


def read_grid(path, overrides=None):
    """Split a grid file into the shared config and the cell lists.

    ``grid_loss`` and ``grid_uncertainty`` are comma lists; ``grid_seeds``
    lists the shared seeds (default: the config seed). Every other key is a
    config key shared by all cells.
    """
    entries = read_entries(path) if path is not None else []
    grid = {k: v for k, v in entries if k in GRID_KEYS}
    profile, values = parse_entries([(k, v) for k, v in entries if k not in GRID_KEYS])
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    losses = [s.strip() for s in grid.get("grid_loss", ",".join(DEPTH_LOSSES)).split(",") if s.strip()]
    bad = set(losses) - set(DEPTH_LOSSES)
    if bad:
        raise ConfigError(f"unknown grid losses {sorted(bad)}")
    u_modes = [parse_value("uncertainty", s.strip()) for s in grid.get("grid_uncertainty", "on,off").split(",")
               if s.strip()]
    if "grid_seeds" in grid:
        try:
            seeds = [int(s) for s in grid["grid_seeds"].split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad grid_seeds {grid['grid_seeds']!r}") from exc
    elif "seed" in values:
        seeds = [values["seed"]]
    else:
        raise ConfigError("grid needs grid_seeds or a seed")
    if not losses or not u_modes or not seeds:
        raise ConfigError("empty ablation grid")
    base = {**PROFILES[profile], **values}
    cells = []
    for loss in losses:
        for u in u_modes:
            cfgs = [TrainConfig(**{**base, "loss": loss, "uncertainty": u, "seed": s}).validate() for s in seeds]
            cells.append((loss, u, cfgs))
    return cells


def cell_name(loss, u, seed):
    return f"{loss}-u{'on' if u else 'off'}-s{seed}"


def _run_cell(job):
    data_dir, cfg_dict, out_dir = job
    cfg = TrainConfig(**cfg_dict)
    try:
        manifest = run_training(data_dir, cfg, out_dir, evaluate=True)
    except (DivergenceError, NumericalError, ConvergenceError, DataError, ConfigError, InputError) as exc:
        return {"status": f"failed: {type(exc).__name__}: {exc}"}
    return {"status": "ok", **manifest.outputs["summary"]}


def worker_count():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def run_ablation(data_dir, cells, out_dir, workers=1):
    """Train every (cell, seed) run and write ``ablation.csv``; returns its rows."""
    if not Path(data_dir, "scene.json").is_file():
        raise DataError(f"no dataset at {data_dir}")
    out = _make_dir(out_dir)
    jobs = [(str(data_dir), cfg.to_dict(), str(out / "runs" / cell_name(loss, u, cfg.seed)))
            for loss, u, cfgs in cells for cfg in cfgs]
    if workers == 1:
        results = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers, mp_context=multiprocessing.get_context("spawn")) as pool:
            results = list(pool.map(_run_cell, jobs))
    rows, k = [], 0
    for loss, u, cfgs in cells:
        res = results[k:k + len(cfgs)]
        k += len(cfgs)
        ok = [r for r in res if r["status"] == "ok"]
        failed = len(res) - len(ok)
        if not ok:
            status = "failed: " + "; ".join(r["status"] for r in res)
        else:
            status = "ok" if not failed else f"partial: {failed}/{len(res)} runs failed"
        row = {"loss": loss, "uncertainty": "on" if u else "off", "seeds": ";".join(str(c.seed) for c in cfgs),
               "status": status}
        for key in DEPTH_KEYS + ("psnr", "blob_rmse"):
            row[key] = repr(float(np.median([r[key] for r in ok]))) if ok else "nan"
        row["rmse_per_seed"] = ";".join(repr(float(r["rmse"])) if r["status"] == "ok" else "nan" for r in res)
        rows.append(row)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ABLATION_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_ablate(data_dir, grid_path, out, overrides=None):
    start = time.time()
    cells = read_grid(grid_path, overrides)
    workers = worker_count()
    rows = run_ablation(data_dir, cells, out, workers)
    seeds = [c.seed for c in cells[0][2]]
    manifest = RunManifest(command="ablate", seed=seeds[0], config={"grid": [[l, u] for l, u, _ in cells],
                           "seeds": seeds, "base": cells[0][2][0].to_dict()},
                           version=version_stamp(), dataset=str(Path(data_dir).resolve()),
                           outputs={"table": "ablation.csv", "runs": "runs"},
                           timing={"seconds": round(time.time() - start, 3), "workers": workers})
    manifest.write(out)
    for row in rows:
        print(f"{row['loss']:5s} u={row['uncertainty']:3s} rmse={row['rmse']} status={row['status']}")
    return rows


# ------------------------------------------------------------------ uncertainty

def cmd_uncertainty(traj_dir, out, tau=None, data_dir=None):
    """Uncertainty maps from trajectory pairs, plus the threshold curve when
    ground truth is available (``data_dir``, or the parent of ``traj_dir``
    if it holds a scene)."""
    pairs = load_trajectory_pairs(traj_dir)
    if tau is None:
        tau = default_tau(10.0, 0.001)
    elif not tau > 0:
        raise ConfigError("tau must be positive")
    out = _make_dir(out)
    maps = {}
    for i, (direct, mirrored) in sorted(pairs.items()):
        maps[i] = trajectory_uncertainty(direct, mirrored, tau)
        write_pfm(out / f"uncert_{i:04d}.pfm", maps[i].values)
    if data_dir is None and (Path(traj_dir).parent / "scene.json").is_file():
        data_dir = Path(traj_dir).parent
    rows = None
    if data_dir is not None:
        dataset = load_dataset(data_dir)
        ids = [i for i in maps if i < len(dataset.views) and dataset.views[i].prior is not None]
        if not ids:
            raise DataError("no trajectory matches a view with a prior")
        errors = [aligned_error_map(dataset.views[i].depth, pairs[i][0].final) for i in ids]
        rows = threshold_curve([maps[i].values for i in ids], errors, DEFAULT_THRESHOLDS)
        with open(out / "threshold_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CURVE_COLUMNS)
            for r in rows:
                w.writerow([repr(float(x)) for x in r])
    print(f"wrote {len(maps)} uncertainty maps (tau={tau:.6g}) to {out}")
    return maps, rows


# ------------------------------------------------------------------ entry point

def _train_overrides(args):
    u = None if args.uncertainty is None else args.uncertainty == "on"
    return {"seed": args.seed, "loss": args.loss, "emd_mode": args.emd_mode, "uncertainty": u, "steps": args.steps}


def build_parser():
    p = argparse.ArgumentParser(prog="emdnerf", description="Depth-guided radiance fields with EMD supervision.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="render a synthetic scene with corrupted priors")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--spec", help="scene spec JSON (default scene if omitted)")

    def train_flags(q):
        q.add_argument("--config")
        q.add_argument("--seed", type=int)
        q.add_argument("--loss", choices=DEPTH_LOSSES)
        q.add_argument("--emd-mode", choices=("exact", "sinkhorn"))
        q.add_argument("--uncertainty", choices=("on", "off"))
        q.add_argument("--steps", type=int)

    t = sub.add_parser("train", help="train one radiance field")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--eval", action="store_true", help="also evaluate on the test views")
    train_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--split", choices=("test", "train"), default="test")

    a = sub.add_parser("ablate", help="run the loss x uncertainty grid")
    a.add_argument("--data", required=True)
    a.add_argument("--grid")
    a.add_argument("--out", required=True)
    train_flags(a)

    u = sub.add_parser("uncertainty", help="uncertainty maps and threshold curve from trajectories")
    u.add_argument("--traj", required=True)
    u.add_argument("--out", required=True)
    u.add_argument("--tau", type=float)
    u.add_argument("--data")
    return p


def dispatch(args):
    if args.command == "gen-scene":
        cmd_gen_scene(args.out, args.seed, args.spec)
    elif args.command == "train":
        cfg = load_config(args.config, _train_overrides(args))
        if not Path(args.data, "scene.json").is_file():
            raise DataError(f"no dataset at {args.data}")
        m = run_training(args.data, cfg, args.out, evaluate=args.eval)
        print(f"trained {cfg.steps} steps in {m.timing['train_seconds']:.1f}s -> {args.out}")
    elif args.command == "eval":
        cmd_eval(args.checkpoint, args.data, args.out, args.split)
    elif args.command == "ablate":
        if args.config is not None and args.grid is None:
            args.grid = args.config
        cmd_ablate(args.data, args.grid, args.out, _train_overrides(args))
    elif args.command == "uncertainty":
        cmd_uncertainty(args.traj, args.out, args.tau, args.data)


def exit_code(exc):
    if isinstance(exc, (DivergenceError, NumericalError, ConvergenceError)):
        return EXIT_DIVERGENCE
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, (ConfigError, InputError, GenerationError)):
        return EXIT_CONFIG
    return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except Exception as exc:  # mapped to documented exit codes, anything else propagates
        code = exit_code(exc)
        if code is None:
            raise
        print(f"emdnerf {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
