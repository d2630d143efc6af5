"""Command-line entry point: ``trajirl {train,eval,predict,synth,sweep,stats}``.

stdout carries only result lines; diagnostics go to stderr through logging,
whose level comes from the TRAJIRL_LOG environment variable. Exit codes:
0 success, 1 bad flags, 2 data or checkpoint errors, 3 numerical failure.
Settings resolve as flags > ``--config`` JSON file > built-in defaults.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ShapeError
from .data import (OBS_LEN, TOTAL_LEN, RawTrajectoryFile, SceneSample, TrajectoryFormatError,
                   TrajectorySegment, load_dataset, load_trajectories, scenes)
from .evaluation import evaluate, export_overlay, linearity_stats
from .model import ModelDims, check_params, predict_scene
from .nn import HyperParams, load_checkpoint
from .scene import GridConfig
from .synth import SCENARIOS, SynthConfig, write_dataset
from .training import NumericalError, TrainConfig, gamma_sweep, save_model, train

log = logging.getLogger("trajirl")

EXIT_FLAGS, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

DEFAULTS = {
    "gamma": 0.0, "epochs": 300, "seed": 0, "hidden_dim": 64, "scene_ctx_dim": 64,
    "embed_dim": 64, "grid_cells": 4, "cell_size": 2.0, "lr": 1e-4, "keep_prob": 0.8,
    "l2": 1e-4, "batch_size": 1, "patience": 20, "val_fraction": 0.1, "threads": 1,
    "horizon": TOTAL_LEN - OBS_LEN, "baseline": None, "gammas": "0,0.01,0.1",
    "scenario": "corridor", "scenes": 100, "agents": 4, "noise": 0.0, "frames": 20,
    "threshold": 0.1, "agent": None, "stride": 1, "svg": None, "checkpoint": None,
    "lr_schedule": "constant",
}


class UsageError(Exception):
    """Invalid flag value; reported with exit code 1."""


class DataError(Exception):
    """Unusable input data or checkpoint; reported with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FLAGS, f"{self.prog}: error: {message}\n")


def _add(p, *flags, **kw):
    # defaults stay None so that a config file can fill them in
    p.add_argument(*flags, default=None, **kw)


def _model_flags(p):
    _add(p, "--hidden-dim", type=int)
    _add(p, "--scene-ctx-dim", type=int)
    _add(p, "--embed-dim", type=int)
    _add(p, "--grid-cells", type=int)
    _add(p, "--cell-size", type=float)


def _train_flags(p):
    _add(p, "--epochs", type=int)
    _add(p, "--seed", type=int)
    _add(p, "--lr", type=float, help="Adam learning rate")
    _add(p, "--lr-schedule", choices=["constant", "cosine"], help="per-epoch learning rate schedule")
    _add(p, "--keep-prob", type=float, help="dropout keep probability")
    _add(p, "--l2", type=float, help="l2 weight on non-bias parameters")
    _add(p, "--batch-size", type=int, help="scenes per update")
    _add(p, "--patience", type=int, help="early-stopping patience in epochs")
    _add(p, "--val-fraction", type=float)
    _add(p, "--stride", type=int, help="window stride in frames")
    _model_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trajirl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"trajirl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _add(p, "--config", help="JSON file of flag values (flags take precedence)")
        _add(p, "--threads", type=int)
        return p

    p = command("train", "train a model and write checkpoint, history and manifest")
    p.add_argument("--data", required=True, help="directory of trajectory CSV files")
    p.add_argument("--out", required=True)
    _add(p, "--gamma", type=float, help="reward-margin weight")
    _train_flags(p)

    p = command("eval", "evaluate a checkpoint or a baseline on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add(p, "--checkpoint")
    _add(p, "--baseline", choices=["linear"])
    _add(p, "--stride", type=int)

    p = command("predict", "predict the future of one agent from an observed scene CSV")
    p.add_argument("--data", required=True, help="trajectory CSV holding the observed frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add(p, "--agent", type=int, help="reference agent id (default: smallest id)")
    _add(p, "--horizon", type=int)
    _add(p, "--svg", help="file name of an SVG overlay inside --out")

    p = command("synth", "write a synthetic dataset")
    p.add_argument("--out", required=True)
    _add(p, "--scenario", choices=SCENARIOS)
    _add(p, "--scenes", type=int)
    _add(p, "--agents", type=int)
    _add(p, "--noise", type=float, help="Gaussian position noise sigma in meters")
    _add(p, "--frames", type=int)
    _add(p, "--seed", type=int)

    p = command("sweep", "train one model per gamma and rank them by validation ADE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add(p, "--gammas", help="comma-separated gamma values")
    _train_flags(p)

    p = command("stats", "count linear and non-linear trajectory segments")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add(p, "--threshold", type=float, help="RMS residual threshold in meters")
    _add(p, "--stride", type=int)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over defaults; every key ends up explicit."""
    cfg = {k: v for k, v in DEFAULTS.items() if hasattr(args, k)}
    if args.config:
        try:
            from_file = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise UsageError("--config must hold a JSON object")
        for key, value in from_file.items():
            key = key.replace("-", "_")
            if not hasattr(args, key) or key == "config":
                raise UsageError(f"unknown key {key!r} in --config for {args.command}")
            cfg[key] = value
    for key, value in vars(args).items():
        if key != "config" and value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    _check(cfg)
    return cfg


def _check(cfg: dict) -> None:
    def need(key, ok, what):
        if key in cfg and cfg[key] is not None and not ok(cfg[key]):
            raise UsageError(f"--{key.replace('_', '-')} {what}, got {cfg[key]!r}")

    need("gamma", lambda v: v >= 0, "must be >= 0")
    need("epochs", lambda v: v >= 0, "must be >= 0")
    for key in ("hidden_dim", "scene_ctx_dim", "embed_dim", "grid_cells", "threads", "batch_size",
                "patience", "horizon", "scenes", "agents", "stride"):
        need(key, lambda v: v >= 1, "must be >= 1")
    need("cell_size", lambda v: v > 0, "must be > 0")
    need("lr", lambda v: v > 0, "must be > 0")
    need("keep_prob", lambda v: 0 < v <= 1, "must lie in (0, 1]")
    need("l2", lambda v: v >= 0, "must be >= 0")
    need("val_fraction", lambda v: 0 <= v <= 0.5, "must lie in [0, 0.5]")
    need("noise", lambda v: v >= 0, "must be >= 0")
    need("frames", lambda v: v >= TOTAL_LEN, f"must be >= {TOTAL_LEN}")
    need("threshold", lambda v: v > 0, "must be > 0")
    need("lr_schedule", lambda v: v in ("constant", "cosine"), "must be constant or cosine")
    if "gammas" in cfg:
        try:
            values = parse_gammas(cfg["gammas"])
        except ValueError:
            raise UsageError(f"--gammas must be comma-separated numbers, got {cfg['gammas']!r}")
        if not values or min(values) < 0:
            raise UsageError(f"--gammas needs values >= 0, got {cfg['gammas']!r}")
    if cfg.get("command") == "eval" and not cfg.get("baseline") and not cfg.get("checkpoint"):
        raise UsageError("eval needs --checkpoint unless --baseline is given")


def parse_gammas(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(g) for g in text]
    return [float(g) for g in str(text).split(",") if g.strip()]


def train_config(cfg: dict) -> TrainConfig:
    dims = ModelDims(cfg["hidden_dim"], cfg["scene_ctx_dim"], cfg["embed_dim"],
                     GridConfig(cfg["grid_cells"], float(cfg["cell_size"])))
    hyper = HyperParams(learning_rate=cfg["lr"], keep_prob=cfg["keep_prob"], l2_weight=cfg["l2"])
    return TrainConfig(gamma=float(cfg.get("gamma", 0.0)), epochs=cfg["epochs"], hyper=hyper,
                       dims=dims, batch_size=cfg["batch_size"],
                       early_stop_patience=cfg["patience"],
                       validation_fraction=cfg["val_fraction"], seed=cfg["seed"],
                       threads=cfg["threads"], lr_schedule=cfg["lr_schedule"])


# ---------------------------------------------------------------- file helpers
def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _data_files(path) -> list[Path]:
    path = Path(path)
    return sorted(path.glob("*.csv")) if path.is_dir() else [path]


def write_manifest(out: Path, cfg: dict, inputs: list, outputs: list, started: str) -> Path:
    doc = {
        "command": cfg["command"],
        "config": {k: v for k, v in sorted(cfg.items()) if k != "command"},
        "seed": cfg.get("seed"),
        "version": __version__,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    if cfg["command"] in ("train", "sweep"):
        doc["training"] = train_config(cfg).to_dict()
    path = out / "manifest.json"
    _atomic_write(path, json.dumps(doc, indent=2) + "\n")
    return path


def _load_scenes(data, stride: int = 1):
    try:
        videos = load_dataset(data)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    if not videos:
        raise DataError(f"no *.csv files in {data}")
    found = [sc for raw in videos for sc in scenes(raw, OBS_LEN, TOTAL_LEN, stride)]
    if not found:
        raise DataError(f"no complete {TOTAL_LEN}-frame windows in {data}")
    log.info("loaded %d scenes from %d files", len(found), len(videos))
    return found


def _load_model(path):
    try:
        params, meta = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupted checkpoint {path}: {exc.msg} at line {exc.lineno} "
                        f"column {exc.colno}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    try:
        dims = ModelDims.from_dict(meta)
        check_params(params, dims)
    except (KeyError, TypeError, ValueError, ShapeError) as exc:
        raise DataError(f"checkpoint {path} does not match its recorded dims: {exc}") from exc
    return params, dims


# ---------------------------------------------------------------- commands
def cmd_train(cfg: dict, out: Path) -> list[Path]:
    scene_list = _load_scenes(cfg["data"], cfg["stride"])
    tcfg = train_config(cfg)
    res = train(scene_list, tcfg)
    ckpt, hist = out / "checkpoint.json", out / "history.csv"
    save_model(ckpt, res.params, tcfg, best_epoch=res.best_epoch)
    res.history.write_csv(hist)
    best = res.history.records[res.best_epoch - 1].val_ade if res.best_epoch else float("nan")
    print(f"BEST_EPOCH {res.best_epoch} VAL_ADE {best:.6f}")
    return [ckpt, hist]


def cmd_eval(cfg: dict, out: Path) -> list[Path]:
    scene_list = _load_scenes(cfg["data"], cfg["stride"])
    params = dims = None
    if not cfg["baseline"]:
        params, dims = _load_model(cfg["checkpoint"])
    try:
        rep = evaluate(params, dims, scene_list, OBS_LEN, cfg["baseline"], cfg["threads"])
    except ShapeError as exc:
        raise DataError(str(exc)) from exc
    path = out / "metrics.csv"
    rep.write_csv(path)
    print(f"ADE {rep.mean_ade:.6f} FDE {rep.mean_fde:.6f}")
    return [path]


def _observed_scene(raw: RawTrajectoryFile, agent: int | None):
    """Last OBS_LEN frames of the reference agent plus neighbours seen on all of them."""
    if len(raw) == 0:
        raise DataError("empty trajectory file")
    ref = int(raw.agent_id.min()) if agent is None else agent
    mine = raw.frame_id[raw.agent_id == ref]
    if len(mine) == 0:
        raise DataError(f"agent {ref} not in {raw.name}")
    step = raw.frame_step()
    window = [int(mine[-1]) - step * (OBS_LEN - 1 - j) for j in range(OBS_LEN)]
    table = {(int(f), int(a)): k for k, (f, a) in enumerate(zip(raw.frame_id, raw.agent_id))}
    agents = [ref] + [int(a) for a in raw.agents() if a != ref]
    rows = []
    for a in agents:
        if all((f, a) in table for f in window):
            rows.append((a, raw.xy[[table[(f, a)] for f in window]]))
        elif a == ref:
            raise DataError(f"agent {ref} needs {OBS_LEN} consecutive observed frames "
                            f"ending at frame {window[-1]}")
    return rows, window


def cmd_predict(cfg: dict, out: Path) -> list[Path]:
    params, dims = _load_model(cfg["checkpoint"])
    try:
        raw = load_trajectories(cfg["data"])
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    rows, window = _observed_scene(raw, cfg["agent"])
    past = np.stack([xy for _, xy in rows])
    future = predict_scene(params, dims, past, cfg["horizon"])[0]
    path = out / "predictions.csv"
    lines = ["step,x,y"] + [f"{k + 1},{x!r},{y!r}" for k, (x, y) in enumerate(future.tolist())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written = [path]
    if cfg["svg"]:
        svg = out / Path(cfg["svg"]).name
        ref = TrajectorySegment(rows[0][0], window[0], past[0], OBS_LEN)
        neighbors = [TrajectorySegment(a, window[0], xy, OBS_LEN) for a, xy in rows[1:]]
        export_overlay(SceneSample(ref, neighbors, raw.name), {"model": future}, svg,
                       svg.with_suffix(".csv"))
        written += [svg, svg.with_suffix(".csv")]
    print(f"PREDICTED {len(future)} AGENT {rows[0][0]}")
    return written


def cmd_synth(cfg: dict, out: Path) -> list[Path]:
    scfg = SynthConfig(scenario=cfg["scenario"], n_scenes=cfg["scenes"],
                       agents_per_scene=cfg["agents"], noise_sigma=cfg["noise"],
                       seed=cfg["seed"], n_frames=cfg["frames"])
    paths = write_dataset(out, scfg)
    print(f"WROTE {len(paths)} FILES")
    return paths


def cmd_sweep(cfg: dict, out: Path) -> list[Path]:
    scene_list = _load_scenes(cfg["data"], cfg["stride"])
    rows = gamma_sweep(scene_list, parse_gammas(cfg["gammas"]), train_config(cfg))
    path = out / "sweep.csv"
    lines = ["gamma,ade,fde"] + [f"{r.gamma!r},{r.ade:.6f},{r.fde:.6f}" for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    for r in rows:
        print(f"GAMMA {r.gamma!r} ADE {r.ade:.6f} FDE {r.fde:.6f}")
    return [path]


def cmd_stats(cfg: dict, out: Path) -> list[Path]:
    scene_list = _load_scenes(cfg["data"], cfg["stride"])
    segments = [sc.positions[i] for sc in scene_list for i in range(len(sc.agent_ids))]
    stats = linearity_stats(segments, cfg["threshold"])
    path = out / "stats.csv"
    path.write_text("n_linear,n_nonlinear,ratio\n"
                    f"{stats.n_linear},{stats.n_nonlinear},{stats.ratio:.6f}\n", encoding="utf-8")
    print(f"LINEAR {stats.n_linear} NONLINEAR {stats.n_nonlinear} RATIO {stats.ratio:.6f}")
    return [path]


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "synth": cmd_synth,
            "sweep": cmd_sweep, "stats": cmd_stats}


def _setup_logging() -> None:
    level = os.environ.get("TRAJIRL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s %(message)s", force=True)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    started = datetime.now(timezone.utc).isoformat()
    try:
        cfg = resolve(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        written = COMMANDS[args.command](cfg, out)
        inputs = [p for key in ("data", "checkpoint") if cfg.get(key)
                  for p in _data_files(cfg[key])]
        write_manifest(out, cfg, inputs, written, started)
    except UsageError as exc:
        print(f"trajirl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FLAGS
    except (DataError, TrajectoryFormatError) as exc:
        print(f"trajirl {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"trajirl {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
