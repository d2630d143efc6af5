"""Alternating training of the prediction module and the reward function.

Each scene is one tape. Its two roots, L_TPM and L_RF, are differentiated
separately; gradients from a batch of scenes are summed in scene order. The
TPM update is applied first, then the RF update (both use Adam with their own
moment states). The analyzer sits in both parameter groups.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .data import OBS_LEN, TOTAL_LEN, Scene
from .evaluation import evaluate
from .model import (LOG_FLOOR, RF_NAMES, TPM_NAMES, Dropout, ModelDims, NO_DROPOUT, bind,
                    forward_scene, init_model)
from .nn import AdamState, HyperParams, adam_step, save_checkpoint

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.0
    epochs: int = 300
    hyper: HyperParams = field(default_factory=HyperParams)
    obs_len: int = OBS_LEN
    total_len: int = TOTAL_LEN
    dims: ModelDims = field(default_factory=ModelDims)
    batch_size: int = 1
    early_stop_patience: int = 20
    validation_fraction: float = 0.1
    seed: int = 0
    threads: int = 1
    update_order: str = "tpm_first"
    lr_schedule: str = "constant"  # or "cosine", annealed to lr_floor * lr over the epochs
    lr_floor: float = 0.05

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not self.obs_len < self.total_len:
            raise ValueError("obs_len must be smaller than total_len")
        if not 0.0 <= self.validation_fraction <= 0.5:
            raise ValueError("validation_fraction must lie in [0, 0.5]")
        if self.batch_size < 1 or self.epochs < 0 or self.threads < 1:
            raise ValueError("batch_size and threads must be >= 1, epochs >= 0")
        if self.update_order not in ("tpm_first", "rf_first"):
            raise ValueError(f"unknown update order {self.update_order!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown learning rate schedule {self.lr_schedule!r}")
        if not 0.0 <= self.lr_floor <= 1.0:
            raise ValueError("lr_floor must lie in [0, 1]")

    def epoch_lr(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (1-based)."""
        lr = self.hyper.learning_rate
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return lr
        frac = 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / self.epochs))
        return lr * (self.lr_floor + (1.0 - self.lr_floor) * frac)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = self.dims.to_dict()
        return d


@dataclass
class SceneResult:
    scene_id: str
    l_tpm: float
    l_rf: float
    mse: float
    margin: float  # mean over agents
    reward_min: float
    reward_max: float
    clamp_hits: int
    grads_tpm: dict
    grads_rf: dict
    tape: Tape | None = None


def process_scene(positions: np.ndarray, params: dict, cfg: TrainConfig,
                  rng: np.random.Generator | None = None, training: bool = True,
                  scene_id: str = "", keep_tape: bool = False) -> SceneResult:
    """Forward both losses for all agents of a scene and differentiate each."""
    tape = Tape()
    tpm, rf, ids = bind(tape, params)
    drop = Dropout(cfg.hyper.keep_prob, rng, training) if training else NO_DROPOUT
    sp = forward_scene(tape, tpm, rf, positions[:, :cfg.total_len], cfg.dims.grid, cfg.gamma,
                       cfg.obs_len, drop)
    l_tpm = float(tape.value(sp.l_tpm.total))
    l_rf = float(tape.value(sp.l_rf.total))
    if not (math.isfinite(l_tpm) and math.isfinite(l_rf)):
        raise NumericalError(f"non-finite loss in scene {scene_id}: L_TPM={l_tpm}, L_RF={l_rf}")
    g = tape.backward(sp.l_tpm.total)
    grads_tpm = {n: g[ids[n]] for n in TPM_NAMES}
    g = tape.backward(sp.l_rf.total)
    grads_rf = {n: g[ids[n]] for n in RF_NAMES}
    rewards = np.concatenate([tape.value(sp.gt_rewards).ravel(), tape.value(sp.pred_rewards).ravel()])
    return SceneResult(
        scene_id, l_tpm, l_rf, float(tape.value(sp.l_tpm.mse)),
        float(np.mean(tape.value(sp.l_rf.margin))),
        float(rewards.min()), float(rewards.max()),
        int(np.sum(tape.value(sp.l_rf.log_arg) <= LOG_FLOOR)),
        grads_tpm, grads_rf, tape if keep_tape else None)


def new_optim_states(params: dict) -> tuple[AdamState, AdamState]:
    return AdamState.zeros_like(params, TPM_NAMES), AdamState.zeros_like(params, RF_NAMES)


def scene_rng(seed: int, key, k: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key, k])


def train_step(batch: list[Scene], params: dict, states: tuple[AdamState, AdamState],
               cfg: TrainConfig, key=(0, 0), pool: ThreadPoolExecutor | None = None
               ) -> list[SceneResult]:
    """One alternating update from a batch of scenes; mutates ``params`` and ``states``."""
    if not batch:
        raise ValueError("empty batch")

    def run(k):
        sc = batch[k]
        return process_scene(sc.positions, params, cfg, scene_rng(cfg.seed, key, k), True,
                             sc.scene_id)

    if pool is not None and len(batch) > 1:
        results = list(pool.map(run, range(len(batch))))
    else:
        results = [run(k) for k in range(len(batch))]

    grads_tpm = {n: sum_in_order([r.grads_tpm[n] for r in results]) for n in TPM_NAMES}
    grads_rf = {n: sum_in_order([r.grads_rf[n] for r in results]) for n in RF_NAMES}
    tpm_state, rf_state = states
    updates = [(grads_tpm, tpm_state, TPM_NAMES), (grads_rf, rf_state, RF_NAMES)]
    if cfg.update_order == "rf_first":
        updates.reverse()
    for grads, state, names in updates:
        adam_step(params, grads, state, cfg.hyper, names)
    return results


def sum_in_order(arrays):
    total = arrays[0].copy()
    for a in arrays[1:]:
        total += a
    return total


@dataclass
class EpochRecord:
    epoch: int
    l_tpm: float
    l_rf: float
    mse: float
    margin: float
    val_ade: float
    reward_min: float = float("nan")
    reward_max: float = float("nan")
    clamp_hits: int = 0


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("epoch,l_tpm,l_rf,mse,margin,val_ade\n")
            for r in self.records:
                fh.write(f"{r.epoch},{r.l_tpm!r},{r.l_rf!r},{r.mse!r},{r.margin!r},{r.val_ade!r}\n")


@dataclass
class TrainResult:
    params: dict
    history: TrainHistory
    best_epoch: int
    train_scenes: list
    val_scenes: list


def split_scenes(scene_list: list[Scene], fraction: float, seed: int):
    order = np.random.default_rng([seed, 7919]).permutation(len(scene_list))
    n_val = int(round(fraction * len(scene_list)))
    val = [scene_list[i] for i in sorted(order[:n_val])]
    train = [scene_list[i] for i in sorted(order[n_val:])]
    return train, val


def _copy(params):
    return {n: p.copy() for n, p in params.items()}


def train(scene_list: list[Scene], cfg: TrainConfig, params: dict | None = None,
          val_scenes: list[Scene] | None = None) -> TrainResult:
    """Epoch loop with seeded shuffling and early stopping on validation ADE.

    When ``val_scenes`` is omitted a scene-level split of ``scene_list`` is used.
    Returns the parameters of the best validation epoch (or the last epoch when
    there is no validation data).
    """
    if val_scenes is None:
        train_scenes, val_scenes = split_scenes(scene_list, cfg.validation_fraction, cfg.seed)
    else:
        train_scenes = list(scene_list)
    if not train_scenes:
        raise ValueError("empty training split")
    params = init_model(cfg.dims, cfg.seed) if params is None else _copy(params)
    states = new_optim_states(params)
    history = TrainHistory()
    best = _copy(params)
    best_ade, best_epoch, wait = math.inf, 0, 0
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_scenes))
            step_cfg = replace(cfg, hyper=replace(cfg.hyper, learning_rate=cfg.epoch_lr(epoch)))
            results = []
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [train_scenes[i] for i in order[start:start + cfg.batch_size]]
                results += train_step(batch, params, states, step_cfg, (epoch, b), pool)
            val_ade = (evaluate(params, cfg.dims, val_scenes, cfg.obs_len, threads=cfg.threads).mean_ade
                       if val_scenes else float("nan"))
            rec = EpochRecord(
                epoch,
                float(np.mean([r.l_tpm for r in results])),
                float(np.mean([r.l_rf for r in results])),
                float(np.mean([r.mse for r in results])),
                float(np.mean([r.margin for r in results])),
                val_ade,
                min(r.reward_min for r in results),
                max(r.reward_max for r in results),
                sum(r.clamp_hits for r in results),
            )
            history.records.append(rec)
            log.info("epoch=%d l_tpm=%.6f l_rf=%.6f mse=%.6f margin=%.6f val_ade=%.6f",
                     rec.epoch, rec.l_tpm, rec.l_rf, rec.mse, rec.margin, rec.val_ade)
            if not val_scenes:
                best, best_epoch = _copy(params), epoch
                continue
            if val_ade < best_ade:
                best, best_ade, best_epoch, wait = _copy(params), val_ade, epoch, 0
            else:
                wait += 1
                if wait >= cfg.early_stop_patience:
                    log.info("early stop after epoch %d (best epoch %d)", epoch, best_epoch)
                    break
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(best, history, best_epoch, train_scenes, val_scenes)


@dataclass
class SweepRow:
    gamma: float
    ade: float
    fde: float


def gamma_sweep(scene_list: list[Scene], gammas, cfg: TrainConfig) -> list[SweepRow]:
    """Independent runs per gamma (same seed), ranked by validation ADE."""
    gammas = list(gammas)
    if not gammas:
        raise ValueError("empty gamma list")
    rows = []
    for g in gammas:
        if g < 0:
            raise ValueError(f"gamma must be >= 0, got {g}")
        run_cfg = TrainConfig(**{**cfg.__dict__, "gamma": float(g)})
        res = train(scene_list, run_cfg)
        held_out = res.val_scenes or res.train_scenes
        rep = evaluate(res.params, cfg.dims, held_out, cfg.obs_len, threads=cfg.threads)
        rows.append(SweepRow(float(g), rep.mean_ade, rep.mean_fde))
    return sorted(rows, key=lambda r: r.ade)


def checkpoint_metadata(cfg: TrainConfig, **extra) -> dict:
    return {**cfg.dims.to_dict(), "seed": cfg.seed, "gamma": cfg.gamma,
            "obs_len": cfg.obs_len, "total_len": cfg.total_len, **extra}


def save_model(path, params: dict, cfg: TrainConfig, **extra) -> None:
    save_checkpoint(Path(path), params, checkpoint_metadata(cfg, **extra))
