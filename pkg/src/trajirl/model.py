"""Trajectory prediction module (embedding, encoder, decoder), reward function and losses.

Arrays of agents are processed in lockstep: every per-step quantity is an
(N, d) matrix whose rows are the agents of one scene. A single agent is just
N = 1.

Encoder indexing: the encoder consumes the observed offsets one at a time.
After it has consumed offsets 1..t-1 its hidden state predicts offset t, so
the observed window yields predictions for t = 2..T. The state left after
consuming offset T seeds the decoder.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import ShapeError, Tape
from .data import position_offsets
from .nn import DenseLayer, LstmCell, dense_forward, dropout, init_params, lstm_step
from .scene import GridConfig, analyzer_forward, pool_hidden

LOG_FLOOR = 1e-6

TPM_NAMES = (
    "fc1_w", "fc1_b", "fc2_w", "fc2_b", "fc3_w", "fc3_b", "fc4_w", "fc4_b",
    "fc5_w", "fc5_b", "fc6_w", "fc6_b",
    "enc_ih", "enc_hh", "enc_b", "dec_ih", "dec_hh", "dec_b",
    "analyzer_w", "analyzer_b",
)
RF_NAMES = ("fc7_w", "fc7_b", "analyzer_w", "analyzer_b")
SHARED_NAMES = ("analyzer_w", "analyzer_b")


@dataclass(frozen=True)
class ModelDims:
    hidden_dim: int = 64
    scene_ctx_dim: int = 64
    embed_dim: int = 64
    grid: GridConfig = field(default_factory=GridConfig)

    @property
    def pooled_dim(self) -> int:
        return self.grid.n_cells ** 2 * self.hidden_dim

    def to_dict(self) -> dict:
        return {"hidden_dim": self.hidden_dim, "scene_ctx_dim": self.scene_ctx_dim,
                "embed_dim": self.embed_dim,
                "grid": {"n_cells": self.grid.n_cells, "cell_size": self.grid.cell_size}}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDims":
        g = d.get("grid", {})
        return cls(int(d["hidden_dim"]), int(d["scene_ctx_dim"]), int(d["embed_dim"]),
                   GridConfig(int(g.get("n_cells", 4)), float(g.get("cell_size", 2.0))))


def param_shapes(dims: ModelDims) -> dict:
    e, h, c = dims.embed_dim, dims.hidden_dim, dims.scene_ctx_dim
    return {
        "fc1_w": (e, 2), "fc1_b": (e,),
        "fc2_w": (e, c), "fc2_b": (e,),
        "fc3_w": (e, 2 * e), "fc3_b": (e,),
        "fc4_w": (2, h), "fc4_b": (2,),
        "fc5_w": (e, 2), "fc5_b": (e,),
        "fc6_w": (2, h), "fc6_b": (2,),
        "fc7_w": (1, 2 + c), "fc7_b": (1,),
        "enc_ih": (4 * h, e), "enc_hh": (4 * h, h), "enc_b": (4 * h,),
        "dec_ih": (4 * h, e), "dec_hh": (4 * h, h), "dec_b": (4 * h,),
        "analyzer_w": (c, dims.pooled_dim), "analyzer_b": (c,),
    }


def init_model(dims: ModelDims, seed: int) -> dict:
    return init_params(param_shapes(dims), seed, lstm_biases=("enc_b", "dec_b"))


def check_params(params: dict, dims: ModelDims) -> None:
    for name, shape in param_shapes(dims).items():
        if name not in params:
            raise ShapeError(f"parameter {name} missing")
        if params[name].shape != tuple(shape):
            raise ShapeError(f"parameter {name}: checkpoint {params[name].shape} vs model {tuple(shape)}")


@dataclass(frozen=True)
class TpmParams:
    fc1: DenseLayer
    fc2: DenseLayer
    fc3: DenseLayer
    fc4: DenseLayer
    fc5: DenseLayer
    fc6: DenseLayer
    encoder: LstmCell
    decoder: LstmCell
    analyzer: DenseLayer


@dataclass(frozen=True)
class RfParams:
    fc7: DenseLayer
    analyzer: DenseLayer


def bind(tape: Tape, params: dict) -> tuple[TpmParams, RfParams, dict]:
    """Register every parameter as a leaf of ``tape``."""
    ids = {n: tape.input(p) for n, p in params.items()}

    def dense(k):
        return DenseLayer(ids[f"{k}_w"], ids[f"{k}_b"])

    analyzer = DenseLayer(ids["analyzer_w"], ids["analyzer_b"])
    tpm = TpmParams(dense("fc1"), dense("fc2"), dense("fc3"), dense("fc4"), dense("fc5"),
                    dense("fc6"),
                    LstmCell(ids["enc_ih"], ids["enc_hh"], ids["enc_b"]),
                    LstmCell(ids["dec_ih"], ids["dec_hh"], ids["dec_b"]),
                    analyzer)
    rf = RfParams(dense("fc7"), analyzer)
    return tpm, rf, ids


@dataclass
class Dropout:
    keep_prob: float = 1.0
    rng: np.random.Generator | None = None
    training: bool = False

    def __call__(self, tape: Tape, x: int) -> int:
        return dropout(tape, x, self.keep_prob, self.rng, self.training)


NO_DROPOUT = Dropout()


def embed_input(tape: Tape, dx: int, s: int, tpm: TpmParams) -> int:
    a = dense_forward(tape, dx, tpm.fc1, "relu")
    b = dense_forward(tape, s, tpm.fc2, "relu")
    return dense_forward(tape, tape.concat([a, b]), tpm.fc3, "relu")


@dataclass
class EncoderOutput:
    hidden_states: list  # node after consuming each observed offset
    final_h: int
    final_c: int
    predicted_offsets: list  # predictions for t = 2..T
    contexts: list = field(default_factory=list)


def encoder_forward(tape: Tape, offsets: np.ndarray,
                    contexts: Sequence[int] | Callable[[int, int], int],
                    tpm: TpmParams, drop: Dropout = NO_DROPOUT) -> EncoderOutput:
    """Run the encoder over ``offsets[..., t, :]`` for t = 0..T-1.

    ``contexts`` is either one node per step or ``fn(step, h_prev) -> node``,
    which lets the caller pool neighbour states in lockstep.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    n_steps = offsets.shape[-2]
    if n_steps < 2:
        raise ValueError("encoder needs at least 2 observed steps")
    if not callable(contexts) and len(contexts) != n_steps:
        raise ShapeError(f"encoder: {n_steps} offsets vs {len(contexts)} contexts")
    hidden = tape.value(tpm.encoder.weight_hh).shape[1]
    lead = offsets.shape[:-2]
    h = tape.constant(np.zeros(lead + (hidden,)))
    c = h
    out = EncoderOutput([], h, c, [])
    for t in range(n_steps):
        s = contexts(t, h) if callable(contexts) else contexts[t]
        out.contexts.append(s)
        e = embed_input(tape, tape.constant(offsets[..., t, :]), s, tpm)
        h, c = lstm_step(tape, h, c, e, tpm.encoder)
        out.hidden_states.append(h)
        if t < n_steps - 1:
            out.predicted_offsets.append(dense_forward(tape, drop(tape, h), tpm.fc4))
    out.final_h, out.final_c = h, c
    return out


def decoder_forward(tape: Tape, h: int, c: int, last_offset: int, tpm: TpmParams,
                    horizon: int = 12, drop: Dropout = NO_DROPOUT) -> list:
    """Unroll the decoder on its own predictions; returns ``horizon`` offset nodes."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    e = dense_forward(tape, last_offset, tpm.fc5, "relu")
    preds = []
    for _ in range(horizon):
        h, c = lstm_step(tape, h, c, e, tpm.decoder)
        dx = dense_forward(tape, drop(tape, h), tpm.fc6)
        preds.append(dx)
        e = dense_forward(tape, dx, tpm.fc5, "relu")
    return preds


def reward(tape: Tape, offset: int, context: int, rf: RfParams | DenseLayer) -> int:
    """Sigmoid reward of the state [offset, context]; ``rf`` may be a bare fc7 layer."""
    fc7 = rf.fc7 if isinstance(rf, RfParams) else rf
    return dense_forward(tape, tape.concat([offset, context]), fc7, "sigmoid")


def _margin_log(tape: Tape, gt_rewards: int, pred_rewards: int, n_obs: int):
    if tape.value(gt_rewards).shape != tape.value(pred_rewards).shape:
        raise ShapeError(f"reward sets differ: {tape.value(gt_rewards).shape} "
                         f"vs {tape.value(pred_rewards).shape}")
    if tape.value(gt_rewards).shape[0] != n_obs - 1:
        raise ShapeError(f"expected {n_obs - 1} reward steps, got {tape.value(gt_rewards).shape[0]}")
    margin = tape.mean(tape.sub(gt_rewards, pred_rewards), axis=0)
    arg = tape.add(margin, tape.constant(1.0))
    return tape.log(tape.clamp(arg, LOG_FLOOR)), margin, arg


@dataclass
class LossTerms:
    total: int
    mse: int
    margin_log: int
    margin: int  # per-agent mean reward margin
    log_arg: int


def loss_tpm(tape: Tape, gt_future: np.ndarray, pred_future: Sequence[int], gt_rewards: int,
             pred_rewards: int, gamma: float, total_len: int, obs_len: int) -> LossTerms:
    """MSE over the future offsets (normalised by the full length) plus gamma * log margin.

    Reward nodes are indexed [step, agent] over steps t = 2..T. Whatever must
    stay fixed for this loss (ground-truth rewards, fc7) is detached by the caller.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    gt_future = np.asarray(gt_future, dtype=np.float64)
    if len(pred_future) != total_len - obs_len or gt_future.shape[0] != len(pred_future):
        raise ShapeError(f"future lengths: {len(pred_future)} predicted, {gt_future.shape[0]} "
                         f"ground truth, expected {total_len - obs_len}")
    stacked = tape.concat(pred_future, axis=0)
    gt = tape.constant(gt_future.reshape(tape.value(stacked).shape))
    sq = tape.sum(tape.square(tape.sub(gt, stacked)))
    mse = tape.scalar_mul(sq, 1.0 / total_len)
    mlog, margin, arg = _margin_log(tape, gt_rewards, pred_rewards, obs_len)
    mlog_total = tape.sum(mlog)
    total = tape.add(mse, tape.scalar_mul(mlog_total, gamma)) if gamma else mse
    return LossTerms(total, mse, mlog_total, margin, arg)


def loss_rf(tape: Tape, gt_rewards: int, pred_rewards: int, obs_len: int) -> LossTerms:
    mlog, margin, arg = _margin_log(tape, gt_rewards, pred_rewards, obs_len)
    mlog_total = tape.sum(mlog)
    return LossTerms(tape.scalar_mul(mlog_total, -1.0), mlog_total, mlog_total, margin, arg)


def detached_layer(tape: Tape, layer: DenseLayer) -> DenseLayer:
    return DenseLayer(tape.detach(layer.weight), tape.detach(layer.bias))


def contexts_at(tape: Tape, analyzer: DenseLayer, centers: np.ndarray, positions: np.ndarray,
                hidden: np.ndarray, grid: GridConfig) -> int:
    """Analyzer output for grids centred at ``centers`` over agents at ``positions``."""
    pooled = pool_hidden(centers, positions, hidden, grid, exclude_self=True)
    return analyzer_forward(tape, tape.constant(pooled), analyzer)


def encode_scene(tape: Tape, tpm: TpmParams, past: np.ndarray, grid: GridConfig,
                 drop: Dropout = NO_DROPOUT):
    """Lockstep encoder for all agents of a scene.

    ``past`` is (N, T, 2) absolute positions. The context at step t pools the
    neighbours' hidden states before they consume step t; those states are
    detached. Returns the encoder output and the pooled hidden values per step.
    """
    offsets = position_offsets(past)
    seen = []

    def context(t, h_prev):
        hv = tape.value(tape.detach(h_prev))
        seen.append(hv)
        return contexts_at(tape, tpm.analyzer, past[:, t], past[:, t], hv, grid)

    enc = encoder_forward(tape, offsets, context, tpm, drop)
    return enc, seen, offsets


@dataclass
class ScenePass:
    l_tpm: LossTerms
    l_rf: LossTerms
    future: list  # decoder offset nodes, each (N, 2)
    encoder: EncoderOutput
    gt_rewards: int
    pred_rewards: int


def forward_scene(tape: Tape, tpm: TpmParams, rf: RfParams, positions: np.ndarray,
                  grid: GridConfig, gamma: float, obs_len: int = 8,
                  drop: Dropout = NO_DROPOUT) -> ScenePass:
    """Both losses for every agent of one scene, summed over agents.

    The L_TPM branch sees rewards through a detached fc7 and treats the
    ground-truth rewards as constants; the L_RF branch sees the predicted
    offsets detached, so only fc7 and the analyzer receive its gradient.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n_agents, total_len, _ = positions.shape
    if not 2 <= obs_len < total_len:
        raise ValueError(f"need 2 <= T < M, got T={obs_len}, M={total_len}")
    past = positions[:, :obs_len]
    enc, seen, _ = encode_scene(tape, tpm, past, grid, drop)
    offsets = position_offsets(positions)

    future = decoder_forward(tape, enc.final_h, enc.final_c,
                             tape.constant(offsets[:, obs_len - 1]), tpm,
                             total_len - obs_len, drop)

    gt_states, live_states, frozen_states = [], [], []
    for t in range(1, obs_len):
        pred = enc.predicted_offsets[t - 1]
        pred_fixed = tape.detach(pred)
        centers = positions[:, t - 1] + tape.value(pred_fixed)
        s_hat = contexts_at(tape, tpm.analyzer, centers, positions[:, t], seen[t], grid)
        gt_states.append(tape.concat([tape.constant(offsets[:, t]), enc.contexts[t]]))
        live_states.append(tape.concat([pred, s_hat]))
        frozen_states.append(tape.concat([pred_fixed, s_hat]))

    shape = (obs_len - 1, n_agents)
    fc7_fixed = detached_layer(tape, rf.fc7)

    def rewards(states, fc7):
        r = dense_forward(tape, tape.concat(states, axis=0), fc7, "sigmoid")
        return tape.reshape(r, shape)

    r_live = rewards(gt_states, rf.fc7)
    r_hat_rf = rewards(frozen_states, rf.fc7)
    r_hat_tpm = rewards(live_states, fc7_fixed)
    r_fixed = tape.detach(r_live)

    gt_future = np.transpose(offsets[:, obs_len:], (1, 0, 2))
    l_tpm = loss_tpm(tape, gt_future, future, r_fixed, r_hat_tpm, gamma, total_len, obs_len)
    l_rf = loss_rf(tape, r_live, r_hat_rf, obs_len)
    return ScenePass(l_tpm, l_rf, future, enc, r_live, r_hat_rf)


def rebase(last_position: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Absolute positions from a start point and per-step offsets (axis -2 is time)."""
    return np.asarray(last_position)[..., None, :] + np.cumsum(offsets, axis=-2)


def predict_scene(params: dict, dims: ModelDims, past: np.ndarray, horizon: int = 12) -> np.ndarray:
    """Future absolute positions (N, horizon, 2) for every agent in ``past`` (N, T, 2)."""
    past = np.asarray(past, dtype=np.float64)
    if past.ndim != 3 or past.shape[1] < 2:
        raise ValueError(f"need (N, T>=2, 2) observed positions, got {past.shape}")
    tape = Tape()
    tpm, _, _ = bind(tape, params)
    enc, _, offsets = encode_scene(tape, tpm, past, dims.grid)
    future = decoder_forward(tape, enc.final_h, enc.final_c,
                             tape.constant(offsets[:, -1]), tpm, horizon)
    dx = np.stack([tape.value(f) for f in future], axis=1)
    return rebase(past[:, -1], dx)


def predict(past_positions: np.ndarray, neighbor_past: Sequence[np.ndarray], params: dict,
            dims: ModelDims, horizon: int = 12) -> np.ndarray:
    """Future positions (horizon, 2) of one agent given co-observed neighbours."""
    past_positions = np.asarray(past_positions, dtype=np.float64)
    if past_positions.ndim != 2 or past_positions.shape[0] < 2:
        raise ValueError("need at least 2 observed frames")
    agents = np.stack([past_positions, *[np.asarray(p, dtype=np.float64) for p in neighbor_past]])
    return predict_scene(params, dims, agents, horizon)[0]
