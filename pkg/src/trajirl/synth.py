"""Synthetic multi-agent scenes for desk-scale experiments.

corridor : two opposing streams along x; agents sidestep oncoming walkers
crossing : a +x stream crossing a +y stream with the same sidestep rule
linear   : independent constant-velocity walkers

Each scene occupies its own block of frames and its own agent ids, so a
dataset of ``n_scenes`` scenes with ``n_frames == 20`` yields exactly
``n_scenes`` windows. Positions are in meters, one frame per step.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import RawTrajectoryFile, write_trajectories

SCENARIOS = ("corridor", "crossing", "linear")
_FRAME_GAP = 5


@dataclass
class SynthConfig:
    scenario: str = "corridor"
    n_scenes: int = 100
    agents_per_scene: int = 4
    speed_range: tuple = (0.3, 0.6)
    interaction_radius: float = 3.0
    noise_sigma: float = 0.0
    seed: int = 0
    n_frames: int = 20
    avoid_gain: float = 0.3
    return_gain: float = 0.1

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}, expected one of {SCENARIOS}")
        if self.n_scenes < 1 or self.agents_per_scene < 1:
            raise ValueError("n_scenes and agents_per_scene must be positive")
        if self.n_frames < 20:
            raise ValueError("n_frames must be >= 20")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad speed range {self.speed_range}")


def simulate_sidestep(start: np.ndarray, heading: np.ndarray, speed: np.ndarray, n_frames: int,
                      radius: float, avoid_gain: float, return_gain: float) -> np.ndarray:
    """Walk agents along their headings, sidestepping oncoming agents within ``radius``.

    start (A, 2), heading (A, 2) unit vectors, speed (A,). Returns (A, n_frames, 2).
    An agent reacts to neighbours ahead of it: it moves laterally away from them
    (to its right when exactly aligned) at a rate that grows as they get closer,
    and relaxes back to its starting lane otherwise.
    """
    n = len(start)
    left = np.stack([-heading[:, 1], heading[:, 0]], axis=1)
    lane = np.einsum("ij,ij->i", start, left)
    pos = start.astype(np.float64).copy()
    out = np.empty((n, n_frames, 2))
    for f in range(n_frames):
        out[:, f] = pos
        vel = heading * speed[:, None]
        for i in range(n):
            lateral = return_gain * (lane[i] - pos[i] @ left[i])
            for j in range(n):
                if j == i:
                    continue
                d = pos[j] - pos[i]
                dist = np.hypot(*d)
                if dist >= radius or d @ heading[i] <= 0.0:
                    continue
                side_offset = -(d @ left[i])
                side = np.sign(side_offset) if abs(side_offset) > 1e-9 else -1.0
                lateral += avoid_gain * (1.0 - dist / radius) * side
            lateral = np.clip(lateral, -speed[i], speed[i])
            vel[i] = vel[i] + lateral * left[i]
        pos = pos + vel
    return out


def _scene(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    a = cfg.agents_per_scene
    speed = rng.uniform(*cfg.speed_range, size=a)
    if cfg.scenario == "linear":
        angle = rng.uniform(0, 2 * np.pi, size=a)
        vel = np.stack([np.cos(angle), np.sin(angle)], axis=1) * speed[:, None]
        start = rng.uniform(-5, 5, size=(a, 2))
        pos = np.empty((a, cfg.n_frames, 2))
        pos[:, 0] = start
        for f in range(1, cfg.n_frames):
            pos[:, f] = pos[:, f - 1] + vel
        return pos
    group = np.arange(a) % 2
    along = np.where(group == 0, rng.uniform(-7, -3, size=a), rng.uniform(3, 7, size=a))
    across = rng.uniform(-1, 1, size=a)
    if cfg.scenario == "corridor":
        heading = np.stack([np.where(group == 0, 1.0, -1.0), np.zeros(a)], axis=1)
        start = np.stack([along, across], axis=1)
    else:
        heading = np.where(group[:, None] == 0, [1.0, 0.0], [0.0, 1.0])
        along = -np.abs(along)
        start = np.where(group[:, None] == 0, np.stack([along, across], 1),
                         np.stack([across, along], 1))
    return simulate_sidestep(start, heading, speed, cfg.n_frames, cfg.interaction_radius,
                             cfg.avoid_gain, cfg.return_gain)


def synth_generate(cfg: SynthConfig) -> RawTrajectoryFile:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    frames, agents, xy = [], [], []
    for s in range(cfg.n_scenes):
        pos = _scene(cfg, rng)
        if cfg.noise_sigma > 0:
            pos = pos + rng.normal(0.0, cfg.noise_sigma, size=pos.shape)
        base = s * (cfg.n_frames + _FRAME_GAP)
        for k in range(cfg.agents_per_scene):
            frames.append(base + np.arange(cfg.n_frames))
            agents.append(np.full(cfg.n_frames, s * cfg.agents_per_scene + k + 1))
            xy.append(pos[k])
    frame_id = np.concatenate(frames).astype(np.int64)
    agent_id = np.concatenate(agents).astype(np.int64)
    xy = np.concatenate(xy)
    order = np.lexsort((frame_id, agent_id))
    return RawTrajectoryFile(frame_id[order], agent_id[order], xy[order], f"synth_{cfg.scenario}")


def write_dataset(out_dir, cfg: SynthConfig) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = synth_generate(cfg)
    path = out_dir / f"{raw.name}.csv"
    write_trajectories(path, raw)
    return [path]
