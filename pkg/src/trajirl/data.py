"""Trajectory files, fixed-length windows, offsets and dataset splits.

File format: UTF-8 CSV with header ``frame_id,agent_id,x,y`` (meters).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

HEADER = ["frame_id", "agent_id", "x", "y"]
OBS_LEN = 8
TOTAL_LEN = 20


class TrajectoryFormatError(ValueError):
    pass


@dataclass
class RawTrajectoryFile:
    frame_id: np.ndarray  # (n,) int64
    agent_id: np.ndarray  # (n,) int64
    xy: np.ndarray  # (n, 2) float64
    name: str = ""

    def __len__(self):
        return len(self.frame_id)

    def agents(self) -> np.ndarray:
        return np.unique(self.agent_id)

    def frame_step(self) -> int:
        frames = np.unique(self.frame_id)
        if len(frames) < 2:
            return 1
        return int(np.diff(frames).min())


@dataclass
class TrajectorySegment:
    agent_id: int
    start_frame: int
    positions: np.ndarray  # (M, 2)
    obs_len: int = OBS_LEN

    @property
    def total_len(self) -> int:
        return len(self.positions)

    @property
    def past(self) -> np.ndarray:
        return self.positions[:self.obs_len]

    @property
    def future(self) -> np.ndarray:
        return self.positions[self.obs_len:]


@dataclass
class SceneSample:
    reference: TrajectorySegment
    neighbors: list
    video: str = ""

    @property
    def segment_id(self) -> str:
        return f"{self.video}:{self.reference.agent_id}:{self.reference.start_frame}"


@dataclass
class Scene:
    """All fully observed agents of one window, in agent-id order."""
    video: str
    start_frame: int
    agent_ids: np.ndarray
    positions: np.ndarray  # (N, M, 2)

    @property
    def scene_id(self) -> str:
        return f"{self.video}:{self.start_frame}"

    def segment(self, i: int, obs_len: int = OBS_LEN) -> TrajectorySegment:
        return TrajectorySegment(int(self.agent_ids[i]), self.start_frame, self.positions[i], obs_len)

    def samples(self, obs_len: int = OBS_LEN) -> list[SceneSample]:
        segs = [self.segment(i, obs_len) for i in range(len(self.agent_ids))]
        return [SceneSample(s, [o for o in segs if o is not s], self.video) for s in segs]


def load_trajectories(path) -> RawTrajectoryFile:
    path = Path(path)
    frames, agents, xs = [], [], []
    first_seen: dict[tuple[int, int], int] = {}
    last_frame: dict[int, tuple[int, int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return RawTrajectoryFile(np.zeros(0, np.int64), np.zeros(0, np.int64),
                                     np.zeros((0, 2)), path.stem)
        if [h.strip() for h in header] != HEADER:
            raise TrajectoryFormatError(f"{path}:1: expected header {','.join(HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != 4:
                    raise ValueError(f"expected 4 fields, got {len(row)}")
                f, a = int(row[0]), int(row[1])
                x, y = float(row[2]), float(row[3])
                if not (np.isfinite(x) and np.isfinite(y)):
                    raise ValueError("non-finite coordinate")
            except ValueError as exc:
                raise TrajectoryFormatError(f"{path}:{lineno}: malformed line: {exc}") from None
            key = (f, a)
            if key in first_seen:
                raise TrajectoryFormatError(
                    f"{path}: duplicate (frame {f}, agent {a}) on lines {first_seen[key]} and {lineno}")
            first_seen[key] = lineno
            if a in last_frame and f < last_frame[a][0]:
                raise TrajectoryFormatError(
                    f"{path}:{lineno}: frame {f} of agent {a} follows frame {last_frame[a][0]} "
                    f"(line {last_frame[a][1]})")
            last_frame[a] = (f, lineno)
            frames.append(f)
            agents.append(a)
            xs.append((x, y))
    frame_id = np.array(frames, dtype=np.int64)
    agent_id = np.array(agents, dtype=np.int64)
    xy = np.array(xs, dtype=np.float64).reshape(-1, 2)
    order = np.lexsort((frame_id, agent_id))
    return RawTrajectoryFile(frame_id[order], agent_id[order], xy[order], path.stem)


def write_trajectories(path, raw: RawTrajectoryFile) -> None:
    order = np.lexsort((raw.agent_id, raw.frame_id))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(HEADER) + "\n")
        for k in order:
            fh.write(f"{int(raw.frame_id[k])},{int(raw.agent_id[k])},"
                     f"{float(raw.xy[k, 0])!r},{float(raw.xy[k, 1])!r}\n")


def load_dataset(directory) -> list[RawTrajectoryFile]:
    """Every ``*.csv`` in ``directory`` is one video, in name order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    return [load_trajectories(p) for p in sorted(directory.glob("*.csv"))]


def scenes(raw: RawTrajectoryFile, obs_len: int = OBS_LEN, total_len: int = TOTAL_LEN,
           stride: int = 1, frame_step: int | None = None) -> list[Scene]:
    """Sliding windows of ``total_len`` consecutive frames with all complete agents.

    Window starts are every ``stride``-th distinct frame of the file. Agents
    missing any frame of a window are left out of it.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if len(raw) == 0:
        return []
    step = frame_step or raw.frame_step()
    lookup: dict[int, dict[int, int]] = {}
    present: dict[int, list[int]] = {}
    for k, (f, a) in enumerate(zip(raw.frame_id.tolist(), raw.agent_id.tolist())):
        lookup.setdefault(a, {})[f] = k
        present.setdefault(f, []).append(a)
    out = []
    for start in np.unique(raw.frame_id)[::stride].tolist():
        window = [start + j * step for j in range(total_len)]
        ids, rows = [], []
        for a in sorted(present[start]):
            frames = lookup[a]
            if all(f in frames for f in window):
                ids.append(a)
                rows.append([frames[f] for f in window])
        if ids:
            out.append(Scene(raw.name, int(start), np.array(ids, dtype=np.int64),
                             raw.xy[np.array(rows)]))
    return out


def segment(raw: RawTrajectoryFile, obs_len: int = OBS_LEN, total_len: int = TOTAL_LEN,
            stride: int = 1) -> list[SceneSample]:
    """One sample per (fully observed agent, window), ordered by (agent_id, start_frame)."""
    samples = [s for sc in scenes(raw, obs_len, total_len, stride) for s in sc.samples(obs_len)]
    samples.sort(key=lambda s: (s.reference.agent_id, s.reference.start_frame))
    return samples


def position_offsets(positions: np.ndarray) -> np.ndarray:
    """Frame-to-frame displacement along axis -2; the first offset is zero."""
    positions = np.asarray(positions, dtype=np.float64)
    d = np.zeros_like(positions)
    d[..., 1:, :] = positions[..., 1:, :] - positions[..., :-1, :]
    return d


def offsets(seg: TrajectorySegment) -> np.ndarray:
    return position_offsets(seg.positions)


def leave_one_out(videos: list, test_index: int):
    if len(videos) < 2:
        raise ValueError("leave-one-out needs at least 2 videos")
    if not 0 <= test_index < len(videos):
        raise IndexError(f"test index {test_index} out of range for {len(videos)} videos")
    train = [v for i, v in enumerate(videos) if i != test_index]
    return train, videos[test_index]
