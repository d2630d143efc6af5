"""ADE/FDE metrics, the least-squares baseline, linearity stats and overlay export."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .data import Scene, SceneSample, TrajectorySegment
from .model import ModelDims, check_params, predict_scene


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.shape[0] < 1:
        raise ValueError("need at least one position")
    return pred, gt


def ade(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def fde(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def _line_fit(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares coefficients (slope, intercept) per column of ``y``."""
    design = np.stack([t, np.ones_like(t)], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef


def linear_reg_predict(past, horizon: int = 12) -> np.ndarray:
    """Fit x(t) = a t + b per coordinate over t = 1..T, extrapolate T+1..T+horizon."""
    past = np.asarray(past, dtype=np.float64)
    if past.shape[0] < 2:
        raise ValueError("linear regression needs at least 2 observed frames")
    n = past.shape[0]
    coef = _line_fit(np.arange(1, n + 1, dtype=np.float64), past)
    t_future = np.arange(n + 1, n + horizon + 1, dtype=np.float64)
    return t_future[:, None] * coef[0] + coef[1]


def linearity_residual(positions) -> float:
    """RMS distance between the positions and their per-coordinate line fit over time."""
    positions = np.asarray(positions, dtype=np.float64)
    t = np.arange(1, len(positions) + 1, dtype=np.float64)
    coef = _line_fit(t, positions)
    fitted = t[:, None] * coef[0] + coef[1]
    return float(np.sqrt(np.mean(np.sum((positions - fitted) ** 2, axis=1))))


def classify_linearity(seg: TrajectorySegment | np.ndarray, threshold: float = 0.1) -> str:
    positions = seg.positions if isinstance(seg, TrajectorySegment) else seg
    return "nonlinear" if linearity_residual(positions) > threshold else "linear"


@dataclass
class LinearityStats:
    n_linear: int
    n_nonlinear: int

    @property
    def ratio(self) -> float:
        total = self.n_linear + self.n_nonlinear
        return self.n_nonlinear / total if total else 0.0


def linearity_stats(segments, threshold: float = 0.1) -> LinearityStats:
    labels = [classify_linearity(s, threshold) for s in segments]
    return LinearityStats(labels.count("linear"), labels.count("nonlinear"))


@dataclass
class MetricsReport:
    segment_ids: list = field(default_factory=list)
    ades: list = field(default_factory=list)
    fdes: list = field(default_factory=list)

    def add(self, segment_id: str, ade_value: float, fde_value: float):
        self.segment_ids.append(segment_id)
        self.ades.append(ade_value)
        self.fdes.append(fde_value)

    @property
    def count(self) -> int:
        return len(self.ades)

    @property
    def mean_ade(self) -> float:
        return float(np.mean(self.ades)) if self.ades else float("nan")

    @property
    def mean_fde(self) -> float:
        return float(np.mean(self.fdes)) if self.fdes else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("segment_id,ade,fde\n")
            for sid, a, f in zip(self.segment_ids, self.ades, self.fdes):
                fh.write(f"{sid},{a:.6f},{f:.6f}\n")
            fh.write("# aggregate\n")
            fh.write(f"mean_ade,{self.mean_ade:.6f}\n")
            fh.write(f"mean_fde,{self.mean_fde:.6f}\n")
            fh.write(f"count,{self.count}\n")


def predict_scenes(params: dict, dims: ModelDims, scene_list: list[Scene], obs_len: int,
                   horizon: int, baseline: str | None = None, threads: int = 1) -> list[np.ndarray]:
    """Future positions per scene, (N, horizon, 2) each."""
    if baseline is None:
        check_params(params, dims)

    def one(sc: Scene):
        past = sc.positions[:, :obs_len]
        if baseline == "linear":
            return np.stack([linear_reg_predict(p, horizon) for p in past])
        if baseline is not None:
            raise ValueError(f"unknown baseline {baseline!r}")
        return predict_scene(params, dims, past, horizon)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, scene_list))
    return [one(sc) for sc in scene_list]


def evaluate(params: dict | None, dims: ModelDims | None, scene_list: list[Scene],
             obs_len: int = 8, baseline: str | None = None, threads: int = 1) -> MetricsReport:
    """ADE/FDE for every agent of every scene, predicting the rest of the window."""
    report = MetricsReport()
    if not scene_list:
        return report
    horizon = scene_list[0].positions.shape[1] - obs_len
    preds = predict_scenes(params, dims, scene_list, obs_len, horizon, baseline, threads)
    for sc, pred in zip(scene_list, preds):
        gt = sc.positions[:, obs_len:]
        for i, agent in enumerate(sc.agent_ids):
            report.add(f"{sc.video}:{int(agent)}:{sc.start_frame}", ade(pred[i], gt[i]),
                       fde(pred[i], gt[i]))
    return report


_COLORS = ["#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#ff7f0e", "#8c564b"]


def export_overlay(sample: SceneSample, predictions: dict, svg_path, csv_path,
                   size: int = 480, margin: int = 40) -> None:
    """Write the past, ground-truth future and each prediction as SVG polylines and CSV rows."""
    ref = sample.reference
    lines = [("past", ref.past, "#000000"), ("gt_future", np.vstack([ref.past[-1:], ref.future]),
                                              "#7f7f7f")]
    for k, (name, pred) in enumerate(predictions.items()):
        pred = np.asarray(pred, dtype=np.float64)
        lines.append((name, np.vstack([ref.past[-1:], pred]), _COLORS[k % len(_COLORS)]))

    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("name,index,x,y\n")
        for name, pts, _ in lines:
            for i, (x, y) in enumerate(pts):
                fh.write(f"{name},{i},{float(x)!r},{float(y)!r}\n")

    allpts = np.vstack([p for _, p, _ in lines])
    lo = allpts.min(axis=0)
    extent = max(float((allpts.max(axis=0) - lo).max()), 1e-6)
    scale = (size - 2 * margin) / extent

    def xy(p):
        # y axis points up in world coordinates
        return margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 60}" '
             f'viewBox="0 0 {size} {size + 60}">',
             f'<rect x="0" y="0" width="{size}" height="{size + 60}" fill="#ffffff"/>']
    for name, pts, color in lines:
        coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in map(xy, pts))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="2"><title>{escape(name)}</title></polyline>')
    for k, (name, _, color) in enumerate(lines):
        y = size + 14 + 14 * (k // 3)
        x = 10 + 155 * (k % 3)
        parts.append(f'<rect x="{x}" y="{y - 8}" width="12" height="4" fill="{color}"/>')
        parts.append(f'<text x="{x + 16}" y="{y}" font-size="11">{escape(name)}</text>')
    bar_m = 1.0 if extent >= 1.0 else extent
    parts.append(f'<line x1="{margin}" y1="{size - 12}" x2="{margin + bar_m * scale:.2f}" '
                 f'y2="{size - 12}" stroke="#000000" stroke-width="2"/>')
    parts.append(f'<text x="{margin}" y="{size - 16}" font-size="11">{bar_m:g} m '
                 f'(view {extent:.2f} m)</text>')
    parts.append("</svg>")
    Path(svg_path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def read_overlay_csv(path) -> dict:
    out: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["name"], []).append((float(row["x"]), float(row["y"])))
    return {k: np.array(v) for k, v in out.items()}
