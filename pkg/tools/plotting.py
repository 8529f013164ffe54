"""
Plotting Tool - SVG level-set overlays, metric bar charts, loss curves and tracking keyframes
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from tools.kinematics import PosedBones  # noqa: E402
from tools.synthbody import BBOX_SCALE, CapsuleBody, gt_occupancy, posed_bbox  # noqa: E402
from utils.errors import PlainIOError  # noqa: E402
from utils.logger import setup_logger  # noqa: E402

logger = setup_logger(__name__)

# fixed element ids and no date stamp keep the SVG bytes reproducible
matplotlib.rcParams["svg.hashsalt"] = "nasa-occ"
matplotlib.rcParams["svg.fonttype"] = "path"

PLOT_GRID = 160


def _save(fig, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_path, format="svg", bbox_inches="tight", metadata={"Date": None})
    except OSError as e:
        raise PlainIOError(f"Cannot write plot {out_path}: {str(e)}") from e
    finally:
        plt.close(fig)
    return out_path


def _slice_grid(body: CapsuleBody, posed: PosedBones, resolution: int):
    """Grid over the first two axes of the 110% bbox; 3D bodies are cut at the box center"""
    lo, hi = posed_bbox(body, posed, scale=BBOX_SCALE)
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if body.dim == 3:
        z = np.full((points.shape[0], 1), 0.5 * (lo[2] + hi[2]))
        points = np.concatenate([points, z], axis=1)
    return gx, gy, points


def plot_level_sets(
    model,
    body: CapsuleBody,
    posed: PosedBones,
    out_path: str | Path,
    title: str = "",
    resolution: int = PLOT_GRID,
    cloud: np.ndarray | None = None,
    truth: PosedBones | None = None,
) -> Path:
    """Model 0.5 level set (at posed) over the ground-truth shape (at truth, default posed)"""
    gx, gy, points = _slice_grid(body, truth or posed, resolution)
    truth_values = gt_occupancy(body, truth or posed, points).reshape(gx.shape).astype(np.float64)
    model_values = model.eval(posed, points, mode="hard").reshape(gx.shape)

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.contourf(gx, gy, truth_values, levels=[0.5, 1.5], colors=["#c8d8ec"])
    ax.contour(gx, gy, truth_values, levels=[0.5], colors=["#3a6ea5"], linewidths=1.0)
    if np.ptp(model_values) > 0 and model_values.min() < 0.5 < model_values.max():
        ax.contour(gx, gy, model_values, levels=[0.5], colors=["#d1495b"], linewidths=1.5)
    if cloud is not None and len(cloud):
        ax.scatter(cloud[:, 0], cloud[:, 1], s=2, c="#222222")
    ax.set_aspect("equal")
    ax.set_title(title or f"{model.kind.upper()} level set")
    return _save(fig, out_path)


def plot_metric_bars(table: pd.DataFrame, out_path: str | Path, metrics: Sequence[str] = ("miou", "fscore")) -> Path:
    """Grouped bars, one group per metric and one bar per model row"""
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.5))
    axes = np.atleast_1d(axes)
    for ax, metric in zip(axes, metrics):
        ax.bar(table["model"].astype(str), table[metric].astype(float), color="#3a6ea5")
        ax.set_title(metric)
        if metric == "miou":
            ax.set_ylim(0.0, 1.0)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_loss_history(history: pd.DataFrame, out_path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for column in ("loss_total", "loss_occ", "loss_weights"):
        if column in history and bool((history[column] > 0).all()):
            ax.plot(history["step"], history[column], label=column)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend()
    return _save(fig, out_path)
