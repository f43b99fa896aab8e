"""Static figures for CLI reports. Format follows the file suffix (svg, png, pdf)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "kdp"
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Circle, Rectangle  # noqa: E402


def _save(fig, path):
    # fixed metadata keeps svg output byte-stable across runs
    meta = {"Date": None} if str(path).endswith(".svg") else {}
    fig.savefig(path, metadata=meta, bbox_inches="tight")
    plt.close(fig)


def loss_curve(steps, losses, path, title="training loss", smooth=50):
    steps = np.asarray(steps)
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=0.6, alpha=0.4, color="tab:blue", label="per step")
    if smooth > 1 and len(losses) >= smooth:
        kern = np.ones(smooth) / smooth
        ax.plot(steps[smooth - 1:], np.convolve(losses, kern, mode="valid"),
                color="tab:blue", label=f"{smooth}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False)
    _save(fig, path)


def maze_trajectories(episodes, config, path, title="closed-loop trajectories"):
    """Positions of each episode over the obstacle and goal of a MazeConfig."""
    fig, ax = plt.subplots(figsize=(5, 5))
    lo, hi = config.bounds
    xmin, ymin, xmax, ymax = config.obstacle
    ax.add_patch(Rectangle((xmin, ymin), xmax - xmin, ymax - ymin, color="0.6"))
    ax.add_patch(Circle(config.goal, config.goal_radius, fill=False, color="tab:green", lw=2))
    for ep, ok in episodes:
        pos = np.asarray(ep.states)[:, :2]
        ax.plot(pos[:, 0], pos[:, 1], lw=0.8, color="tab:blue" if ok else "tab:red", alpha=0.7)
        ax.plot(pos[0, 0], pos[0, 1], "k.", ms=3)
    ax.set_xlim(lo, hi)
    ax.set_ylim(lo, hi)
    ax.set_aspect("equal")
    ax.set_title(title)
    _save(fig, path)


def first_action_scatter(states, actions, path, title="first actions"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.scatter(np.ravel(states), np.ravel(actions), s=4, alpha=0.5)
    ax.set_xlabel("state")
    ax.set_ylabel("first action")
    ax.set_title(title)
    _save(fig, path)


def bench_bars(rows, path):
    labels = [f"{r['method']}\nK={r['K']}" for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(rows)), 3.5))
    ax.bar(range(len(rows)), [r["pl_p50_ms"] for r in rows], color="tab:blue")
    ax.set_xticks(range(len(rows)), labels, fontsize=8)
    ax.set_yscale("log")
    ax.set_ylabel("planning latency p50 (ms)")
    _save(fig, path)
