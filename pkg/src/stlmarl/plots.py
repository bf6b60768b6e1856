"""Static figure rendering for training, evaluation, and verification.

Everything draws through the Agg backend straight to files; nothing here
opens a window.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .verify import BernoulliEstimate
from .world import EpisodeRecord, GameConfig, agent_name, landmark_name


def training_curves(metrics: list[dict], path) -> None:
    """Robustness, satisfaction rate, and both losses over iterations."""
    if not metrics:
        raise ValueError("no metric rows to plot")
    iterations = [row["iteration"] for row in metrics]
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    top.plot(iterations, [row["mean_robustness"] for row in metrics],
             label="mean robustness", color="tab:blue")
    top.set_ylabel("robustness")
    rate_axis = top.twinx()
    rate_axis.plot(iterations, [row["satisfaction_rate"] for row in metrics],
                   label="satisfaction rate", color="tab:green", alpha=0.7)
    rate_axis.set_ylabel("satisfaction rate")
    rate_axis.set_ylim(-0.05, 1.05)
    top.set_title("training progress")
    bottom.plot(iterations, [row["loss_enc_v"] for row in metrics],
                label="value loss", color="tab:orange")
    bottom.plot(iterations, [row["loss_dec"] for row in metrics],
                label="policy loss", color="tab:red")
    bottom.set_xlabel("iteration")
    bottom.set_ylabel("loss")
    bottom.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def episode_figure(record: EpisodeRecord, game: GameConfig, path) -> None:
    """Top-down view of one episode: agent paths and landmark goal discs."""
    fig, ax = plt.subplots(figsize=(6, 6))
    span = game.arena_half_width
    ax.set_xlim(-1.1 * span, 1.1 * span)
    ax.set_ylim(-1.1 * span, 1.1 * span)
    ax.set_aspect("equal")
    colors = plt.cm.tab10(np.linspace(0, 1, 10))
    for j in range(game.n_agents):
        center = record.trajectory.position(landmark_name(j), 0)
        disc = plt.Circle(center, game.goal_distance, color=colors[j % 10],
                          alpha=0.15, zorder=1)
        ax.add_patch(disc)
        ax.plot(*center, marker="x", color=colors[j % 10], markersize=10, zorder=2)
        ax.annotate(landmark_name(j), center, fontsize=8, alpha=0.7)
    for i in range(game.n_agents):
        path_xy = record.trajectory.entities[agent_name(i)]
        ax.plot(path_xy[:, 0], path_xy[:, 1], color=colors[i % 10], zorder=3,
                label=agent_name(i))
        ax.plot(*path_xy[0], marker="o", color=colors[i % 10], zorder=4)
        ax.plot(*path_xy[-1], marker="s", color=colors[i % 10], zorder=4)
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("episode trace (o start, s end)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def interval_figure(estimate: BernoulliEstimate, path) -> None:
    """Satisfaction estimate with its confidence interval as an error bar."""
    fig, ax = plt.subplots(figsize=(4, 4))
    below = estimate.p_hat - estimate.lo
    above = estimate.hi - estimate.p_hat
    ax.errorbar([0.0], [estimate.p_hat], yerr=[[below], [above]],
                fmt="o", capsize=8, color="tab:blue")
    ax.set_xlim(-1, 1)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xticks([])
    ax.set_ylabel("satisfaction probability")
    ax.set_title(
        f"{estimate.successes}/{estimate.trials} at "
        f"{estimate.confidence:.0%} confidence")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
