"""Matplotlib figure rendering for training, servoing and analysis output.
All functions write PNG files; nothing is shown interactively."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(history, path):
    epochs = [row["epoch"] for row in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [row["train_loss"] for row in history], label="train")
    ax1.plot(epochs, [row["val_loss"] for row in history], label="val")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend()
    ax2.plot(epochs, [row["lr"] for row in history])
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_servo_report(metrics, path):
    """SSD, in-plane error and wrench traces of one closed-loop run."""
    t = [c["time"] for c in metrics.cycles]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    axes[0, 0].plot(t, [c["ssd"] for c in metrics.cycles])
    axes[0, 0].set_ylabel("SSD to reference")
    axes[0, 1].plot(t, [c["err_t"] for c in metrics.cycles], label="trans [mm]")
    axes[0, 1].plot(t, [np.rad2deg(c["err_r"]) for c in metrics.cycles],
                    label="rot [deg]")
    axes[0, 1].set_ylabel("pose error")
    axes[0, 1].legend()
    axes[1, 0].plot(t, [c["f_ext"][2] for c in metrics.cycles], label="ext z [N]")
    axes[1, 0].plot(t, [c["f_int"][0] for c in metrics.cycles], label="int x [N]")
    axes[1, 0].set_ylabel("wrench")
    axes[1, 0].legend()
    axes[1, 1].plot(t, [c["separation"] for c in metrics.cycles])
    axes[1, 1].set_ylabel("grasp separation [mm]")
    for ax in axes.flat:
        ax.set_xlabel("time [s]")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_pca_scatter(projections, path, explained=None):
    P = np.asarray(projections)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    sc = ax.scatter(P[:, 0], P[:, 1], c=np.arange(P.shape[0]), cmap="viridis", s=18)
    fig.colorbar(sc, ax=ax, label="servo step")
    title = "feature trajectory (top-2 PCA)"
    if explained is not None:
        title += f"  ({100 * float(np.sum(explained)):.1f}% var)"
    ax.set_title(title)
    ax.set_xlabel("pc 1")
    ax.set_ylabel("pc 2")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_ablation_chart(summary, path):
    variants = [row["variant"] for row in summary]
    means = [row["mean_loss"] for row in summary]
    stds = [row["std_loss"] for row in summary]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(variants, means, yerr=stds, capsize=4)
    ax.set_ylabel("validation loss")
    ax.set_title("attention-variant ablation")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_eval_histogram(per_sample_loss, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.hist(np.asarray(per_sample_loss), bins=30)
    ax.set_xlabel("per-sample loss")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
