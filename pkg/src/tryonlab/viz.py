"""Matplotlib renderings: attention overlays, keypoint markers, training
curves, and the eval report figure. Everything renders to files (Agg)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _upsample_grid(att: np.ndarray, image_shape) -> np.ndarray:
    h, w = image_shape[:2]
    gh, gw = att.shape
    reps_y = int(np.ceil(h / gh))
    reps_x = int(np.ceil(w / gw))
    return np.kron(att, np.ones((reps_y, reps_x)))[:h, :w]


def save_attention_overlay(image, att_grid, path, title=""):
    """Heatmap over the input image, one panel."""
    fig, ax = plt.subplots(figsize=(3, 3 * image.shape[0] / image.shape[1]))
    ax.imshow(image)
    heat = _upsample_grid(att_grid, image.shape)
    ax.imshow(heat, cmap="inferno", alpha=0.55, interpolation="bilinear")
    if title:
        ax.set_title(title, fontsize=8)
    ax.set_axis_off()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def save_keypoint_overlay(image, points_px, centroids_px, boxes, path):
    """Fig-3(e)-style panel: merged high-attention points (small dots),
    cluster centroids (red markers), and the derived crop rectangles."""
    fig, ax = plt.subplots(figsize=(3, 3 * image.shape[0] / image.shape[1]))
    ax.imshow(image)
    if len(points_px):
        pts = np.asarray(points_px)
        ax.scatter(pts[:, 0], pts[:, 1], s=6, c="white", edgecolors="black",
                   linewidths=0.3, alpha=0.8)
    if len(centroids_px):
        cts = np.asarray(centroids_px)
        ax.scatter(cts[:, 0], cts[:, 1], s=60, c="red", marker="o",
                   edgecolors="white", linewidths=0.8, zorder=3)
    for box in boxes:
        rect = plt.Rectangle((box.left, box.top), box.width, box.height,
                             fill=False, edgecolor="red", linewidth=0.8, alpha=0.7)
        ax.add_patch(rect)
    ax.set_axis_off()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def save_loss_curve(log, path, loss_key="loss", title="training loss"):
    steps = [r["step"] for r in log if loss_key in r and "step" in r]
    losses = [r[loss_key] for r in log if loss_key in r and "step" in r]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(steps, losses, lw=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel(loss_key)
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_eval_figure(ssim_values, frechet, path, baseline=None):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(ssim_values, bins=min(20, max(5, len(ssim_values))), color="#4878cf")
    mean = float(np.mean(ssim_values))
    ax.axvline(mean, color="red", lw=1.2, label=f"mean SSIM {mean:.3f}")
    if baseline is not None:
        ax.axvline(baseline, color="gray", lw=1.2, ls="--",
                   label=f"coarse baseline {baseline:.3f}")
    ax.set_xlabel("paired SSIM")
    ax.set_ylabel("count")
    ax.set_title(f"eval report (embed Frechet {frechet:.3f})", fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
