"""Figure rendering for run reports.

All functions draw to files with the Agg backend; nothing opens a
window.  The report command pairs each figure with a delimited export of
the same numbers so downstream tooling never has to scrape an image.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_training_curves(records, path):
    """Two-panel episode curves: labeled proportion and branch accuracies."""
    episodes = [r.episode for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(episodes, [r.pseudolabel_proportion for r in records],
             marker="o", color="tab:blue")
    ax1.set_xlabel("episode")
    ax1.set_ylabel("pseudolabel proportion")
    ax1.set_ylim(0.0, 1.05)
    ax1.grid(alpha=0.3)

    have_acc = any(not np.isnan(r.adapt_accuracy) for r in records)
    if have_acc:
        ax2.plot(episodes, [r.adapt_accuracy for r in records],
                 marker="o", label="adaptation branch", color="tab:orange")
        ax2.plot(episodes, [r.pretrained_accuracy for r in records],
                 marker="s", label="pre-trained branch", color="tab:green")
        ax2.plot(episodes, [r.pseudolabel_accuracy for r in records],
                 marker="^", label="pseudolabels", color="tab:blue", alpha=0.6)
        ax2.set_ylabel("accuracy")
        ax2.legend(fontsize=8)
    else:
        ax2.plot(episodes, [r.mean_loss for r in records],
                 marker="o", color="tab:red")
        ax2.set_ylabel("mean loss")
    ax2.set_xlabel("episode")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_confusion(counts, path):
    """Heatmap of a confusion matrix, rows truth, columns prediction."""
    counts = np.asarray(counts)
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_xticks(range(counts.shape[1]))
    ax.set_yticks(range(counts.shape[0]))
    thresh = counts.max() / 2.0 if counts.max() else 0.5
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(j, i, str(int(counts[i, j])), ha="center", va="center",
                    fontsize=8, color="white" if counts[i, j] > thresh else "black")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_confidence_histogram(edges, correct, incorrect, path):
    """Stacked bars of correct vs incorrect prediction counts per confidence bin."""
    edges = np.asarray(edges, dtype=float)
    correct = np.asarray(correct)
    incorrect = np.asarray(incorrect)
    centers = (edges[:-1] + edges[1:]) / 2.0
    width = (edges[1] - edges[0]) * 0.9
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    ax.bar(centers, correct, width=width, label="correct", color="tab:green")
    ax.bar(centers, incorrect, width=width, bottom=correct,
           label="incorrect", color="tab:red")
    ax.set_xlabel("prediction confidence")
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
