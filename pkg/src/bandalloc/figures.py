"""Figure rendering for the CLI report path.

Every runner drops a PNG next to its CSV output. The CSV stays the
machine-readable contract; the figures are for eyeballing runs.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

plt.rcParams.update({
    "figure.figsize": (6.4, 6.4 * GOLDEN),
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})

METHOD_STYLES = {
    "oracle": dict(color="k", linestyle="--", marker=""),
    "hml": dict(color="tab:red", marker="o"),
    "maml": dict(color="tab:blue", marker="s"),
    "mtl_transfer": dict(color="tab:green", marker="^"),
    "random_init": dict(color="tab:gray", marker="v"),
    "gnn": dict(color="tab:red", marker="o"),
}


def _save(fig, path: Path):
    fig.savefig(path)
    plt.close(fig)


def plot_sample_rewards(path: Path, rewards):
    fig, ax = plt.subplots()
    ax.plot(range(len(rewards)), [r / 1e6 for r in rewards], ".-", ms=4)
    ax.set_xlabel("sample index")
    ax.set_ylabel("sum reward (Mbit/s)")
    ax.set_title("iterative allocator per-sample sum reward")
    _save(fig, path)


def plot_train_log(path: Path, log):
    fig, ax = plt.subplots()
    epochs = [r.epoch for r in log.rows]
    ax.plot(epochs, [r.loss_bps / 1e6 for r in log.rows],
            label="batch loss", color="tab:blue", lw=1)
    evals = [(r.epoch, r.eval_reward_bps) for r in log.rows
             if r.eval_reward_bps is not None]
    if evals:
        ax.plot([e for e, _ in evals], [v / 1e6 for _, v in evals],
                label="held-out reward", color="tab:red", marker="o", ms=3)
        ax.legend()
    ax.set_xlabel("epoch")
    ax.set_ylabel("sum reward (Mbit/s)")
    ax.set_title("training progress")
    _save(fig, path)


def plot_meta_test(path: Path, curves: dict):
    fig, ax = plt.subplots()
    for method, values in curves.items():
        style = METHOD_STYLES.get(method, {})
        ax.plot(range(len(values)), [v / 1e6 for v in values],
                label=method, ms=4, **style)
    ax.set_xlabel("fine-tuning epoch")
    ax.set_ylabel("average sum reward (Mbit/s)")
    ax.set_title("meta-testing on the unseen task")
    ax.legend()
    _save(fig, path)


def plot_bench(path: Path, report: dict):
    fig, ax = plt.subplots()
    labels = ["schedule", "iterative", "gnn forward"]
    values = [report["schedule_ms"], report["iterative_ms"],
              report["gnn_forward_ms"]]
    ax.bar(labels, values, color=["tab:gray", "tab:blue", "tab:red"])
    ax.set_yscale("log")
    ax.set_ylabel("wall time per sample (ms)")
    ax.set_title(f"oracle/GNN wall ratio: "
                 f"{report['oracle_over_gnn_wall_ratio']:.1f}x "
                 f"(K={report['scheduled_users']})")
    _save(fig, path)


def plot_robustness(path: Path, sweep):
    fig, ax = plt.subplots()
    levels = [r["underestimate_db"] for r in sweep]
    ax.plot(levels, [r["oracle_reward_bps"] / 1e6 for r in sweep],
            label="oracle", **METHOD_STYLES["oracle"])
    ax.plot(levels, [r["gnn_reward_bps"] / 1e6 for r in sweep],
            label="gnn", ms=4, **METHOD_STYLES["gnn"])
    ax.set_xlabel("eavesdropper gain underestimation (dB)")
    ax.set_ylabel("achieved sum secrecy reward (Mbit/s)")
    ax.set_title("robustness to eavesdropper uncertainty")
    ax.legend()
    _save(fig, path)
