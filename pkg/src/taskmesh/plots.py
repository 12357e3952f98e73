"""Figure rendering for experiment reports.

The delimited output stays the contract; these helpers additionally
render a PNG next to each results CSV so a sweep or run can be eyeballed
without a plotting pipeline.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def plot_run(rows: list[dict], path: str | Path) -> Path:
    """Stacked per-run bars: busy time vs. measured runtime overheads."""
    path = Path(path)
    runs = [r for r in rows if str(r.get("run", "")).isdigit()]
    if not runs:
        runs = rows
    idx = range(len(runs))
    wall = [int(r["wall_us"]) / 1e3 for r in runs]
    busy = [int(r["busy_us"]) / 1e3 for r in runs]
    startup = [int(r["startup_us"]) / 1e3 for r in runs]
    sched = [int(r["scheduling_us"]) / 1e3 for r in runs]
    shutdown = [int(r["shutdown_us"]) / 1e3 for r in runs]

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(idx, busy, label="task busy")
    bottom = busy
    for values, label in ((startup, "startup"), (sched, "scheduling"), (shutdown, "shutdown")):
        ax.bar(idx, values, bottom=bottom, label=label)
        bottom = [b + v for b, v in zip(bottom, values)]
    ax.plot(idx, wall, "k_", markersize=18, label="wall")
    ax.set_xlabel("run")
    ax.set_ylabel("time (ms)")
    ax.set_title("run decomposition")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(rows: list[dict], axis: str, path: str | Path) -> Path:
    """Mean wall time against the sweep axis, one line per pattern."""
    path = Path(path)
    by_pattern: dict[str, dict[float, list[float]]] = {}
    for r in rows:
        if not str(r.get("run", "")).isdigit():
            continue
        pattern = r["pattern"]
        x = float(r[axis])
        by_pattern.setdefault(pattern, {}).setdefault(x, []).append(int(r["wall_us"]) / 1e3)

    fig, ax = plt.subplots(figsize=(7, 4))
    for pattern, series in sorted(by_pattern.items()):
        xs = sorted(series)
        ys = [sum(series[x]) / len(series[x]) for x in xs]
        ax.plot(xs, ys, marker="o", label=pattern)
    if axis == "iterations":
        ax.set_xscale("log")
    ax.set_xlabel(axis)
    ax.set_ylabel("wall time (ms)")
    ax.set_title(f"wall time vs {axis}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
