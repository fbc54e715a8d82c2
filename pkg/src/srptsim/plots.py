"""SVG figures for a finished grid."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .vehicle import X, Y  # noqa: E402


def _label(spec) -> str:
    return f"{spec.mode} {spec.noise_set} {'delay' if spec.delay else 'no delay'}"


def plot_trajectories(logs, track, path) -> None:
    fig, ax = plt.subplots(figsize=(9, 7))
    ax.plot(track.x, track.y, color="k", lw=2.5, alpha=0.3, label="centerline")
    for log in logs:
        ax.plot(log.truth[:, X], log.truth[:, Y], lw=0.8, label=_label(log.spec))
    for r in track.regions:
        x, y, _ = track.pose_at(0.5 * (r.s0 + r.s1))
        ax.annotate(r.label, (x, y), fontsize=12, weight="bold")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(fontsize=6, loc="best")
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_region_bars(rows, path) -> None:
    regions = sorted({r["region"] for r in rows})
    runs = []
    for r in rows:
        key = (r["mode"], r["noiseSet"], r["delay"])
        if key not in runs:
            runs.append(key)
    fig, axes = plt.subplots(2, 1, figsize=(11, 7), sharex=True)
    width = 0.8 / max(len(runs), 1)
    idx = np.arange(len(regions))
    for j, key in enumerate(runs):
        sel = {r["region"]: r for r in rows if (r["mode"], r["noiseSet"], r["delay"]) == key}
        for ax, col in zip(axes, ("maxDY", "rmsDY")):
            ax.bar(idx + j * width, [sel[g][col] for g in regions], width,
                   label=" ".join(key))
    axes[0].set_ylabel("max |dY| [m]")
    axes[1].set_ylabel("RMS dY [m]")
    axes[1].set_xticks(idx + 0.4 - width / 2, regions)
    axes[0].legend(fontsize=6, ncol=2)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_divergence(logs, path) -> None:
    from .harness import divergence_window

    fig, axes = plt.subplots(3, 1, figsize=(10, 7), sharex=True)
    for log in logs:
        if log.spec.mode != "srpt-ekf" or len(log) < 40:
            continue
        d = divergence_window(log)
        for k, ax in enumerate(axes):
            vals = np.degrees(d[:, 3]) if k == 2 else d[:, k + 1]
            ax.plot(d[:, 0], vals, lw=0.6, label=_label(log.spec))
    for ax, name in zip(axes, ("ex [m]", "ey [m]", "epsi [deg]")):
        ax.set_ylabel(name)
    axes[-1].set_xlabel("t [s]")
    axes[0].legend(fontsize=6, ncol=2)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
