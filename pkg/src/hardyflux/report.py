"""Serialization of run results and SVG figure rendering.

Every file emitted here embeds the resolved configuration, its hash, and
the seed.  JSON and CSV are byte-reproducible: key order is fixed, floats
are written with shortest round-trip repr.  Figures go through matplotlib's
SVG writer with a pinned hash salt and no creation date, so identical runs
give identical bytes there as well (the hash salt seeds the ids matplotlib
generates for clip paths and gradients).
"""
from __future__ import annotations

import hashlib
import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geometry import ARM_LABELS, INPUT_LABELS, OUT_LABELS, Layout

UNITS_NOTE = ("hbar = m = c = 1; lengths in the layout length unit, "
              "times in length over packet speed")

_SIDE_COLS = {"A": (0, 1), "B": (2, 3)}
_STATUS_COLORS = {"completed": "tab:blue", "annihilated": "tab:red",
                  "node_abort": "tab:orange"}


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _dump_json(payload: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def write_stats_json(path, stats, config: dict) -> None:
    payload = {
        "config": config,
        "config_hash": config_hash(config),
        "seed": stats.seed,
        "units": UNITS_NOTE,
    }
    payload.update(stats.to_jsonable())
    _dump_json(payload, path)


def write_scan_json(path, result, config: dict) -> None:
    payload = {
        "config": config,
        "config_hash": config_hash(config),
        "units": UNITS_NOTE,
    }
    payload.update(result.to_jsonable())
    _dump_json(payload, path)


def write_trajectories_csv(path, kept, config: dict) -> None:
    """Sampled paths as delimited text, one row per stored time."""
    lines = [f"# config_hash={config_hash(config)} seed={config.get('seed')}",
             "traj_id,t,x1,y1,x2,y2,status"]
    for traj in kept:
        for t, pos in zip(traj.times, traj.positions):
            vals = ",".join(repr(float(v)) for v in (t, *pos))
            lines.append(f"{traj.traj_id},{vals},{traj.status}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _stamp(fig_path, config: dict, seed) -> None:
    """Append the config hash as an XML comment after the root element."""
    with open(fig_path, "a") as fh:
        fh.write(f"<!-- config_hash={config_hash(config)} seed={seed} -->\n")


def _save_svg(fig, path, config: dict, seed) -> None:
    with plt.rc_context({"svg.hashsalt": config_hash(config)}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    _stamp(path, config, seed)


def _draw_apparatus(ax, layout: Layout, side: str) -> None:
    labels = (INPUT_LABELS[side], *ARM_LABELS[side], *OUT_LABELS[side])
    for lb in labels:
        pts = layout.polylines[lb]
        ax.plot(pts[:, 0], pts[:, 1], color="0.55", lw=1.0, zorder=1)
        mid = 0.5 * (pts[0] + pts[-1])
        ax.annotate(lb, mid, fontsize=8, color="0.35",
                    textcoords="offset points", xytext=(3, 3))


def _traj_color(traj, side: str) -> str:
    if traj.status == "completed" and traj.output_class is not None:
        lb = traj.output_class[0 if side == "A" else 1]
        return "tab:blue" if lb.endswith("1") else "tab:green"
    return _STATUS_COLORS.get(traj.status, "0.4")


def simulate_figure(path, layout: Layout, kept, config: dict, seed,
                    title: str = "") -> None:
    """Three panes: each particle's plane and a configuration projection.

    Output-channel 1 paths draw blue, channel 2 green, annihilated red.
    """
    fig, axes = plt.subplots(1, 3, figsize=(13.0, 4.4))
    for ax, side in zip(axes[:2], ("A", "B")):
        _draw_apparatus(ax, layout, side)
        cx, cy = _SIDE_COLS[side]
        for traj in kept:
            ax.plot(traj.positions[:, cx], traj.positions[:, cy],
                    lw=0.5, alpha=0.35, color=_traj_color(traj, side),
                    zorder=2)
        ax.set_xlabel(f"x_{side}")
        ax.set_ylabel(f"y_{side}")
        ax.set_title(f"particle {side}")
        ax.set_aspect("equal")

    ax = axes[2]
    q = layout.arm_separation / 2.0
    for traj in kept:
        ax.plot(traj.positions[:, 1], traj.positions[:, 3],
                lw=0.5, alpha=0.35, color=_traj_color(traj, "A"), zorder=2)
    ax.plot([q], [-q], marker="x", ms=8, color="k", zorder=3)
    ax.set_xlabel("y_A")
    ax.set_ylabel("y_B")
    ax.set_title("configuration projection (x marks the inner rails)")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save_svg(fig, path, config, seed)


def scan_figure(path, result, config: dict, ell: float | None = None) -> None:
    """Topology fraction against the swept parameter, with 95% intervals."""
    xs, ys, errs = [], [], []
    for p in result.points:
        if p.fraction is None:
            continue
        x = p.value / ell if (ell and result.parameter == "delta_l") else p.value
        xs.append(x)
        ys.append(p.fraction)
        errs.append(p.ci_half)
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    ax.errorbar(xs, ys, yerr=errs, fmt="o-", ms=4, lw=1.0, capsize=3)
    for level in (0.1, 0.9):
        ax.axhline(level, color="0.8", lw=0.8, ls="--", zorder=0)
    xlabel = (r"$\Delta L / \ell$" if result.parameter == "delta_l"
              else "frame velocity v")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(r"fraction $(a_1, b_2)$ among $(A_2, B_2)$")
    ax.set_ylim(-0.05, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save_svg(fig, path, config, result.seed)
