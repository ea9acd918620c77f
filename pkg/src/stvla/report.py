"""Report files: JSON summary, CSV rows, per-rollout trajectory dumps, and
matplotlib figures rendered to SVG next to the delimited output.

Everything written here is byte-deterministic for a given report: JSON keys
are sorted, floats go through repr, and the SVG figures pin matplotlib's hash
salt and drop the date metadata.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "stvla"
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluate import EvalReport, EpisodeRow  # noqa: E402

_SVG_META = {"Date": None}


def dump_trajectory(trace, path: str | Path) -> None:
    """One line per step: t, x, y, z, rx, ry, rz, grip, event."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("t, x, y, z, rx, ry, rz, grip, event\n")
        for row in trace:
            vals = [row.t, *row.pos, *row.rot_aa, row.grip]
            fh.write(", ".join(f"{v:.9f}" for v in vals) + f", {row.event}\n")


def trajectory_figure(trace, path: str | Path, title: str = "") -> None:
    """Two panels: top-down xy path and per-step speed versus time."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ts = np.array([row.t for row in trace])
    pos = np.array([row.pos for row in trace])
    fig, (ax_path, ax_speed) = plt.subplots(1, 2, figsize=(8.0, 3.4))
    ax_path.plot(pos[:, 0], pos[:, 1], "-o", markersize=2.5, linewidth=1.0)
    ax_path.plot(pos[0, 0], pos[0, 1], "s", color="tab:green", label="start")
    ax_path.plot(pos[-1, 0], pos[-1, 1], "*", color="tab:red", markersize=10,
                 label="end")
    ax_path.set_xlabel("x [m]")
    ax_path.set_ylabel("y [m]")
    ax_path.set_title("gripper path")
    ax_path.legend(loc="best", fontsize=8)
    ax_path.set_aspect("equal", adjustable="datalim")

    if len(trace) > 1:
        dt = np.diff(ts)
        dist = np.linalg.norm(np.diff(pos, axis=0), axis=1)
        speed = np.divide(dist, dt, out=np.zeros_like(dist), where=dt > 0)
        ax_speed.step(ts[1:], speed, where="pre")
    ax_speed.set_xlabel("t [s]")
    ax_speed.set_ylabel("speed [m/s]")
    ax_speed.set_title("motion speed")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def training_curve_figure(stage_summaries: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for name, summary in sorted(stage_summaries.items()):
        losses = summary.get("epoch_losses", [])
        if losses:
            ax.plot(range(len(losses)), losses, "-o", markersize=3, label=f"{name} train")
        held = summary.get("heldout_losses", [])
        if held:
            ax.plot(range(len(held)), held, "--s", markersize=3, label=f"{name} heldout")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


CSV_HEADER = ["index", "suite", "variant", "scene_seed", "success",
              "completion_time", "steps", "failure_reason", "traj_file"]


def write_eval_report(report: EvalReport, out_dir: str | Path,
                      figures_per_suite: int = 2,
                      extra: dict | None = None) -> Path:
    """Write report.json + episodes.csv + per-rollout dumps + SVG figures.

    Returns the path of the JSON summary. Byte-identical for identical
    reports regardless of worker count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "traj").mkdir(exist_ok=True)

    payload = report.as_dict()
    if extra:
        payload.update(extra)
    # integrity cross-check value: SR recomputed from the rows
    payload["sr_from_rows"] = (float(np.mean([r.success for r in report.rows]))
                               if report.rows else 0.0)
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")

    with open(out_dir / "episodes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in report.rows:
            traj_file = f"traj/ep{row.index:04d}.txt"
            writer.writerow(row.csv_row() + [traj_file])

    for row in report.rows:
        dump_trajectory(row.trace, out_dir / "traj" / f"ep{row.index:04d}.txt")

    emitted: dict[str, int] = {}
    for row in report.rows:
        if emitted.get(row.suite, 0) >= figures_per_suite:
            continue
        emitted[row.suite] = emitted.get(row.suite, 0) + 1
        name = f"figures/ep{row.index:04d}_{row.suite}.svg"
        trajectory_figure(row.trace, out_dir / name,
                          title=f"{row.suite}/{row.variant} "
                                f"{'success' if row.success else 'failure'}")
    return json_path


def write_ablation_report(results: list[dict], trends: dict,
                          out_dir: str | Path) -> Path:
    """Comparative table (CSV + JSON) over ablation variants and seeds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ["variant", "seed", "sr", "sr_std", "ct_mean", "ct_median",
            "heldout_dt_mae", "stage1_flagged"]
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in results:
            writer.writerow([r.get(c, "") for c in cols])
    payload = {"rows": results, "trends": trends}
    path = out_dir / "ablation.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path
