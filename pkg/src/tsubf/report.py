"""CSV tables and matplotlib figures for training logs, ablations and evaluations."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

ABLATION_COLUMNS = ("lambda", "dsc", "hd95", "smoothness", "best_step", "final_loss")
GRADCHECK_COLUMNS = ("check", "max_rel_error", "tolerance", "checked", "passed")


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_losses(losses_csv, out_png) -> Path:
    rows = read_csv(losses_csv)
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("total", "dice_ce", "sobel"):
        ax.plot(steps, [float(r[key]) for r in rows], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, out_png)


def plot_validation(val_csv, out_png) -> Path:
    rows = read_csv(val_csv)
    steps = [int(r["step"]) for r in rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    a.plot(steps, [float(r["dsc"]) for r in rows], marker="o")
    a.set_ylabel("val DSC")
    b.plot(steps, [float(r["hd95"]) for r in rows], marker="o", color="tab:red")
    b.set_ylabel("val HD95 (voxels)")
    for ax in (a, b):
        ax.set_xlabel("step")
        ax.grid(alpha=0.3)
    return _save(fig, out_png)


def plot_ablation(rows: list[dict], out_png) -> Path:
    """``rows`` carry ``lambda``, ``dsc``, ``hd95`` and ``smoothness``."""
    labels = [str(r["lambda"]) for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.5))
    for ax, key in zip(axes, ("dsc", "hd95", "smoothness")):
        ax.bar(labels, [float(r[key]) for r in rows])
        ax.set_xlabel("lambda")
        ax.set_title(key)
    return _save(fig, out_png)


def plot_eval(report, out_png) -> Path:
    """Per-class mean DSC / IoU / HD95 bars from an ``EvalReport``."""
    agg = report.aggregate_rows
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.5))
    for ax, key in zip(axes, ("dsc", "iou", "hd95")):
        ax.bar([str(r.class_id) for r in agg], [getattr(r, key) for r in agg])
        ax.set_xlabel("class")
        ax.set_title(key)
    return _save(fig, out_png)


def _save(fig, out_png) -> Path:
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(out_png, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out_png
