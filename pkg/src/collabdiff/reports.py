"""Epipolar-error evaluation of correspondences and small CSV / plot emitters."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import CameraPose, fundamental_matrix, symmetric_epipolar_distance

CORRESPONDENCE_COLUMNS = ("frame", "x1", "y1", "x2", "y2")


@dataclass
class CorrespondenceSet:
    frame: np.ndarray  # (N,) int
    x1: np.ndarray  # (N, 2) pixels in camera a
    x2: np.ndarray  # (N, 2) pixels in camera b

    def __len__(self):
        return len(self.frame)

    @classmethod
    def read_csv(cls, path) -> "CorrespondenceSet":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(CORRESPONDENCE_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"correspondence CSV lacks columns {sorted(missing)}")
            rows = list(reader)
        frame = np.array([int(r["frame"]) for r in rows], dtype=int)
        x1 = np.array([[float(r["x1"]), float(r["y1"])] for r in rows], dtype=float).reshape(-1, 2)
        x2 = np.array([[float(r["x2"]), float(r["y2"])] for r in rows], dtype=float).reshape(-1, 2)
        return cls(frame, x1, x2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CORRESPONDENCE_COLUMNS)
            for k, a, b in zip(self.frame, self.x1, self.x2):
                w.writerow([int(k), repr(float(a[0])), repr(float(a[1])), repr(float(b[0])), repr(float(b[1]))])


def epipolar_errors(
    corr: CorrespondenceSet, poses_a: Sequence[CameraPose], poses_b: Sequence[CameraPose]
) -> np.ndarray:
    """Symmetric point-to-epipolar-line distance (pixels) for every correspondence."""
    n_frames = min(len(poses_a), len(poses_b))
    bad = (corr.frame < 0) | (corr.frame >= n_frames)
    if bad.any():
        raise IndexError(f"frame index {int(corr.frame[bad][0])} outside 0..{n_frames - 1}")
    errors = np.empty(len(corr))
    for k in np.unique(corr.frame):
        sel = corr.frame == k
        F = fundamental_matrix(poses_a[k], poses_b[k])
        errors[sel] = symmetric_epipolar_distance(F, corr.x1[sel], corr.x2[sel])
    return errors


def summarize_errors(frames: np.ndarray, errors: np.ndarray) -> list[dict]:
    """Per-frame mean / median rows followed by an ``all`` row; empty input gives no rows."""
    rows = []
    if len(errors) == 0:
        return rows
    for k in np.unique(frames):
        e = errors[frames == k]
        rows.append({"frame": int(k), "count": len(e), "mean_px": float(e.mean()), "median_px": float(np.median(e))})
    rows.append(
        {"frame": "all", "count": len(errors), "mean_px": float(errors.mean()), "median_px": float(np.median(errors))}
    )
    return rows


def write_rows(path, rows: list[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def plot_sweep(path, xs, series: dict, xlabel: str, ylabel: str, title: str = "") -> None:
    """Static line chart; one line per entry of ``series``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in series.items():
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
