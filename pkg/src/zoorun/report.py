"""Verification reports: tab-delimited verdict rows plus comparison figures."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .ndtensor import Tensor

HEADER = ("output", "verdict", "max_abs_diff", "tolerance")


def verdict_rows(verdicts) -> list[tuple[str, ...]]:
    return [
        (v.name, "PASS" if v.passed else "FAIL", f"{v.max_abs_diff:.6g}", f"{v.tolerance:g}")
        for v in verdicts
    ]


def write_tsv(path, rows: Sequence[Sequence[str]], header=HEADER) -> Path:
    path = Path(path)
    lines = ["\t".join(header)] + ["\t".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def plane(t: Tensor) -> np.ndarray:
    """A 2-D view for display: the y/x plane at index 0 of every other axis."""
    index = []
    for letter, n in zip(t.axes, t.shape):
        index.append(slice(None) if letter in "yx" else 0)
    arr = t.data[tuple(index)].astype(np.float64)
    kept = [a for a in t.axes if a in "yx"]
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if kept == ["x", "y"]:
        arr = arr.T
    return arr


def render_verdict(v, path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    expected, actual = plane(v.expected), plane(v.actual)
    fig, axs = plt.subplots(1, 3, figsize=(10, 3.4))
    for ax, img, title in ((axs[0], expected, "expected"), (axs[1], actual, "actual")):
        im = ax.imshow(img, cmap="gray", interpolation="nearest")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
    if expected.shape == actual.shape:
        diff = np.nan_to_num(np.abs(expected - actual))
        im = axs[2].imshow(diff, cmap="magma", interpolation="nearest",
                           vmin=0.0, vmax=max(float(diff.max()), 1e-12))
        fig.colorbar(im, ax=axs[2], fraction=0.046)
    axs[2].set_title(f"|diff| (max {v.max_abs_diff:.3g})")
    for ax in axs:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(f"{v.name}: {'PASS' if v.passed else 'FAIL'}")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def write_report(verdicts, out_dir) -> list[Path]:
    """``report.tsv`` plus one ``<output>.png`` per compared output."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [write_tsv(out_dir / "report.tsv", verdict_rows(verdicts))]
    for v in verdicts:
        paths.append(render_verdict(v, out_dir / f"{v.name}.png"))
    return paths
