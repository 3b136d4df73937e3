"""Matplotlib figures for reports. Output is byte-stable for identical inputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
    "figure.figsize": (4.0, 3.2),
    "svg.hashsalt": "dronedet",
    "svg.fonttype": "none",
    # every curve vertex must survive into the SVG path
    "path.simplify": False,
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = path.suffix.lstrip(".") or "svg"
    meta = {"Date": None} if fmt == "svg" else None
    fig.savefig(path, format=fmt, metadata=meta)
    plt.close(fig)
    return path


def curve_gid(thr: float) -> str:
    return f"pr-{thr:.2f}"


def plot_pr_curves(curves: dict, path, title: str | None = None) -> Path:
    """One precision-recall line per IoU threshold; each line's SVG group id is ``pr-<thr>``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        cmap = plt.get_cmap("viridis")
        thrs = sorted(curves)
        for i, thr in enumerate(thrs):
            c = np.asarray(curves[thr]).reshape(-1, 2)
            if not len(c):
                continue
            (line,) = ax.plot(c[:, 0], c[:, 1], color=cmap(i / max(len(thrs) - 1, 1)), label=f"IoU {thr:.2f}")
            line.set_gid(curve_gid(thr))
        ax.set_xlim(0, 1.0)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.grid(True, ls="--", alpha=0.4)
        if ax.lines:
            ax.legend(loc="lower left", ncol=2)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_coverage_map(counts, path, title: str | None = None) -> Path:
    """Monochrome heatmap of tap-path counts; zero cells render white."""
    counts = np.asarray(counts)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        ax.imshow(counts > 0 if counts.max() <= 1 else counts, cmap="Greys", interpolation="nearest", vmin=0)
        ax.set_xticks([])
        ax.set_yticks([])
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def count_svg_vertices(svg_text: str, gid: str) -> int:
    """Number of path vertices inside the SVG group with id ``gid``."""
    import xml.etree.ElementTree as ET

    root = ET.fromstring(svg_text)
    ns = "{http://www.w3.org/2000/svg}"
    for g in root.iter(f"{ns}g"):
        if g.get("id") == gid:
            total = 0
            for p in g.iter(f"{ns}path"):
                d = p.get("d", "").split()
                total += sum(1 for tok in d if tok in ("M", "L"))
            return total
    raise KeyError(f"no SVG group with id {gid!r}")
