"""PNG figures of value-vs-K curves from tidy (series, K, value, stderr) rows."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 7,
    "legend.frameon": False,
}


def panel_key(series: str) -> str:
    """Series are ``model/mode/trajectory``; curves sharing a mode share a panel."""
    parts = series.split("/")
    return parts[1] if len(parts) > 1 else "value"


def plot_curves(rows: list[dict], out_dir, stem: str = "plot") -> list[Path]:
    """One PNG per panel, each series drawn with +-2 SE error bars."""
    panels: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        panels[panel_key(r["series"])][r["series"]].append(
            (int(r["K"]), float(r["value"]), float(r["stderr"])))
    out = []
    with plt.rc_context(RC):
        for panel, series in sorted(panels.items()):
            fig, ax = plt.subplots()
            for name, pts in sorted(series.items()):
                pts.sort()
                K = [p[0] for p in pts]
                ax.errorbar(K, [p[1] for p in pts], yerr=[2 * p[2] for p in pts],
                            marker="o", ms=3, capsize=2, lw=1, label=name)
            ax.set_xscale("log")
            ax.set_xlabel("K (number of reverse steps)")
            ax.set_ylabel(panel)
            ax.legend(loc="best")
            path = Path(out_dir) / f"{stem}_{panel}.png"
            fig.savefig(path)
            plt.close(fig)
            out.append(path)
    return out
