"""
Text tables and two-panel SVG charts for aggregated simulation output.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .inference import CFI_CUTOFF, RMSEA_CUTOFF  # noqa: E402
from .simulation import AGGREGATE_FIELDS  # noqa: E402

PANELS = ("chisq", "indices", "both")

_STYLE = {
    "svg.hashsalt": "cfachi",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
}

_INDEX_SERIES = (("mean_cfi", "CFI", "-"), ("mean_tli", "TLI", "--"), ("mean_rmsea", "RMSEA", ":"))


def _cell(value):
    if isinstance(value, float):
        if math.isnan(value):
            return "-"
        return f"{value:.4f}"
    return str(value)


def format_table(rows) -> str:
    header = list(AGGREGATE_FIELDS)
    body = [[_cell(getattr(r, h)) for h in header] for r in rows]
    widths = [max(len(h), *(len(b[k]) for b in body)) if body else len(h)
              for k, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def _series(rows):
    """Group aggregate rows into polylines keyed by (scenario, estimator, variant)."""
    out = {}
    for r in rows:
        out.setdefault((r.scenario, r.estimator, r.model_variant), []).append(r)
    for v in out.values():
        v.sort(key=lambda r: r.N)
    return out


def _label(key, multi_scenario):
    scenario, est, variant = key
    text = f"{est} ({variant})"
    return f"{scenario}: {text}" if multi_scenario else text


def render_chart(rows, path, panel: str = "both") -> None:
    """Write an SVG line chart of mean statistics and fit indices against N."""
    if panel not in PANELS:
        raise ValueError(f"panel must be one of {PANELS}")
    if not rows:
        raise ValueError("no aggregate rows to plot")
    series = _series(rows)
    multi = len({k[0] for k in series}) > 1
    show = ("chisq", "indices") if panel == "both" else (panel,)

    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(show), figsize=(5.5 * len(show), 4.0), squeeze=False)
        for ax, which in zip(axes[0], show):
            ax.set_xscale("log")
            ax.set_xlabel("N")
            if which == "chisq":
                ax.set_title("Mean test statistic")
                ax.set_ylabel("mean T")
                for df in sorted({r.df for r in rows}):
                    ax.axhline(df, color="0.5", lw=0.8, ls="--", gid=f"ref-df-{df}")
                for key, pts in series.items():
                    (line,) = ax.plot([r.N for r in pts], [r.mean_T for r in pts], marker="o",
                                      label=_label(key, multi))
                    line.set_gid("series-chisq-" + "-".join(key))
            else:
                ax.set_title("Mean fit indices")
                ax.set_ylabel("index value")
                ax.axhline(CFI_CUTOFF, color="0.5", lw=0.8, ls="--", gid="ref-cfi-tli")
                ax.axhline(RMSEA_CUTOFF, color="0.5", lw=0.8, ls=":", gid="ref-rmsea")
                for k, (key, pts) in enumerate(series.items()):
                    color = f"C{k % 10}"
                    for attr, name, ls in _INDEX_SERIES:
                        (line,) = ax.plot([r.N for r in pts], [getattr(r, attr) for r in pts],
                                          color=color, ls=ls, marker="o",
                                          label=f"{name} {_label(key, multi)}")
                        line.set_gid(f"series-{name.lower()}-" + "-".join(key))
            ax.legend(loc="best", frameon=False)
        fig.tight_layout()
        fig.savefig(Path(path), format="svg", metadata={"Date": None})
        plt.close(fig)
