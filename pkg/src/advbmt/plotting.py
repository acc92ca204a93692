"""Deterministic SVG figures: bird's-eye scenario views and report histograms."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

from matplotlib import rc_context  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from advbmt.geometry import OrientedBox  # noqa: E402
from advbmt.metrics import EvalReport, Histogram  # noqa: E402
from advbmt.scenario import Scenario, atomic_write_bytes  # noqa: E402

EGO_COLOR = "#d62728"
ADV_COLOR = "#ff7f0e"
AGENT_COLOR = "#1f77b4"
MAP_STYLE = {
    "lane": dict(color="#c7c7c7", lw=0.6, ls=(0, (4, 3))),
    "road_edge": dict(color="#4d4d4d", lw=1.2, ls="-"),
    "broken_line": dict(color="#9a9a9a", lw=0.8, ls=(0, (6, 4))),
    "yellow_line": dict(color="#e0b000", lw=1.0, ls="-"),
    "crosswalk": dict(color="#7f7f7f", lw=2.0, ls="-"),
    "stop_sign": dict(color="#b22222", lw=1.5, ls="-"),
}
_RC = {"svg.hashsalt": "advbmt", "svg.fonttype": "none", "path.simplify": False}


def _svg_bytes(fig: Figure) -> bytes:
    buf = io.BytesIO()
    with rc_context(_RC):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    return buf.getvalue()


def scenario_figure(s: Scenario, adv_id: str | None = None, every: int = 3) -> Figure:
    """Map polylines plus agent boxes at every ``every``-th step, fading with age."""
    with rc_context(_RC):
        fig = Figure(figsize=(7, 7))
        ax = fig.add_subplot()
        for pl in s.map:
            xs, ys = zip(*pl.points)
            ax.plot(xs, ys, zorder=1, **MAP_STYLE.get(pl.kind, MAP_STYLE["lane"]))
        steps = list(range(0, s.num_steps, every))
        if steps[-1] != s.num_steps - 1:
            steps.append(s.num_steps - 1)
        for a in s.agents:
            if a.is_ego:
                color, z = EGO_COLOR, 4
            elif adv_id is not None and a.id == adv_id:
                color, z = ADV_COLOR, 3
            else:
                color, z = AGENT_COLOR, 2
            for rank, t in enumerate(steps):
                st = a.states[t]
                if not st.valid:
                    continue
                alpha = 0.15 + 0.85 * (rank + 1) / len(steps)
                box = OrientedBox.of(a, st)
                ax.add_patch(Polygon(box.corners(), closed=True, facecolor=color, edgecolor="black",
                                     linewidth=0.3, alpha=alpha, zorder=z))
        ax.set_aspect("equal")
        ax.autoscale_view()
        ax.set_title(s.scenario_id)
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
    return fig


def scenario_svg(s: Scenario, adv_id: str | None = None, every: int = 3) -> bytes:
    return _svg_bytes(scenario_figure(s, adv_id, every))


def _hist_axis(ax, pred: Histogram, gt: Histogram, title: str, jsd_value: float) -> None:
    edges = pred.edges()
    width = edges[1] - edges[0]
    ax.bar(edges[:-1], gt.probs(), width=width, align="edge", alpha=0.5, color="#7f7f7f", label="source")
    ax.bar(edges[:-1], pred.probs(), width=width, align="edge", alpha=0.5, color=ADV_COLOR, label="generated")
    ax.set_title(f"{title}  JSD={jsd_value:.3f}")
    ax.legend(fontsize=7)


def report_figure(report: EvalReport) -> Figure:
    """Velocity, acceleration and TTC distributions of both corpora."""
    h = report.histograms
    with rc_context(_RC):
        fig = Figure(figsize=(12, 3.5))
        axes = fig.subplots(1, 3)
        _hist_axis(axes[0], h["pred"].velocity, h["gt"].velocity, "speed [m/s]", report.jsd_velocity)
        _hist_axis(axes[1], h["pred"].accel, h["gt"].accel, "acceleration [m/s^2]", report.jsd_accel)
        _hist_axis(axes[2], h["pred"].ttc, h["gt"].ttc, "TTC [s]", report.jsd_ttc)
        fig.tight_layout()
    return fig


def report_svg(report: EvalReport) -> bytes:
    return _svg_bytes(report_figure(report))


def write_svg(data: bytes, path: str | Path) -> None:
    atomic_write_bytes(Path(path), data)
