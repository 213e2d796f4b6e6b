"""Matplotlib figures: timeline Gantt charts and tuner summaries."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .cssr import BWD, FWD, IGRAD, WGRAD  # noqa: E402
from .grid import ScheduleGrid, abbrev  # noqa: E402
from .simulator import Event, Timeline  # noqa: E402

_COLORS = {FWD: "#4c78a8", BWD: "#f58518", IGRAD: "#e45756", WGRAD: "#72b7b2"}
_OTHER = "#b279a2"
_IDLE = "#d9d9d9"


def _busy_intervals(events: Sequence[Event]) -> list[tuple[float, float]]:
    spans = sorted((e.start, e.end) for e in events if e.kind == "compute" and e.end > e.start)
    merged: list[list[float]] = []
    for s, e in spans:
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


def gantt(timeline: Timeline, actors: Sequence[int] | None = None, makespan: float | None = None,
          title: str | None = None, labels: bool = True):
    """One lane per actor; computations labelled ``<type><stage>:<mb>``, idle time shaded,
    communication drawn as thin markers.  Returns the figure."""
    events = timeline.events
    actors = sorted({e.actor for e in events}) if actors is None else list(actors)
    if makespan is None:
        makespan = max((e.end for e in events), default=0.0)
    width = max(6.0, min(40.0, 0.45 * max(makespan, 1.0)))
    fig, ax = plt.subplots(figsize=(width, 0.6 * len(actors) + 1.2))
    lane = {a: i for i, a in enumerate(actors)}
    for a in actors:
        y = lane[a]
        mine = [e for e in events if e.actor == a]
        t = 0.0
        for s, e in _busy_intervals(mine) + [(makespan, makespan)]:
            if s > t:
                ax.add_patch(Rectangle((t, y - 0.4), s - t, 0.8, facecolor=_IDLE, hatch="//", edgecolor="#aaaaaa",
                                       linewidth=0.0, gid="idle"))
            t = max(t, e)
        for ev in mine:
            if ev.kind == "compute":
                ax.add_patch(Rectangle((ev.start, y - 0.4), ev.end - ev.start, 0.8,
                                       facecolor=_COLORS.get(ev.op, _OTHER), edgecolor="black", linewidth=0.5,
                                       gid="compute"))
                if labels:
                    ax.text((ev.start + ev.end) / 2, y, f"{abbrev(ev.op)}{ev.stage_id}:{ev.mb}", ha="center",
                            va="center", fontsize=6, color="white")
            else:
                ax.plot([ev.start, ev.start], [y - 0.45, y + 0.45], color="black", linewidth=0.6, gid="comm")
    ax.set_xlim(0, makespan if makespan > 0 else 1)
    ax.set_ylim(-0.6, len(actors) - 0.4)
    ax.set_yticks(range(len(actors)))
    ax.set_yticklabels([f"actor {a}" for a in actors])
    ax.invert_yaxis()
    if 0 < makespan <= 64 and float(makespan).is_integer():
        ax.set_xticks(range(int(makespan) + 1))
    ax.set_xlabel("time")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return fig


def grid_timeline(grid: ScheduleGrid) -> Timeline:
    """A unit-time timeline straight from grid slots (no simulation)."""
    events = [Event(a, item.inst_type, item.stage_id, item.mb, float(s), float(e), "compute")
              for a in grid.actors for s, e, item in grid.spans(a)]
    return Timeline(events)


def render_grid(grid: ScheduleGrid, path, title: str | None = None):
    fig = gantt(grid_timeline(grid), grid.actors, float(grid.num_slots), title)
    fig.savefig(path)
    return fig


def tuner_bars(labels: Sequence[str], values: Sequence[float], objective: str, path=None):
    fig, ax = plt.subplots(figsize=(8, 0.35 * max(len(labels), 1) + 1.5))
    ys = range(len(labels))
    ax.barh(list(ys), list(values), color="#4c78a8")
    ax.set_yticks(list(ys))
    ax.set_yticklabels(list(labels), fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel(objective)
    fig.tight_layout()
    if path is not None:
        fig.savefig(path)
    return fig


def close(fig) -> None:
    plt.close(fig)


__all__ = ["gantt", "grid_timeline", "render_grid", "tuner_bars", "close"]
