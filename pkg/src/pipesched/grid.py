"""Slot-indexed schedule matrix and its JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .cssr import BWD, FWD, IGRAD, WGRAD, Item

_ABBREV = {FWD: "F", BWD: "B", IGRAD: "I", WGRAD: "W"}


def abbrev(inst_type: str) -> str:
    return _ABBREV.get(inst_type, inst_type[:2])


@dataclass
class ScheduleGrid:
    """``rows[i][t]`` is the item actor ``actors[i]`` runs in slot ``t`` or ``None`` (a bubble).

    An item spanning several slots repeats in consecutive cells.
    """

    actors: list[int]
    rows: list[list[Item | None]]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        width = max((len(r) for r in self.rows), default=0)
        self.rows = [list(r) + [None] * (width - len(r)) for r in self.rows]

    @property
    def num_slots(self) -> int:
        return len(self.rows[0]) if self.rows else 0

    def row(self, actor: int) -> list[Item | None]:
        return self.rows[self.actors.index(actor)]

    def spans(self, actor: int) -> list[tuple[int, int, Item]]:
        """``(start, end, item)`` runs of one actor's row, in slot order."""
        out = []
        row = self.row(actor)
        n = len(row)
        t = 0
        while t < n:
            item = row[t]
            if item is None:
                t += 1
                continue
            end = t + 1
            # cells of one item are usually the same object; fall back to equality
            while end < n and (row[end] is item or row[end] == item):
                end += 1
            out.append((t, end, item))
            t = end
        return out

    def sequence(self, actor: int) -> list[Item]:
        return [item for _, _, item in self.spans(actor)]

    def slots(self) -> dict[tuple[Item, int], tuple[int, int]]:
        """Map ``(item, actor)`` to its ``(start, end)`` slots."""
        out = {}
        for a in self.actors:
            for start, end, item in self.spans(a):
                out[(item, a)] = (start, end)
        return out

    def nop_count(self, actor: int | None = None) -> int:
        if actor is None:
            return sum(r.count(None) for r in self.rows)
        return self.row(actor).count(None)

    def bubble_ratio(self) -> float:
        total = self.num_slots * len(self.actors)
        return self.nop_count() / total if total else 0.0

    def count(self, inst_type: str) -> int:
        return sum(1 for a in self.actors for item in self.sequence(a) if item.inst_type == inst_type)

    def to_dict(self) -> dict:
        return {
            "actors": list(self.actors),
            "num_slots": self.num_slots,
            "rows": [
                [None if c is None else {"type": c.inst_type, "stage": c.stage_id, "mb": c.mb} for c in row]
                for row in self.rows
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> ScheduleGrid:
        rows = [
            [None if c is None else Item(c["type"], int(c["stage"]), int(c["mb"])) for c in row]
            for row in data["rows"]
        ]
        grid = cls(list(data["actors"]), rows)
        if grid.num_slots != data.get("num_slots", grid.num_slots):
            raise ValueError(f"num_slots {data['num_slots']} does not match row length {grid.num_slots}")
        return grid

    @classmethod
    def loads(cls, text: str) -> ScheduleGrid:
        return cls.from_dict(json.loads(text))

    def render_text(self, width: int = 10) -> str:
        lines = []
        for a, row in zip(self.actors, self.rows):
            cells = []
            for c in row:
                if c is None:
                    cells.append(".".center(width))
                else:
                    cells.append(f"{abbrev(c.inst_type)}{c.stage_id}:{c.mb}".center(width))
            lines.append(f"a{a:<3}|" + "|".join(cells) + "|")
        return "\n".join(lines)
