"""Grid lowering: per-actor instruction programs with communication, and gradient separation."""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable

from .cssr import (
    BWD,
    CSSR,
    FWD,
    IGRAD,
    RECV_ACT,
    RECV_GRAD,
    SEND_ACT,
    SEND_GRAD,
    WGRAD,
    Item,
)
from .grid import ScheduleGrid

logger = logging.getLogger(__name__)

SYNC = "sync"
ASYNC = "async"
WAIT = "WaitRecv"
P2P_OPS = frozenset({SEND_ACT, SEND_GRAD, RECV_ACT, RECV_GRAD, WAIT})


@dataclass
class Instruction:
    op: str
    stage_id: int
    micro_batch_id: int
    peer: int | None = None
    channel_tag: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ActorProgram:
    actor_id: int
    instructions: list[Instruction] = field(default_factory=list)
    comm_mode: str = SYNC

    def computations(self) -> list[Instruction]:
        """Instructions that are neither point-to-point transfers nor collectives."""
        return [i for i in self.instructions if i.op not in P2P_OPS and i.channel_tag is None]

    def dumps(self) -> str:
        lines = []
        for ins in self.instructions:
            lines.append(json.dumps({"actor": self.actor_id, "mode": self.comm_mode, **ins.to_dict()}))
        return "\n".join(lines) + ("\n" if lines else "")


def dump_programs(programs: Iterable[ActorProgram]) -> str:
    return "".join(p.dumps() for p in programs)


def load_programs(text: str) -> list[ActorProgram]:
    progs: dict[int, ActorProgram] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        actor = int(rec.pop("actor"))
        mode = rec.pop("mode", SYNC)
        prog = progs.setdefault(actor, ActorProgram(actor, comm_mode=mode))
        prog.instructions.append(Instruction(**rec))
    return [progs[a] for a in sorted(progs)]


# -- dependency view of a (possibly separated) grid -------------------------------------


def grid_dependencies(cssr: CSSR, grid: ScheduleGrid) -> list[tuple[tuple[Item, int], tuple[Item, int]]]:
    """Task-level edges ``(pred task, succ task)`` for the items actually present in ``grid``.

    A split backward pass is represented by its input-gradient item; its
    weight-gradient item depends on it on the same actor.
    """
    present: dict[Item, list[int]] = defaultdict(list)
    tasks = set()
    for a in grid.actors:
        for item in grid.sequence(a):
            present[item].append(a)
            tasks.add((item, a))

    def rep(key: Item, actor: int) -> Item:
        if key.inst_type == BWD and (Item(IGRAD, key.stage_id, key.mb), actor) in tasks:
            return Item(IGRAD, key.stage_id, key.mb)
        return key

    edges = []
    for u, v in cssr.dep.edges():
        for b in cssr.actors_of[v]:
            rv = rep(v, b)
            if (rv, b) not in tasks:
                continue
            for a in cssr.completing_copies(u):
                edges.append(((rep(u, a), a), (rv, b)))
    for (v_item, b), preds in cssr.local_pred.items():
        for u_item, a in preds:
            edges.append(((rep(u_item, a), a), (rep(v_item, b), b)))
    for item, actors in present.items():
        if item.inst_type == WGRAD:
            for a in actors:
                edges.append(((Item(IGRAD, item.stage_id, item.mb), a), (item, a)))
    return edges


# -- communication insertion -------------------------------------------------------------


def _send_op(item: Item) -> str:
    return SEND_ACT if item.inst_type == FWD else SEND_GRAD


def _recv_op(item: Item) -> str:
    return RECV_ACT if item.inst_type == FWD else RECV_GRAD


def _channel(u: Item, v: Item) -> str:
    kind = "act" if u.inst_type == FWD else "grad"
    return f"{kind}:{u.inst_type}:s{u.stage_id}->{v.inst_type}:s{v.stage_id}"


def insert_comm(grid: ScheduleGrid, cssr: CSSR, mode: str = SYNC) -> list[ActorProgram]:
    """Lower ``grid`` into per-actor programs.

    Each cross-actor dependency gets a send right after the producer and a
    receive before the consumer.  Registered communication items become a
    collective placeholder tagged with their group.  In async mode a
    receive is posted right after the previous wait on the same channel and
    a ``WaitRecv`` blocks before first use.
    """
    if mode not in (SYNC, ASYNC):
        raise ValueError(f"unknown comm mode {mode!r}")
    edges = grid_dependencies(cssr, grid)
    outgoing: dict[tuple[Item, int], list[tuple[Item, int]]] = defaultdict(list)
    incoming: dict[tuple[Item, int], list[tuple[Item, int]]] = defaultdict(list)
    for (u, a), (v, b) in edges:
        if a == b:
            continue
        if _is_collective(cssr, u) or _is_collective(cssr, v):
            continue  # data moves inside the collective
        outgoing[(u, a)].append((v, b))
        incoming[(v, b)].append((u, a))

    programs = []
    for a in grid.actors:
        prog = ActorProgram(a, comm_mode=mode)
        last_wait: dict[tuple[int, str], int] = {}
        body: list[Instruction] = []
        posts: list[tuple[int, Instruction]] = []  # (insert before body index, instruction)
        for item in grid.sequence(a):
            for u, src in sorted(incoming.get((item, a), ()), key=lambda t: (t[1], t[0])):
                tag = _channel(u, item)
                recv = Instruction(_recv_op(u), u.stage_id, u.mb, src, tag)
                if mode == SYNC:
                    body.append(recv)
                else:
                    posts.append((last_wait.get((src, tag), 0), recv))
                    body.append(Instruction(WAIT, u.stage_id, u.mb, src, tag))
                    last_wait[(src, tag)] = len(body)
            body.append(_lower_item(cssr, item))
            for v, dst in sorted(outgoing.get((item, a), ()), key=lambda t: (t[1], t[0])):
                body.append(Instruction(_send_op(item), item.stage_id, item.mb, dst, _channel(item, v)))
        if posts:
            by_index: dict[int, list[Instruction]] = defaultdict(list)
            for idx, ins in posts:
                by_index[idx].append(ins)
            merged = []
            for idx in range(len(body) + 1):
                merged.extend(by_index.get(idx, ()))
                if idx < len(body):
                    merged.append(body[idx])
            body = merged
        prog.instructions = body
        programs.append(prog)
    _check_matching(programs)
    return programs


def _is_collective(cssr: CSSR, item: Item) -> bool:
    return item in cssr and cssr.is_collective(item)


def _lower_item(cssr: CSSR, item: Item) -> Instruction:
    if _is_collective(cssr, item):
        group = cssr.registry[item.inst_type].inst_attr.get("group") or cssr.actors_of[item]
        tag = "group:" + ",".join(str(g) for g in sorted(group))
        return Instruction(item.inst_type, item.stage_id, item.mb, None, tag)
    return Instruction(item.inst_type, item.stage_id, item.mb)


def message_tags(programs: Iterable[ActorProgram]) -> tuple[Counter, Counter]:
    sends, recvs = Counter(), Counter()
    for prog in programs:
        for ins in prog.instructions:
            if ins.op in (SEND_ACT, SEND_GRAD):
                sends[(prog.actor_id, ins.peer, ins.channel_tag, ins.stage_id, ins.micro_batch_id)] += 1
            elif ins.op in (RECV_ACT, RECV_GRAD):
                recvs[(ins.peer, prog.actor_id, ins.channel_tag, ins.stage_id, ins.micro_batch_id)] += 1
    return sends, recvs


def _check_matching(programs: list[ActorProgram]) -> None:
    sends, recvs = message_tags(programs)
    if sends != recvs:
        raise AssertionError(f"unmatched send/recv: {sorted((sends - recvs) + (recvs - sends))[:4]}")


# -- gradient separation ------------------------------------------------------------------


def _canon(item: Item) -> Item:
    return Item(BWD, item.stage_id, item.mb) if item.inst_type == IGRAD else item


def _task_preds(cssr: CSSR) -> dict[tuple[Item, int], list[tuple[Item, int]]]:
    """Task-level predecessors with input-gradient items folded onto their backward item.

    Splitting never changes these edges, so they are built once per
    separation run instead of once per candidate.
    """
    preds: dict[tuple[Item, int], list[tuple[Item, int]]] = defaultdict(list)
    for u, v in cssr.dep.edges():
        for b in cssr.actors_of[v]:
            for a in cssr.completing_copies(u):
                preds[(_canon(v), b)].append((_canon(u), a))
    for (v_item, b), ps in cssr.local_pred.items():
        for u_item, a in ps:
            preds[(_canon(v_item), b)].append((_canon(u_item), a))
    return preds


class _Tasks:
    """Integer view of the separable grid: one id per (canonical item, actor).

    Weight-gradient items are not tasks of their own; a split task carries
    an input-gradient span in ``start``/``end`` and a weight span in ``wstart``.
    """

    def __init__(self, grid: ScheduleGrid, cssr: CSSR, widths: dict[str, int]):
        self.actors = list(grid.actors)
        self.items: list[Item] = []
        self.actor: list[int] = []
        self.index: dict[tuple[Item, int], int] = {}
        slots = grid.slots()
        for item, a in sorted(slots, key=lambda k: (slots[k][0], k[1])):
            if item.inst_type == WGRAD:
                continue
            key = (_canon(item), a)
            self.index[key] = len(self.items)
            self.items.append(key[0])
            self.actor.append(a)
        n = len(self.items)
        self.preds: list[list[int]] = [[] for _ in range(n)]
        for key, ps in _task_preds(cssr).items():
            tid = self.index.get(key)
            if tid is not None:
                self.preds[tid] = [self.index[p] for p in ps if p in self.index]
        self.is_bwd = [item.inst_type == BWD for item in self.items]
        self.full_width = [widths.get(item.inst_type, 1) for item in self.items]
        self.i_width = widths[IGRAD]
        self.w_width = widths[WGRAD]

        self.start = [0] * n
        self.end = [0] * n
        self.split = [False] * n
        self.wstart: dict[int, int] = {}
        w_at = {}
        for (item, a), (s, e) in slots.items():
            tid = self.index[(_canon(item), a)] if item.inst_type != WGRAD else None
            if item.inst_type == WGRAD:
                w_at[(Item(BWD, item.stage_id, item.mb), a)] = s
            else:
                self.start[tid], self.end[tid] = s, e
                self.split[tid] = item.inst_type == IGRAD
        for key, s in w_at.items():
            self.wstart[self.index[key]] = s
        self.orders: dict[int, list[int]] = {a: [] for a in self.actors}
        for tid in range(n):
            self.orders[self.actor[tid]].append(tid)

    def width(self, tid: int, split: list[bool]) -> int:
        return self.i_width if split[tid] else self.full_width[tid]

    def item_at(self, tid: int, split: list[bool]) -> Item:
        item = self.items[tid]
        return Item(IGRAD, item.stage_id, item.mb) if split[tid] else item


def _retime(tasks: _Tasks, split: list[bool]) -> tuple[list[int], list[int]]:
    """Earliest-slot times for fixed per-actor orders."""
    n = len(tasks.items)
    start, end = [0] * n, [-1] * n
    preds = tasks.preds
    pos = {a: 0 for a in tasks.actors}
    clock = {a: 0 for a in tasks.actors}
    remaining = n
    while remaining:
        progressed = False
        for a in tasks.actors:
            order = tasks.orders[a]
            k, now = pos[a], clock[a]
            while k < len(order):
                tid = order[k]
                ps = preds[tid]
                ready = now
                for p in ps:
                    e = end[p]
                    if e < 0:
                        break
                    if e > ready:
                        ready = e
                else:
                    start[tid] = ready
                    now = end[tid] = ready + tasks.width(tid, split)
                    k += 1
                    continue
                break
            if k != pos[a]:
                remaining -= k - pos[a]
                pos[a], clock[a] = k, now
                progressed = True
        if not progressed:
            raise RuntimeError("fixed-order retiming deadlocked")
    return start, end


def _occupancy(tasks: _Tasks, start: list[int], end: list[int], wstart: dict[int, int], length: int):
    occ = {a: bytearray(length) for a in tasks.actors}
    for tid, a in enumerate(tasks.actor):
        occ[a][start[tid]:end[tid]] = b"\x01" * (end[tid] - start[tid])
    ww = tasks.w_width
    for tid, s in wstart.items():
        occ[tasks.actor[tid]][s:s + ww] = b"\x01" * ww
    return occ


def _place_weight_grads(tasks: _Tasks, split: list[bool], start: list[int], end: list[int]) -> dict[int, int]:
    """Put each split task's weight gradient into the earliest bubble after its input gradient.

    Weight items go in FIFO order of their input gradients on each actor.
    """
    length = max(end, default=0)
    occ = _occupancy(tasks, start, end, {}, length)
    ww = tasks.w_width
    free = b"\x00" * ww
    wstart = {}
    for a in tasks.actors:
        row = occ[a]
        for tid in tasks.orders[a]:
            if not split[tid]:
                continue
            t = row.find(free, end[tid])
            if t < 0:
                t = len(row)
                # the row may end in a partial gap
                while t > end[tid] and row[t - 1] == 0 and len(row) - (t - 1) < ww:
                    t -= 1
            if t + ww > len(row):
                row.extend(bytearray(t + ww - len(row)))
            row[t:t + ww] = b"\x01" * ww
            wstart[tid] = t
    return wstart


def _num_slots(tasks: _Tasks, end: list[int], wstart: dict[int, int]) -> int:
    return max(max(end, default=0), max((s + tasks.w_width for s in wstart.values()), default=0))


def _blocked_spots(tasks: _Tasks, start: list[int], end: list[int], wstart: dict[int, int],
                   length: int) -> list[tuple[int, int]]:
    """``(actor, task)`` for bubbles followed by a non-weight item on the same actor, earliest first.

    A run of bubbles in front of the same item waits for the same thing, so
    only its first slot counts.
    """
    occ = _occupancy(tasks, start, end, wstart, length)
    spots = []
    for a in tasks.actors:
        row = occ[a]
        order = tasks.orders[a]
        k = 0
        t = row.find(0)
        while 0 <= t:
            while k < len(order) and start[order[k]] < t:
                k += 1
            if k == len(order):
                break
            spots.append((t, a, order[k]))
            t = row.find(1, t)
            t = row.find(0, t) if t >= 0 else -1
    spots.sort(key=lambda s: (s[0], s[1]))
    return [(a, tid) for _, a, tid in spots]


def _actor_prev(tasks: _Tasks, start: list[int], wstart: dict[int, int]) -> dict[int, int]:
    """Each node's predecessor in actor order; node ``n + tid`` is the weight span of task ``tid``."""
    n = len(tasks.items)
    prev: dict[int, int] = {}
    for a in tasks.actors:
        order = tasks.orders[a]
        nodes = [(start[t], t) for t in order] + [(wstart[t], n + t) for t in order if t in wstart]
        nodes.sort()
        for (_, p), (_, q) in zip(nodes, nodes[1:]):
            prev[q] = p
    return prev


def _backtrace(tasks: _Tasks, split: list[bool], end: list[int], wstart: dict[int, int], prev: dict[int, int],
               start: list[int], blocked: int) -> list[int]:
    """Unsplit backward passes on other actors that the blocked task waits for, directly or via actor order."""
    n = len(tasks.items)
    ww = tasks.w_width
    actor, at = tasks.actor[blocked], start[blocked]
    found, seen, stack = [], set(), [blocked]
    while stack:
        node = stack.pop()
        ps = [node - n] if node >= n else tasks.preds[node]
        if node in prev:
            ps = ps + [prev[node]]
        for p in ps:
            if p in seen:
                continue
            seen.add(p)
            if (wstart[p - n] + ww if p >= n else end[p]) > at:
                continue
            if p < n and tasks.actor[p] != actor and tasks.is_bwd[p] and not split[p]:
                found.append(p)
            stack.append(p)
    return sorted(found, key=lambda t: (start[t], tasks.actor[t]))


def gradient_separation(grid: ScheduleGrid, cssr: CSSR, slot_widths: dict[str, int] | None = None,
                        max_iters: int | None = None) -> ScheduleGrid:
    """Split backward passes on blocking dependency chains into input/weight gradients.

    Repeatedly takes the earliest bubble that precedes a blocked item,
    replaces the backward passes it transitively waits for on other actors
    by input-gradient items, retimes the grid with per-actor order kept,
    and drops the stashed weight-gradient items into later bubbles of the
    same actor.  A candidate is kept only if it does not lengthen the grid
    and moves work earlier; otherwise the next bubble is tried.
    """
    widths = dict(slot_widths or {})
    widths.setdefault(IGRAD, 1)
    widths.setdefault(WGRAD, 1)
    cap = max_iters if max_iters is not None else 2 * max(1, len(grid.actors))
    tasks = _Tasks(grid, cssr, widths)
    split, start, end, wstart = tasks.split, tasks.start, tasks.end, tasks.wstart
    length = grid.num_slots
    score = (length, sum(start))
    accepted = 0
    while accepted < cap:
        tried: set = set()
        improved = False
        prev = _actor_prev(tasks, start, wstart)
        for _, blocked in _blocked_spots(tasks, start, end, wstart, length):
            chain = _backtrace(tasks, split, end, wstart, prev, start, blocked)
            key = frozenset(chain)
            if not chain or key in tried:
                continue
            tried.add(key)
            c_split = list(split)
            for tid in chain:
                c_split[tid] = True
            c_start, c_end = _retime(tasks, c_split)
            c_wstart = _place_weight_grads(tasks, c_split, c_start, c_end)
            c_length = _num_slots(tasks, c_end, c_wstart)
            c_score = (c_length, sum(c_start))
            if c_score < score:
                logger.debug("gradient separation: split %d backward passes, %d -> %d slots",
                             len(chain), length, c_length)
                split, start, end, wstart, length, score = c_split, c_start, c_end, c_wstart, c_length, c_score
                accepted += 1
                improved = True
                break
        if not improved:
            break
    if accepted == 0:
        return grid
    rows = {a: [None] * length for a in tasks.actors}
    for tid, a in enumerate(tasks.actor):
        rows[a][start[tid]:end[tid]] = [tasks.item_at(tid, split)] * (end[tid] - start[tid])
    for tid, s in wstart.items():
        item = tasks.items[tid]
        rows[tasks.actor[tid]][s:s + tasks.w_width] = [Item(WGRAD, item.stage_id, item.mb)] * tasks.w_width
    return ScheduleGrid(tasks.actors, [rows[a] for a in tasks.actors], dict(grid.meta))


__all__ = [
    "SYNC", "ASYNC", "WAIT", "Instruction", "ActorProgram", "dump_programs", "load_programs",
    "grid_dependencies", "insert_comm", "message_tags", "gradient_separation",
]
