"""Actor-aware list scheduler driven by computation-type and stage-traversal priorities."""

from __future__ import annotations

import bisect
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

from .cssr import BWD, CSSR, FWD, Item, Resolver, ScheduleState
from .grid import ScheduleGrid

logger = logging.getLogger(__name__)

BWD_FIRST = "bwdpass-first"
FWD_FIRST = "fwdpass-first"
INTERLEAVED = "interleaved"
BREADTH = "breadth-first"
DEPTH = "depth-first"

_CTTP_ALIASES = {
    "bwdfirst": BWD_FIRST,
    "bwdpass-first": BWD_FIRST,
    "backward-first": BWD_FIRST,
    "fwdfirst": FWD_FIRST,
    "fwdpass-first": FWD_FIRST,
    "forward-first": FWD_FIRST,
    "interleaved": INTERLEAVED,
}
_STP_ALIASES = {"breadth-first": BREADTH, "breadth": BREADTH, "depth-first": DEPTH, "depth": DEPTH}


class SchedulerError(RuntimeError):
    pass


class DeadlockError(SchedulerError):
    """No actor can make progress while items remain; ``blocked`` maps tasks to reasons."""

    def __init__(self, step: int, blocked: dict):
        self.step = step
        self.blocked = blocked
        shown = list(blocked.items())[:8]
        detail = "; ".join(f"{item}@a{actor}: {why}" for (item, actor), why in shown)
        more = f" (+{len(blocked) - len(shown)} more)" if len(blocked) > len(shown) else ""
        super().__init__(f"no progress at step {step} with {len(blocked)} items left: {detail}{more}")


@dataclass(frozen=True)
class CompTypePriority:
    mode: str = BWD_FIRST
    unit1: int = 1
    unit2: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", _CTTP_ALIASES.get(self.mode, self.mode))
        if self.unit1 < 1 or self.unit2 < 1:
            raise ValueError("unit1 and unit2 must be >= 1")

    @property
    def builtin(self) -> bool:
        return self.mode in (BWD_FIRST, FWD_FIRST, INTERLEAVED)

    @classmethod
    def parse(cls, value) -> CompTypePriority:
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            return cls(value)
        if isinstance(value, dict):
            return cls(value.get("mode", BWD_FIRST), int(value.get("unit1", 1)), int(value.get("unit2", 1)))
        return cls(*value)


@dataclass(frozen=True)
class StageTraversalPriority:
    direction: str = BREADTH
    interval: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "direction", _STP_ALIASES.get(self.direction, self.direction))
        if self.direction not in (BREADTH, DEPTH):
            raise ValueError(f"unknown stage traversal direction {self.direction!r}")
        if self.interval is not None and self.interval < 1:
            raise ValueError(f"interval must be >= 1, got {self.interval}")

    @classmethod
    def parse(cls, value) -> StageTraversalPriority:
        if isinstance(value, cls):
            return value
        if value is None:
            return cls()
        if isinstance(value, str):
            return cls(value)
        if isinstance(value, dict):
            interval = value.get("interval")
            return cls(value.get("direction", BREADTH), None if interval is None else int(interval))
        direction, *rest = value
        return cls(direction, int(rest[0]) if rest and rest[0] is not None else None)

    def __str__(self):
        return self.direction if self.interval is None else f"({self.direction},{self.interval})"


@dataclass(frozen=True)
class StagePriorities:
    """Stage traversal priorities for the forward and backward reorder queues."""

    fstp: StageTraversalPriority = StageTraversalPriority()
    bstp: StageTraversalPriority = StageTraversalPriority()


class ReorderQueue:
    """Dependency-free items of one type on one actor, grouped by stage in placement order."""

    def __init__(self, owner: int, inst_type: str, stage_order: Sequence[int]):
        self.owner = owner
        self.inst_type = inst_type
        self.stage_order = tuple(stage_order)
        self._mbs: dict[int, list[int]] = {s: [] for s in self.stage_order}
        self._n = 0

    def push(self, item: Item) -> None:
        bisect.insort(self._mbs[item.stage_id], item.mb)
        self._n += 1

    def remove(self, item: Item) -> None:
        mbs = self._mbs.get(item.stage_id)
        if not mbs:
            raise SchedulerError(f"{item} is not in the reorder queue of actor {self.owner}")
        i = bisect.bisect_left(mbs, item.mb)
        if i == len(mbs) or mbs[i] != item.mb:
            raise SchedulerError(f"{item} is not in the reorder queue of actor {self.owner}")
        del mbs[i]
        self._n -= 1

    def __contains__(self, item: Item) -> bool:
        mbs = self._mbs.get(item.stage_id, [])
        i = bisect.bisect_left(mbs, item.mb)
        return item.inst_type == self.inst_type and i < len(mbs) and mbs[i] == item.mb

    def __len__(self):
        return self._n

    def is_empty(self) -> bool:
        return self._n == 0

    def at(self, stage_id: int) -> list[Item]:
        return [Item(self.inst_type, stage_id, mb) for mb in self._mbs.get(stage_id, ())]

    def scan(self, direction: str) -> Iterator[Item]:
        """Items stage by stage in ``direction``; micro-batches ascend within a stage."""
        order = self.stage_order if direction == BREADTH else self.stage_order[::-1]
        for sid in order:
            for mb in self._mbs[sid]:
                yield Item(self.inst_type, sid, mb)

    def items(self) -> list[Item]:
        return list(self.scan(BREADTH))


@dataclass
class TraversalState:
    pos: int | None = None
    stepped_interval: int = 0


class ActorState:
    """Per-actor scheduling state handed to step functions."""

    def __init__(self, actor: int, cssr: CSSR, sched: ScheduleState):
        self.actor = actor
        self.sched = sched
        types: dict[str, list[int]] = defaultdict(list)
        self.remaining: Counter = Counter()
        for item, a in cssr.tasks:
            if a == actor:
                self.remaining[(item.inst_type, item.stage_id)] += 1
                if item.stage_id not in types[item.inst_type]:
                    types[item.inst_type].append(item.stage_id)
        order = cssr.stage_order(actor)
        rank = {sid: i for i, sid in enumerate(order)}
        registered = [t.name for t in cssr.registry.registered() if t.name in types]
        self.registered_types = registered
        self.queues: dict[str, ReorderQueue] = {
            t: ReorderQueue(actor, t, sorted(stages, key=lambda s: rank.get(s, len(rank))))
            for t, stages in types.items()
        }
        self.traversal: dict[str, TraversalState] = defaultdict(TraversalState)
        self.last_type: str | None = None
        self.run_length = 0

    def queue(self, inst_type: str) -> ReorderQueue | None:
        return self.queues.get(inst_type)

    def exhausted(self, inst_type: str, stage_id: int) -> bool:
        return self.remaining[(inst_type, stage_id)] == 0

    def note_fetch(self, item: Item) -> None:
        self.remaining[(item.inst_type, item.stage_id)] -= 1
        if item.inst_type == self.last_type:
            self.run_length += 1
        else:
            self.last_type, self.run_length = item.inst_type, 1

    def preferred(self, cttp: CompTypePriority) -> str:
        """Interleaved alternation: keep a type until its run length is reached, starting with FwdPass."""
        if self.last_type not in (FWD, BWD):
            return FWD
        unit = cttp.unit1 if self.last_type == FWD else cttp.unit2
        if self.run_length >= unit:
            return BWD if self.last_type == FWD else FWD
        return self.last_type

    def move(self, inst_type: str, direction: str) -> None:
        """Advance the interval cursor one stage group, skipping exhausted stages (wraps around)."""
        trav = self.traversal[inst_type]
        order = self.queues[inst_type].stage_order
        n = len(order)
        if trav.pos is None:
            candidates = range(n) if direction == BREADTH else range(n - 1, -1, -1)
        else:
            step = 1 if direction == BREADTH else -1
            candidates = [(trav.pos + step * k) % n for k in range(1, n + 1)]
        for idx in candidates:
            if not self.exhausted(inst_type, order[idx]):
                trav.pos, trav.stepped_interval = idx, 0
                return


def sort_inst_types(cttp: CompTypePriority, states: ActorState) -> list[str]:
    if cttp.mode == FWD_FIRST:
        first = [FWD, BWD]
    elif cttp.mode == INTERLEAVED:
        pref = states.preferred(cttp)
        first = [pref, BWD if pref == FWD else FWD]
    else:
        first = [BWD, FWD]
    return first + states.registered_types


def parse_stp(stp: StagePriorities, inst_type: str) -> tuple[str, int | None]:
    if inst_type == FWD:
        return stp.fstp.direction, stp.fstp.interval
    if inst_type == BWD:
        return stp.bstp.direction, stp.bstp.interval
    return BREADTH, None


def fetch_inst1(queue: ReorderQueue, stage_id: int, cfuncs: Callable[[Item], bool]) -> Item | None:
    for item in queue.at(stage_id):
        if cfuncs(item):
            return item
    return None


def fetch_inst2(queue: ReorderQueue, direction: str, cfuncs: Callable[[Item], bool]) -> Item | None:
    for item in queue.scan(direction):
        if cfuncs(item):
            return item
    return None


def step_function(actorid: int, states: ActorState, cttp: CompTypePriority, stp: StagePriorities,
                  cfuncs: Callable[[Item], bool]) -> Item | None:
    """Pick one item for ``actorid`` this step, or ``None`` for a bubble.

    Instruction types are tried in ``cttp`` order.  With an interval the
    cursor stays on one stage until ``interval`` items of it were taken;
    otherwise the queue is scanned in the traversal direction.  A queue
    with nothing fetchable falls through to the next type.
    """
    for insttype in sort_inst_types(cttp, states):
        queue = states.queue(insttype)
        if queue is None or queue.is_empty():
            continue
        direction, interval = parse_stp(stp, insttype)
        if interval is not None:
            trav = states.traversal[insttype]
            order = queue.stage_order
            if (trav.pos is None or trav.stepped_interval >= interval
                    or states.exhausted(insttype, order[trav.pos])):
                states.move(insttype, direction)
            if trav.pos is None:
                continue
            item = fetch_inst1(queue, order[trav.pos], cfuncs)
            if item is None:
                continue
            trav.stepped_interval += 1
            return item
        item = fetch_inst2(queue, direction, cfuncs)
        if item is not None:
            return item
    return None


def _rescue_cursors(states: dict[int, ActorState], prios, cfuncs) -> bool:
    """Last resort before declaring a deadlock.

    An interval cursor parked on a stage whose items can never arrive
    (they depend on this actor's other stages) stalls every actor.  Move
    each such cursor to the nearest stage, in its traversal direction,
    that holds a fetchable item.  Returns whether any cursor moved.
    """
    moved = False
    for a in sorted(states):
        st = states[a]
        cttp, stp = prios[a]
        if not cttp.builtin:
            continue
        for insttype in sort_inst_types(cttp, st):
            queue = st.queue(insttype)
            if queue is None or queue.is_empty():
                continue
            direction, interval = parse_stp(stp, insttype)
            if interval is None:
                continue
            item = fetch_inst2(queue, direction, cfuncs[a])
            if item is None:
                continue
            trav = st.traversal[insttype]
            trav.pos, trav.stepped_interval = queue.stage_order.index(item.stage_id), 0
            logger.debug("actor %d: %s cursor moved to stage %d to avoid a stall", a, insttype, item.stage_id)
            moved = True
            break
    return moved


StepFunc = Callable[[int, ActorState, CompTypePriority, StagePriorities, Callable[[Item], bool]], "Item | None"]


def limit_table(graph, limits: Sequence[int]) -> dict[int, int]:
    """Map in-flight limits to stage ids.

    ``limits`` lists one value per real stage (by stage id) or one value
    per pipeline position, shared by every pipeline of that length.
    """
    real = sorted(graph.real_stages, key=lambda s: s.stage_id)
    if len(limits) == len(real):
        return {s.stage_id: lim for s, lim in zip(real, limits)}
    pipelines = {p: graph.pipeline_stages(p) for p in graph.pipelines()}
    if pipelines and all(len(st) == len(limits) for st in pipelines.values()):
        return {s.stage_id: limits[s.position - 1] for st in pipelines.values() for s in st}
    raise ValueError(f"{len(limits)} in-flight limits for {len(real)} stages")


class Scheduler:
    """Builds a :class:`ScheduleGrid` from a CSSR under per-actor priorities.

    Every scheduling step, each idle actor calls its step function; the
    picked items are committed and the resolver releases their successors,
    which become fetchable from the next step on.  ``slot_widths`` lets an
    instruction type occupy several consecutive slots.
    """

    def __init__(self, cssr: CSSR, slot_widths: dict[str, int] | None = None):
        self.cssr = cssr
        self.slot_widths = {k: int(v) for k, v in (slot_widths or {}).items()}
        if any(w < 1 for w in self.slot_widths.values()):
            raise ValueError("slot widths must be >= 1")
        self._modality_prio: dict[str, tuple[CompTypePriority, StagePriorities]] = {}
        self._actor_cttp: dict[int, CompTypePriority] = {}
        self._actor_stp: dict[int, StagePriorities] = {}
        self.inflight_limits: list[int] | None = None
        self.inflight_predicate: Callable | None = None
        self.checkfuncs: list[Callable] = []
        self.custom_priorities: dict[str, StepFunc] = {}

    # -- configuration -------------------------------------------------------------

    def _modalities(self) -> set[str]:
        return {s.modality for s in self.cssr.graph.real_stages}

    def _check_actor(self, actor: int) -> None:
        if actor not in self.cssr.placement.mesh.actors:
            raise ValueError(f"unknown actor {actor}")

    def _check_mode(self, cttp: CompTypePriority) -> None:
        if not cttp.builtin and cttp.mode not in self.custom_priorities:
            raise ValueError(f"unknown priority {cttp.mode!r}")

    def set_priority(self, modality: str, cttp, fstp=BREADTH, bstp=BREADTH) -> None:
        if modality not in self._modalities():
            raise ValueError(f"unknown modality {modality!r}")
        cttp = CompTypePriority.parse(cttp)
        self._check_mode(cttp)
        self._modality_prio[modality] = (
            cttp, StagePriorities(StageTraversalPriority.parse(fstp), StageTraversalPriority.parse(bstp))
        )

    def set_cttp_for_actor(self, actor: int, cttp) -> None:
        self._check_actor(actor)
        cttp = CompTypePriority.parse(cttp)
        self._check_mode(cttp)
        self._actor_cttp[actor] = cttp

    def set_stp_for_actor(self, actor: int, fstp=BREADTH, bstp=BREADTH) -> None:
        self._check_actor(actor)
        self._actor_stp[actor] = StagePriorities(StageTraversalPriority.parse(fstp), StageTraversalPriority.parse(bstp))

    def config_inflight_micros(self, limits: Sequence[int] | Callable | None) -> None:
        """Cap forward passes in flight per stage: a list of limits or ``predicate(item, actor, state)``."""
        if limits is None:
            self.inflight_limits = self.inflight_predicate = None
        elif callable(limits):
            self.inflight_predicate, self.inflight_limits = limits, None
        else:
            limits = [int(x) for x in limits]
            if any(x < 1 for x in limits):
                raise ValueError(f"in-flight limits must be >= 1, got {limits}")
            self._limit_table(limits)
            self.inflight_limits, self.inflight_predicate = limits, None

    def register_new_checkfunc(self, predicate: Callable) -> None:
        """``predicate(item, actor, state) -> bool`` consulted for every candidate fetch."""
        self.checkfuncs.append(predicate)

    def register_new_priority(self, name: str, step_func: StepFunc) -> None:
        if name in self.custom_priorities or name in _CTTP_ALIASES or name in _STP_ALIASES:
            raise ValueError(f"priority {name!r} already exists")
        self.custom_priorities[name] = step_func

    def priorities_for(self, actor: int) -> tuple[CompTypePriority, StagePriorities]:
        modality = self.cssr.placement.actor_modality(actor)
        cttp, stp = self._modality_prio.get(modality, (CompTypePriority(), StagePriorities()))
        return self._actor_cttp.get(actor, cttp), self._actor_stp.get(actor, stp)

    def _limit_table(self, limits: list[int]) -> dict[int, int]:
        return limit_table(self.cssr.graph, limits)

    def inflight_table(self) -> dict[int, int] | None:
        return None if self.inflight_limits is None else self._limit_table(self.inflight_limits)

    # -- scheduling ----------------------------------------------------------------

    def _cfuncs(self, actor: int, state: ScheduleState, limits: dict[int, int] | None) -> Callable[[Item], bool]:
        predicate, checks = self.inflight_predicate, self.checkfuncs

        def cfuncs(item: Item) -> bool:
            if item.inst_type == FWD:
                if limits is not None and state.inflight(item.stage_id, actor) >= limits[item.stage_id]:
                    return False
                if predicate is not None and not predicate(item, actor, state):
                    return False
            return all(check(item, actor, state) for check in checks)

        return cfuncs

    def width(self, item: Item) -> int:
        return self.slot_widths.get(item.inst_type, 1)

    def run(self) -> ScheduleGrid:
        cssr = self.cssr
        state = ScheduleState(cssr)
        resolver = Resolver(cssr, state)
        actors = sorted(cssr.placement.mesh.actors)
        states = {a: ActorState(a, cssr, state) for a in actors}
        limits = self.inflight_table()
        cfuncs = {a: self._cfuncs(a, state, limits) for a in actors}
        prios = {a: self.priorities_for(a) for a in actors}
        funcs = {}
        for a in actors:
            cttp, stp = prios[a]
            funcs[a] = step_function if cttp.builtin else self.custom_priorities[cttp.mode]

        def push(released):
            for a, items in released.items():
                for item in items:
                    states[a].queues[item.inst_type].push(item)

        push(resolver.initial())
        rows: dict[int, list] = {a: [] for a in actors}
        finishing: dict[int, list] = defaultdict(list)
        total = len(cssr.tasks)
        scheduled = 0
        t = 0
        while scheduled < total:
            fetched = False
            for a in actors:
                if len(rows[a]) > t:
                    continue
                cttp, stp = prios[a]
                item = funcs[a](a, states[a], cttp, stp, cfuncs[a])
                if item is None:
                    rows[a].append(None)
                    continue
                queue = states[a].queue(item.inst_type)
                if queue is None or item not in queue:
                    raise SchedulerError(f"step function of actor {a} returned {item}, which is not ready")
                queue.remove(item)
                states[a].note_fetch(item)
                w = self.width(item)
                rows[a].extend([item] * w)
                finishing[t + w].append((a, item))
                scheduled += 1
                fetched = True
            local: dict[int, list] = defaultdict(list)
            for a, item in finishing.pop(t + 1, ()):
                local[a].append(item)
            state.step = t + 1
            released = resolver.resolve(local, t)
            push(released)
            if not fetched and not local and not released and not finishing and scheduled < total:
                if not _rescue_cursors(states, prios, cfuncs):
                    raise DeadlockError(t, self._diagnose(resolver, states))
                # redo this step with the moved cursors instead of leaving an all-bubble column
                for a in actors:
                    del rows[a][t:]
                continue
            t += 1
        grid = ScheduleGrid(actors, [rows[a] for a in actors])
        grid.meta["inflight"] = limits
        return grid

    def _diagnose(self, resolver: Resolver, states: dict[int, ActorState]) -> dict:
        blocked = {}
        held = set(resolver.held)
        for task in resolver.cssr.tasks:
            if task in resolver.committed:
                continue
            item, actor = task
            if task in held:
                blocked[task] = "held by check_prev_dep/check_nxt_dep predicate"
            elif task in resolver.released:
                blocked[task] = "ready but rejected by priority or check functions"
            elif resolver.cssr.is_unbound(item):
                blocked[task] = "registered instruction has no bound dependencies"
            else:
                missing = resolver.unsatisfied(task)
                blocked[task] = "waiting for " + ", ".join(str(m) for m in missing[:4])
        return blocked


def run_schedule(cssr: CSSR, priorities=None, inflight=None, cfuncs: Iterable[Callable] = (),
                 slot_widths: dict[str, int] | None = None) -> ScheduleGrid:
    """One-shot helper: ``priorities`` maps a modality name (or ``None`` for all) to ``(cttp, fstp, bstp)``."""
    sched = Scheduler(cssr, slot_widths)
    modalities = sorted({s.modality for s in cssr.graph.real_stages})
    for key, value in (priorities or {}).items():
        cttp, fstp, bstp = (list(value) + [BREADTH, BREADTH])[:3]
        for mod in (modalities if key is None else [key]):
            sched.set_priority(mod, cttp, fstp, bstp)
    if inflight is not None:
        sched.config_inflight_micros(inflight)
    for f in cfuncs:
        sched.register_new_checkfunc(f)
    return sched.run()


__all__ = [
    "BWD_FIRST", "FWD_FIRST", "INTERLEAVED", "BREADTH", "DEPTH",
    "SchedulerError", "DeadlockError", "CompTypePriority", "StageTraversalPriority", "StagePriorities",
    "ReorderQueue", "TraversalState", "ActorState", "sort_inst_types", "parse_stp", "fetch_inst1",
    "fetch_inst2", "step_function", "limit_table", "Scheduler", "run_schedule",
]
