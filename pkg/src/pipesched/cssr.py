"""Computation schedule space: instruction items, dependency graph and the dynamic resolver.

Items are keyed by ``(inst_type, stage_id, mb)``.  A *task* is an item
bound to one actor; shared stages give one task per replica actor.  A key
counts as done when its owner copy commits, except for collective items
(registered communication types) which complete only when every member
copy has committed.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple

from .topology import Placement, Stage, TopologyError

logger = logging.getLogger(__name__)

FWD = "FwdPass"
BWD = "BwdPass"
WGRAD = "CompWeightGrad"
IGRAD = "CompInputGrad"
SEND_ACT = "SendAct"
SEND_GRAD = "SendGrad"
RECV_ACT = "RecvAct"
RECV_GRAD = "RecvGrad"
ALLGATHER = "SyncWithAllGather"
GATHER = "SyncWithGather"

COMPUTATION = "computation"
COMMUNICATION = "communication"

_BUILTINS = (
    (FWD, COMPUTATION),
    (BWD, COMPUTATION),
    (WGRAD, COMPUTATION),
    (IGRAD, COMPUTATION),
    (SEND_ACT, COMMUNICATION),
    (SEND_GRAD, COMMUNICATION),
    (RECV_ACT, COMMUNICATION),
    (RECV_GRAD, COMMUNICATION),
    (ALLGATHER, COMMUNICATION),
    (GATHER, COMMUNICATION),
)

# backward-like types (release activations, receive gradients)
BACKWARD_TYPES = frozenset({BWD, IGRAD})


class CSSRError(ValueError):
    pass


class DependencyCycleError(CSSRError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        path = " -> ".join(_fmt(i) for i in self.cycle)
        super().__init__(f"dependency cycle: {path}")


class Item(NamedTuple):
    inst_type: str
    stage_id: int
    mb: int

    def __str__(self):
        return _fmt(self)


def _fmt(item) -> str:
    return f"{item[0]}(s{item[1]},mb{item[2]})"



@dataclass(frozen=True)
class SchedAttr:
    """Scheduling rules of a registered instruction.

    ``check_prev_dep(cur_microid, state)`` gates release of the instruction's
    own items; ``check_nxt_dep(nxt_microid, state)`` gates release of items
    that depend on it.  ``sched_unit`` groups that many consecutive
    micro-batches into one item.
    """

    check_prev_dep: Callable | None = None
    check_nxt_dep: Callable | None = None
    sched_unit: int = 1

    def __post_init__(self):
        if self.sched_unit < 1:
            raise CSSRError(f"sched_unit must be >= 1, got {self.sched_unit}")


@dataclass(frozen=True)
class InstructionType:
    name: str
    kind: str = COMPUTATION
    builtin: bool = False
    sched_attr: SchedAttr = field(default_factory=SchedAttr)
    inst_attr: Mapping[str, object] = field(default_factory=dict)

    def __str__(self):
        return self.name


class InstructionRegistry:
    def __init__(self):
        self._types: dict[str, InstructionType] = {
            name: InstructionType(name, kind, builtin=True) for name, kind in _BUILTINS
        }

    def register(self, name, sched_attr=None, inst_attr=None, kind=COMMUNICATION, replace_builtin=False):
        existing = self._types.get(name)
        if existing is not None and not (existing.builtin and replace_builtin):
            raise CSSRError(f"instruction {name!r} is already registered")
        if existing is not None:
            kind = existing.kind
        itype = InstructionType(name, kind, False, sched_attr or SchedAttr(), dict(inst_attr or {}))
        self._types[name] = itype
        return itype

    def __getitem__(self, name) -> InstructionType:
        try:
            return self._types[str(name)]
        except KeyError:
            raise CSSRError(f"unknown instruction type {name!r}") from None

    def __contains__(self, name):
        return str(name) in self._types

    def registered(self) -> list[InstructionType]:
        return [t for t in self._types.values() if not t.builtin]

    def copy(self) -> InstructionRegistry:
        new = InstructionRegistry.__new__(InstructionRegistry)
        new._types = dict(self._types)
        return new


class DepGraph:
    """Item-level dependency edges (predecessor must be scheduled first)."""

    def __init__(self):
        self.succ: dict[Item, list[Item]] = defaultdict(list)
        self.pred: dict[Item, list[Item]] = defaultdict(list)
        self._edges: dict[tuple[Item, Item], None] = {}

    def add_edge(self, u: Item, v: Item) -> None:
        if (u, v) in self._edges:
            return
        self._edges[(u, v)] = None
        self.succ[u].append(v)
        self.pred[v].append(u)

    def edges(self) -> list[tuple[Item, Item]]:
        return list(self._edges)

    def __len__(self):
        return len(self._edges)

    def __contains__(self, edge):
        return edge in self._edges

    def find_cycle(self, nodes: Iterable[Item]) -> list[Item] | None:
        color: dict[Item, int] = {}
        for root in nodes:
            if root in color:
                continue
            stack = [(root, iter(self.succ.get(root, ())))]
            path = [root]
            color[root] = 1
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    color[node] = 2
                    stack.pop()
                    path.pop()
                    continue
                c = color.get(nxt, 0)
                if c == 1:
                    return path[path.index(nxt):] + [nxt]
                if c == 0:
                    color[nxt] = 1
                    path.append(nxt)
                    stack.append((nxt, iter(self.succ.get(nxt, ()))))
        return None


class CSSR:
    """Instruction pool plus dependency graph for one placement and micro-batch count.

    Registration methods rebuild the pool, so they may be called in any
    order before scheduling starts.
    """

    def __init__(self, placement: Placement, num_micro_batches: int, registry: InstructionRegistry | None = None,
                 user_deps: Iterable = ()):
        if num_micro_batches < 0:
            raise CSSRError("number of micro-batches must be >= 0")
        self.placement = placement
        self.m = num_micro_batches
        self.registry = registry.copy() if registry is not None else InstructionRegistry()
        self.user_deps: list[tuple[tuple[str, int], tuple[str, int]]] = []
        self._rebuild()
        if user_deps:
            self.set_cssr_deps(user_deps)

    # -- registration -------------------------------------------------------------

    def register_new_inst(self, name: str, sched_attr: SchedAttr | None = None, inst_attr=None,
                          kind: str = COMMUNICATION) -> InstructionType:
        """Register an instruction type; built-in sync names may be re-registered with rules."""
        itype = self.registry.register(name, sched_attr, inst_attr, kind, replace_builtin=name in (GATHER, ALLGATHER))
        self._rebuild()
        return itype

    def register_new_stage(self, attach_inst, modality_set: Iterable[str], actors: Iterable[int] | None = None) -> int:
        """Append a virtual join stage fed by the last stage of each modality in ``modality_set``."""
        itype = self.registry[attach_inst]
        if itype.builtin:
            raise CSSRError(f"cannot attach built-in instruction {itype.name!r} to a virtual stage")
        graph = self.placement.graph
        modality_set = list(dict.fromkeys(modality_set))
        sinks = []
        for mod in modality_set:
            mod_stages = graph.modality_stages(mod)
            if not mod_stages:
                raise TopologyError(f"unknown modality {mod!r}")
            real = {s.stage_id for s in mod_stages}
            sinks += [sid for sid in graph.real_sinks() if sid in real]
        if actors is None:
            group = itype.inst_attr.get("group")
            actors = group if group else [a for sid in sinks for a in self.placement.stage_actors(sid)]
        actors = sorted(set(int(a) for a in actors))
        position = max(graph.stage(sid).position for sid in sinks) + 1
        stage = Stage(graph.next_stage_id(), "+".join(modality_set), (0, 0), position,
                      pipeline=-1, virtual_inst=itype.name)
        self.placement = self.placement.with_virtual_stage(stage, sinks, actors)
        self._rebuild()
        return stage.stage_id

    def set_cssr_deps(self, pairs: Iterable) -> None:
        """Add ``((inst1, stage_i), (inst2, stage_j))`` ordering pairs for every micro-batch."""
        added = []
        for (t1, s1), (t2, s2) in pairs:
            pair = ((str(t1), int(s1)), (str(t2), int(s2)))
            for inst, sid in pair:
                self._check_endpoint(inst, sid)
            added.append(pair)
        previous = list(self.user_deps)
        self.user_deps.extend(p for p in added if p not in self.user_deps)
        try:
            self._rebuild()
        except DependencyCycleError:
            self.user_deps = previous
            self._rebuild()
            raise

    def _check_endpoint(self, inst: str, sid: int) -> None:
        itype = self.registry[inst]
        stage = self.placement.graph.stage(sid)
        if stage.is_virtual:
            if stage.virtual_inst != itype.name:
                raise CSSRError(f"stage {sid} hosts {stage.virtual_inst!r}, not {itype.name!r}")
        elif itype.name not in (FWD, BWD):
            raise CSSRError(f"{itype.name!r} has no items on real stage {sid}")

    # -- derived structures -------------------------------------------------------------

    def sched_unit(self, inst_type: str) -> int:
        return self.registry[inst_type].sched_attr.sched_unit

    def group_of(self, inst_type: str, mb: int) -> int:
        unit = self.sched_unit(inst_type) if inst_type in self.registry else 1
        return (mb // unit) * unit

    def _rebuild(self) -> None:
        placement, graph, m = self.placement, self.placement.graph, self.m
        items: list[Item] = []
        mbs: dict[int, range] = {}
        for stage in graph.stages:
            if stage.is_virtual:
                unit = self.sched_unit(stage.virtual_inst)
                mbs[stage.stage_id] = range(0, m, unit)
                items += [Item(stage.virtual_inst, stage.stage_id, mb) for mb in mbs[stage.stage_id]]
            else:
                mbs[stage.stage_id] = placement.micro_batches(stage.stage_id, m)
        for stage in graph.stages:
            if not stage.is_virtual:
                items += [Item(FWD, stage.stage_id, mb) for mb in mbs[stage.stage_id]]
                items += [Item(BWD, stage.stage_id, mb) for mb in mbs[stage.stage_id]]
        self.items: list[Item] = items
        self._item_set = set(items)

        dep = DepGraph()
        real = {s.stage_id for s in graph.real_stages}
        for u, v in graph.edges:
            if u in real and v in real:
                for mb in set(mbs[u]) & set(mbs[v]):
                    dep.add_edge(Item(FWD, u, mb), Item(FWD, v, mb))
        for u, v in graph.edges:
            if u in real and v in real:
                for mb in set(mbs[u]) & set(mbs[v]):
                    dep.add_edge(Item(BWD, v, mb), Item(BWD, u, mb))
        for sink in graph.real_sinks():
            for mb in mbs[sink]:
                dep.add_edge(Item(FWD, sink, mb), Item(BWD, sink, mb))
        for (t1, s1), (t2, s2) in self.user_deps:
            for mb in range(m):
                u = Item(t1, s1, self.group_of(t1, mb))
                v = Item(t2, s2, self.group_of(t2, mb))
                if u in self._item_set and v in self._item_set:
                    if u == v:
                        raise DependencyCycleError([u, v])
                    dep.add_edge(u, v)
        cycle = dep.find_cycle(items)
        if cycle:
            raise DependencyCycleError(cycle)
        self.dep = dep

        self.actors_of: dict[Item, tuple[int, ...]] = {
            item: placement.stage_actors(item.stage_id) for item in items
        }
        self.tasks: list[tuple[Item, int]] = [(item, a) for item in items for a in self.actors_of[item]]
        # replica-local ordering: each copy of a shared stage runs its own forward before its backward
        self.local_pred: dict[tuple[Item, int], list[tuple[Item, int]]] = {}
        for sid in placement.shared:
            stage = graph.stage(sid)
            if stage.is_virtual:
                continue
            for mb in mbs[sid]:
                for a in self.actors_of[Item(FWD, sid, mb)]:
                    self.local_pred[(Item(BWD, sid, mb), a)] = [(Item(FWD, sid, mb), a)]

    # -- queries ------------------------------------------------------------------------

    def __contains__(self, item) -> bool:
        return item in self._item_set

    @property
    def graph(self):
        return self.placement.graph

    def is_collective(self, item: Item) -> bool:
        itype = self.registry[item.inst_type]
        return not itype.builtin and itype.kind == COMMUNICATION

    def owner(self, item: Item) -> int:
        return self.actors_of[item][0]

    def completing_copies(self, item: Item) -> tuple[int, ...]:
        """Actors whose copies must commit before ``item`` releases its successors."""
        actors = self.actors_of[item]
        return actors if self.is_collective(item) else actors[:1]

    def is_unbound(self, item: Item) -> bool:
        """Registered items without any dependency can never be released."""
        return not self.registry[item.inst_type].builtin and not self.dep.pred.get(item)

    def unreachable_items(self) -> list[Item]:
        """Items that no schedule can release: unbound registered items and everything after them."""
        bad = [item for item in self.items if self.is_unbound(item)]
        seen = set(bad)
        stack = list(bad)
        while stack:
            for nxt in self.dep.succ.get(stack.pop(), ()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return [item for item in self.items if item in seen]

    def stage_order(self, actor: int) -> tuple[int, ...]:
        return self.placement.stages_of(actor)

    def computation_edges(self, direction: str) -> set[tuple[Item, Item]]:
        kind = FWD if direction == "forward" else BWD
        return {(u, v) for u, v in self.dep.edges() if u.inst_type == kind and v.inst_type == kind}


def build_cssr(placement: Placement, num_micro_batches: int, registry: InstructionRegistry | None = None,
               user_deps: Iterable = ()) -> CSSR:
    return CSSR(placement, num_micro_batches, registry, user_deps)


class ScheduleState:
    """Read-only view of committed scheduling state handed to user predicates."""

    def __init__(self, cssr: CSSR):
        self.cssr = cssr
        self.step = 0
        self._done: set[Item] = set()
        self._counts: dict[tuple[str, int], int] = defaultdict(int)
        self._inflight: dict[tuple[int, int], int] = defaultdict(int)

    def is_scheduled(self, inst_type, stage_id: int, mb: int) -> bool:
        return Item(str(inst_type), stage_id, mb) in self._done

    def num_scheduled(self, inst_type, stage_id: int) -> int:
        return self._counts[(str(inst_type), stage_id)]

    def inflight(self, stage_id: int, actor: int | None = None) -> int:
        """Forward passes committed minus backward passes committed (per actor copy)."""
        if actor is None:
            actor = self.cssr.placement.owner(stage_id)
        return self._inflight[(actor, stage_id)]

    def _record(self, task) -> None:
        item, actor = task
        if item.inst_type == FWD:
            self._inflight[(actor, item.stage_id)] += 1
        elif item.inst_type in BACKWARD_TYPES:
            self._inflight[(actor, item.stage_id)] -= 1

    def _mark_done(self, item: Item) -> None:
        self._done.add(item)
        self._counts[(item.inst_type, item.stage_id)] += 1


class Resolver:
    """Dynamic dependency resolver.

    Tracks unsatisfied predecessors per task; ``resolve`` commits the local
    buffers of one step and returns the newly released tasks per actor.
    Items whose dependencies are met but whose registered predicates fail
    are held and re-checked on every call.
    """

    def __init__(self, cssr: CSSR, state: ScheduleState | None = None):
        self.cssr = cssr
        self.state = state or ScheduleState(cssr)
        self.remaining: dict[tuple[Item, int], int] = {}
        self.copies_done: dict[Item, int] = defaultdict(int)
        self.committed: dict[tuple[Item, int], int] = {}
        self.released: set[tuple[Item, int]] = set()
        self.held: list[tuple[Item, int]] = []
        self.local_succ: dict[tuple[Item, int], list] = defaultdict(list)
        for task, preds in cssr.local_pred.items():
            for p in preds:
                self.local_succ[p].append(task)
        for task in cssr.tasks:
            item = task[0]
            self.remaining[task] = len(cssr.dep.pred.get(item, ())) + len(cssr.local_pred.get(task, ()))

    def initial(self) -> dict[int, list[Item]]:
        """Dependency-free tasks at schedule start."""
        for task in self.cssr.tasks:
            if self.remaining[task] == 0 and not self.cssr.is_unbound(task[0]):
                self.held.append(task)
        return self._release_held()

    def _passes_predicates(self, item: Item) -> bool:
        reg = self.cssr.registry
        attr = reg[item.inst_type].sched_attr
        if attr.check_prev_dep is not None and not attr.check_prev_dep(item.mb, self.state):
            return False
        for pred in self.cssr.dep.pred.get(item, ()):
            nxt = reg[pred.inst_type].sched_attr.check_nxt_dep
            if nxt is not None and not nxt(item.mb, self.state):
                return False
        return True

    def _release_held(self) -> dict[int, list[Item]]:
        out: dict[int, list[Item]] = defaultdict(list)
        still = []
        for task in self.held:
            if self._passes_predicates(task[0]):
                self.released.add(task)
                out[task[1]].append(task[0])
            else:
                still.append(task)
        self.held = still
        return dict(out)

    def commit(self, task, slot: int) -> None:
        item, actor = task
        if task in self.committed:
            raise CSSRError(f"task {_fmt(item)}@a{actor} committed twice")
        self.committed[task] = slot
        self.state._record(task)
        for succ in self.local_succ.get(task, ()):
            self._satisfy(succ)
        copies = self.cssr.completing_copies(item)
        if actor not in copies:
            return
        self.copies_done[item] += 1
        if self.copies_done[item] == len(copies):
            self.state._mark_done(item)
            for nxt in self.cssr.dep.succ.get(item, ()):
                for a in self.cssr.actors_of[nxt]:
                    self._satisfy((nxt, a))

    def _satisfy(self, task) -> None:
        self.remaining[task] -= 1
        if self.remaining[task] == 0:
            self.held.append(task)

    def resolve(self, local_buffers: Mapping[int, Iterable[Item]], slot: int) -> dict[int, list[Item]]:
        """Commit every actor's local buffer and release newly dependency-free tasks."""
        for actor in sorted(local_buffers):
            for item in local_buffers[actor]:
                self.commit((item, actor), slot)
        return self._release_held()

    def blocked(self) -> list[tuple[Item, int]]:
        return [t for t in self.cssr.tasks if t not in self.released]

    def unsatisfied(self, task) -> list[Item]:
        item = task[0]
        missing = [p for p in self.cssr.dep.pred.get(item, ()) if p not in self.state._done]
        missing += [p[0] for p in self.cssr.local_pred.get(task, ()) if p not in self.committed]
        return missing


__all__ = [
    "FWD", "BWD", "WGRAD", "IGRAD", "SEND_ACT", "SEND_GRAD", "RECV_ACT", "RECV_GRAD", "ALLGATHER", "GATHER",
    "COMPUTATION", "COMMUNICATION", "BACKWARD_TYPES",
    "CSSRError", "DependencyCycleError", "Item", "SchedAttr", "InstructionType", "InstructionRegistry",
    "DepGraph", "CSSR", "build_cssr", "ScheduleState", "Resolver",
]
