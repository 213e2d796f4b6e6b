"""Cost model, timeline simulation of lowered programs, and schedule validation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import jsonschema

from .cssr import BWD, CSSR, FWD, IGRAD, RECV_ACT, RECV_GRAD, SEND_ACT, SEND_GRAD, WGRAD, Item
from .grid import ScheduleGrid
from .lowering import ASYNC, WAIT, ActorProgram, Instruction, grid_dependencies, message_tags
from .scheduler import limit_table
from .topology import ModelConfig, Stage, StageGraph

logger = logging.getLogger(__name__)

SENDS = (SEND_ACT, SEND_GRAD)
RECVS = (RECV_ACT, RECV_GRAD)
WILDCARD = "*"


class CostError(ValueError):
    """Missing or invalid cost entries."""


class SimulationError(RuntimeError):
    pass


class SimulationDeadlock(SimulationError):
    def __init__(self, cycle: list[int], waiting: dict):
        self.cycle = cycle
        self.waiting = waiting
        chain = " -> ".join(f"a{a}" for a in cycle) if cycle else "no cycle (unmatched communication)"
        super().__init__(f"programs deadlock: {chain}; waiting on {waiting}")


class CapacityExceeded(SimulationError):
    pass


# -- cost model ---------------------------------------------------------------------------


PROFILE_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "properties": {
            "inst_type": {"type": "string", "minLength": 1},
            "signature": {"type": "string", "minLength": 1},
            "mbs": {"type": "integer", "minimum": 1},
            "time": {"type": "number", "minimum": 0},
            "bytes": {"type": "number", "minimum": 0},
        },
        "required": ["inst_type", "signature", "mbs", "time"],
        "additionalProperties": False,
    },
}


@dataclass(frozen=True)
class ProfileRecord:
    inst_type: str
    signature: str
    mbs: int
    time: float
    bytes: float = 0.0

    @property
    def key(self) -> tuple[str, str, int]:
        return self.inst_type, self.signature, self.mbs

    def to_dict(self) -> dict:
        return {"inst_type": self.inst_type, "signature": self.signature, "mbs": self.mbs,
                "time": self.time, "bytes": self.bytes}


def stage_signatures(stage: Stage) -> list[str]:
    """Profile signatures that may describe ``stage``, most specific first."""
    sigs = [f"stage:{stage.stage_id}"]
    if stage.replica_of is not None:
        sigs.append(f"stage:{stage.replica_of}")
    sigs += [f"{stage.modality}:{stage.num_layers}", stage.modality, WILDCARD]
    return sigs


@dataclass
class CostModel:
    """Time and memory costs.

    Computation cost of one item is ``comp[inst_type] * mbs * size`` where
    ``size`` is 1 per stage, or the stage's layer count when ``per_layer``
    is set, plus ``head`` (in the same units) on the stage holding a
    modality's last layer.
    Profile records override the formula.  Communication costs
    ``comm_latency + bytes / bandwidth`` per message.
    """

    comp: dict[str, float] = field(default_factory=lambda: {FWD: 1.0, BWD: 1.0, IGRAD: 1.0, WGRAD: 1.0})
    default_comp: float | None = 1.0
    per_layer: bool = False
    head: dict[str, float] = field(default_factory=dict)  # modality -> extra time on its last stage
    modality_layers: dict[str, int] = field(default_factory=dict)  # where each modality's last layer ends
    records: dict[tuple[str, str, int], ProfileRecord] = field(default_factory=dict)
    strict: bool = False
    comm_latency: float = 0.0
    bandwidth: float = math.inf
    collective_cost: float | None = None
    act_unit: float = 1.0
    weight_unit: float = 0.0
    memory_capacity: float = math.inf
    wgrad_hold: float = 0.0

    def __post_init__(self):
        values = list(self.comp.values()) + list(self.head.values()) + [self.comm_latency, self.act_unit, self.weight_unit]
        values += [r.time for r in self.records.values()]
        if self.default_comp is not None:
            values.append(self.default_comp)
        if self.collective_cost is not None:
            values.append(self.collective_cost)
        if any(v < 0 for v in values) or self.bandwidth <= 0:
            raise CostError("costs must be non-negative and bandwidth positive")
        if not 0.0 <= self.wgrad_hold <= 1.0:
            raise CostError("wgrad_hold must be in [0, 1]")

    # presets

    @classmethod
    def uniform(cls, widths: Mapping[str, float] | None = None, **kw) -> CostModel:
        """Every computation costs 1 (or its slot width), communication is free."""
        comp = {FWD: 1.0, BWD: 1.0, IGRAD: 1.0, WGRAD: 1.0}
        comp.update({k: float(v) for k, v in (widths or {}).items()})
        return cls(comp=comp, **kw)

    @classmethod
    def imbalanced(cls, model: ModelConfig, num_stages: int, factor: float = 5.63, modality: str | None = None,
                   fwd: float = 1.0, bwd: float = 2.0, **kw) -> CostModel:
        """Per-layer costs plus a head on the last stage.

        The head is sized so that with ``num_stages`` evenly split stages
        the last stage costs ``factor`` times an ordinary one (e.g. a large
        vocabulary projection).
        """
        if factor < 1:
            raise CostError("imbalance factor must be >= 1")
        mod = model.modality(modality) if modality else model.modalities[-1]
        head = (factor - 1.0) * mod.num_layers / num_stages
        return cls(comp={FWD: fwd, BWD: bwd, IGRAD: bwd / 2, WGRAD: bwd / 2}, per_layer=True,
                   head={mod.name: head}, modality_layers={mod.name: mod.num_layers}, **kw)

    def scale(self, c: float) -> CostModel:
        """All time entries multiplied by ``c``."""
        if c <= 0:
            raise CostError("scale factor must be positive")
        return replace(
            self,
            comp={k: v * c for k, v in self.comp.items()},
            default_comp=None if self.default_comp is None else self.default_comp * c,
            records={k: replace(r, time=r.time * c) for k, r in self.records.items()},
            comm_latency=self.comm_latency * c,
            bandwidth=self.bandwidth / c,
            collective_cost=None if self.collective_cost is None else self.collective_cost * c,
        )

    def with_records(self, records: Sequence[ProfileRecord], strict: bool | None = None) -> CostModel:
        table = dict(self.records)
        for r in records:
            table[r.key] = r
        return replace(self, records=table, strict=self.strict if strict is None else strict)

    # lookups

    def _record(self, inst_type: str, stage: Stage, mbs: int) -> ProfileRecord | None:
        for sig in stage_signatures(stage):
            rec = self.records.get((inst_type, sig, mbs))
            if rec is not None:
                return rec
        return None

    def _size(self, stage: Stage) -> float:
        return float(stage.num_layers) if self.per_layer else 1.0

    def comp_cost(self, inst_type: str, stage: Stage, mbs: int = 1) -> float:
        rec = self._record(inst_type, stage, mbs)
        if rec is not None:
            return rec.time
        if self.strict:
            raise CostError(f"no profile record for ({inst_type}, stage:{stage.stage_id}, mbs={mbs})")
        base = self.comp.get(inst_type, self.default_comp)
        if base is None:
            raise CostError(f"no cost for instruction type {inst_type!r}")
        cost = base * self._size(stage)
        extra = self.head.get(stage.modality)
        if extra and stage.layer_range[1] == self.modality_layers.get(stage.modality):
            cost += extra * base
        return cost * mbs

    def act_bytes(self, stage: Stage, mbs: int = 1) -> float:
        rec = self._record(FWD, stage, mbs)
        if rec is not None and rec.bytes:
            return rec.bytes
        return self.act_unit * self._size(stage) * mbs

    def weight_bytes(self, stage: Stage) -> float:
        return self.weight_unit * self._size(stage)

    def comm_cost(self, op: str, stage: Stage | None, mbs: int = 1, peers: tuple[int, int] | None = None) -> float:
        if stage is not None:
            rec = self._record(op, stage, mbs)
            if rec is not None:
                return rec.time
            nbytes = self.act_bytes(stage, mbs)
        else:
            nbytes = 0.0
        return self.comm_latency + (nbytes / self.bandwidth if nbytes else 0.0)

    def collective(self, op: str, stage: Stage, mbs: int = 1) -> float:
        rec = self._record(op, stage, mbs)
        if rec is not None:
            return rec.time
        return self.collective_cost if self.collective_cost is not None else self.comm_latency


def load_profile(path: str | Path, strict: bool = False, base: CostModel | None = None) -> CostModel:
    """Read a JSON array of profile records into a cost model."""
    data = json.loads(Path(path).read_text())
    return profile_from_data(data, strict=strict, base=base)


def profile_from_data(data, strict: bool = False, base: CostModel | None = None) -> CostModel:
    try:
        jsonschema.validate(data, PROFILE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise CostError(f"invalid profile: {exc.message}") from exc
    records = [ProfileRecord(r["inst_type"], r["signature"], r["mbs"], float(r["time"]), float(r.get("bytes", 0.0)))
               for r in data]
    keys = Counter(r.key for r in records)
    dup = [k for k, n in keys.items() if n > 1]
    if dup:
        raise CostError(f"duplicate profile keys: {dup}")
    return (base or CostModel()).with_records(records, strict=strict)


def merge_profiles(*record_lists: Sequence[dict]) -> list[dict]:
    """Merge profile arrays; later files win on identical keys."""
    merged: dict[tuple, dict] = {}
    for records in record_lists:
        jsonschema.validate(records, PROFILE_SCHEMA)
        for r in records:
            merged[(r["inst_type"], r["signature"], r["mbs"])] = r
    return [merged[k] for k in sorted(merged)]


def check_profile_covers(cost: CostModel, graph: StageGraph, mbs: int, inst_types=(FWD, BWD)) -> None:
    """Raise naming the first missing key when a strict profile lacks an entry."""
    for stage in graph.real_stages:
        for t in inst_types:
            cost.comp_cost(t, stage, mbs)


# -- simulation ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    actor: int
    op: str
    stage_id: int
    mb: int
    start: float
    end: float
    kind: str  # compute | comm | wait


@dataclass
class Timeline:
    events: list[Event] = field(default_factory=list)
    memory: dict[int, list[tuple[float, float]]] = field(default_factory=dict)  # actor -> [(time, bytes)]

    def for_actor(self, actor: int) -> list[Event]:
        return [e for e in self.events if e.actor == actor]

    @classmethod
    def from_csv(cls, text: str) -> Timeline:
        events = []
        for row in csv.DictReader(io.StringIO(text)):
            op = row["op"]
            kind = row.get("kind") or ("comm" if op in SENDS + RECVS else "wait" if op == WAIT else "compute")
            events.append(Event(int(row["actor"]), op, int(row["stage"]), int(row["mb"]),
                                float(row["start"]), float(row["end"]), kind))
        return cls(events)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["actor", "op", "stage", "mb", "start", "end", "kind"])
        for e in sorted(self.events, key=lambda e: (e.actor, e.start, e.end)):
            w.writerow([e.actor, e.op, e.stage_id, e.mb, repr(e.start), repr(e.end), e.kind])
        return buf.getvalue()


@dataclass
class Metrics:
    makespan: float
    busy: dict[int, float]
    idle: dict[int, float]
    bubble_ratio: float
    peak_memory: dict[int, float]
    peak_inflight: dict[tuple[int, int], int]
    breakdown: dict[int, dict[str, float]]

    def to_dict(self) -> dict:
        return {
            "makespan": self.makespan,
            "bubble_ratio": self.bubble_ratio,
            "busy": {str(a): v for a, v in self.busy.items()},
            "idle": {str(a): v for a, v in self.idle.items()},
            "peak_memory": {str(a): v for a, v in self.peak_memory.items()},
            "peak_inflight": {f"{a}:{s}": v for (a, s), v in sorted(self.peak_inflight.items())},
            "breakdown": {str(a): v for a, v in self.breakdown.items()},
        }


def _is_compute(ins: Instruction) -> bool:
    return ins.op not in SENDS + RECVS and ins.op != WAIT and ins.channel_tag is None


def _send_of(recv_op: str) -> str:
    return SEND_ACT if recv_op == RECV_ACT else SEND_GRAD


def _send_of_tag(tag: str) -> str:
    return SEND_ACT if tag.startswith("act:") else SEND_GRAD


def _is_collective(ins: Instruction) -> bool:
    return (ins.channel_tag or "").startswith("group:")


def simulate(programs: Sequence[ActorProgram], cost: CostModel, graph: StageGraph, mbs: int = 1,
             occupy_sends: bool = False, capacity: str = "warn") -> tuple[Metrics, Timeline]:
    """Execute actor programs under ``cost``.

    Every actor runs its instructions in order.  Times are resolved as a
    max-plus fixpoint, so the result does not depend on evaluation order.
    Receives match sends first-in first-out per (source, destination, tag).
    """
    stages = {s.stage_id: s for s in graph.stages}
    progs = {p.actor_id: p for p in programs}
    actors = sorted(progs)
    pc = {a: 0 for a in actors}
    clock = {a: 0.0 for a in actors}
    sent: dict[tuple, list[float]] = defaultdict(list)  # (src, dst, tag) -> send times
    recv_count: Counter = Counter()
    posted: dict[tuple, list[float]] = defaultdict(list)  # (src, dst, tag) -> arrival times of posted receives
    wait_count: Counter = Counter()
    coll_arrivals: dict[tuple, dict[int, float]] = defaultdict(dict)
    coll_seen: Counter = Counter()
    events: list[Event] = []
    busy = {a: 0.0 for a in actors}
    comm_wait = {a: 0.0 for a in actors}

    def stage_of(ins: Instruction) -> Stage | None:
        return stages.get(ins.stage_id)

    def step(a: int) -> bool:
        """Try to execute actor ``a``'s next instruction; False when it must wait."""
        ins = progs[a].instructions[pc[a]]
        now = clock[a]
        if _is_compute(ins):
            d = cost.comp_cost(ins.op, stage_of(ins), mbs)
            events.append(Event(a, ins.op, ins.stage_id, ins.micro_batch_id, now, now + d, "compute"))
            busy[a] += d
            clock[a] = now + d
        elif ins.op in SENDS:
            sent[(a, ins.peer, ins.channel_tag)].append(now)
            if occupy_sends:
                d = cost.comm_cost(ins.op, stage_of(ins), mbs, (a, ins.peer))
                events.append(Event(a, ins.op, ins.stage_id, ins.micro_batch_id, now, now + d, "comm"))
                busy[a] += d
                clock[a] = now + d
        elif ins.op in RECVS:
            key = (ins.peer, a, ins.channel_tag)
            if progs[a].comm_mode == ASYNC:
                posted[key].append(now)  # non-blocking post; the matching wait resolves arrival
            else:
                k = recv_count[key]
                if len(sent[key]) <= k:
                    return False
                d = cost.comm_cost(_send_of(ins.op), stage_of(ins), mbs, (ins.peer, a))
                done = max(now, sent[key][k]) + d
                comm_wait[a] += min(d, done - now)
                events.append(Event(a, ins.op, ins.stage_id, ins.micro_batch_id, now, done, "comm"))
                clock[a] = done
            recv_count[key] += 1
        elif ins.op == WAIT:
            key = (ins.peer, a, ins.channel_tag)
            k = wait_count[key]
            if len(sent[key]) <= k or len(posted[key]) <= k:
                return False
            d = cost.comm_cost(_send_of_tag(ins.channel_tag), stage_of(ins), mbs, (ins.peer, a))
            done = max(now, max(posted[key][k], sent[key][k]) + d)
            comm_wait[a] += min(d, done - now)
            events.append(Event(a, ins.op, ins.stage_id, ins.micro_batch_id, now, done, "wait"))
            clock[a] = done
            wait_count[key] += 1
        else:  # collective placeholder
            group = tuple(int(x) for x in ins.channel_tag.split(":", 1)[1].split(","))
            ident = (ins.op, ins.stage_id, ins.micro_batch_id, ins.channel_tag)
            key = (ident, coll_seen[(a, ident)])
            coll_arrivals[key][a] = now
            if any(g not in coll_arrivals[key] for g in group):
                return False
            d = cost.collective(ins.op, stage_of(ins), mbs)
            done = max(coll_arrivals[key].values()) + d
            comm_wait[a] += min(d, done - now)
            events.append(Event(a, ins.op, ins.stage_id, ins.micro_batch_id, now, done, "comm"))
            clock[a] = done
            coll_seen[(a, ident)] += 1
        pc[a] += 1
        return True

    while True:
        progressed = False
        for a in actors:
            while pc[a] < len(progs[a].instructions) and step(a):
                progressed = True
        if all(pc[a] == len(progs[a].instructions) for a in actors):
            break
        if not progressed:
            raise _deadlock(progs, pc, coll_arrivals)

    makespan = max([e.end for e in events] + [0.0])
    n = len(actors)
    total_busy = sum(busy.values())
    bubble = (n * makespan - total_busy) / (n * makespan) if makespan > 0 else 0.0
    idle = {a: makespan - busy[a] for a in actors}
    breakdown = {a: {"compute": busy[a], "comm-wait": comm_wait[a], "dependency-wait": idle[a] - comm_wait[a]}
                 for a in actors}
    memory, peak_mem, peak_inflight = _memory_trace(events, stages, cost, mbs, progs)
    for a in actors:
        if peak_mem[a] > cost.memory_capacity:
            msg = f"actor {a}: peak memory {peak_mem[a]} exceeds capacity {cost.memory_capacity}"
            if capacity == "error":
                raise CapacityExceeded(msg)
            logger.warning(msg)
    metrics = Metrics(makespan, busy, idle, bubble, peak_mem, peak_inflight, breakdown)
    return metrics, Timeline(events, memory)


def _memory_trace(events, stages, cost: CostModel, mbs: int, progs):
    deltas: dict[int, list[tuple[float, float]]] = defaultdict(list)
    counts: dict[tuple[int, int], list[tuple[float, int]]] = defaultdict(list)
    for e in events:
        if e.kind != "compute" or e.stage_id not in stages:
            continue
        b = cost.act_bytes(stages[e.stage_id], mbs)
        if e.op == FWD:
            deltas[e.actor].append((e.start, b))
            counts[(e.actor, e.stage_id)].append((e.start, 1))
        elif e.op == BWD:
            deltas[e.actor].append((e.end, -b))
            counts[(e.actor, e.stage_id)].append((e.end, -1))
        elif e.op == IGRAD:
            deltas[e.actor].append((e.end, -b * (1.0 - cost.wgrad_hold)))
            counts[(e.actor, e.stage_id)].append((e.end, -1))
        elif e.op == WGRAD and cost.wgrad_hold:
            deltas[e.actor].append((e.end, -b * cost.wgrad_hold))
    memory, peak = {}, {}
    for a, prog in progs.items():
        static = sum(cost.weight_bytes(stages[s]) for s in {i.stage_id for i in prog.instructions if _is_compute(i)}
                     if s in stages)
        level, trace, top = static, [(0.0, static)], static
        for t, d in sorted(deltas.get(a, ()), key=lambda x: (x[0], x[1])):  # releases first on ties
            level += d
            trace.append((t, level))
            top = max(top, level)
        memory[a], peak[a] = trace, top
    peak_inflight = {}
    for key, evs in counts.items():
        level = top = 0
        for _, d in sorted(evs, key=lambda x: (x[0], x[1])):
            level += d
            top = max(top, level)
        peak_inflight[key] = top
    return memory, peak, peak_inflight


def _deadlock(progs, pc, coll_arrivals) -> SimulationDeadlock:
    waits: dict[int, set[int]] = {}
    for a, prog in progs.items():
        if pc[a] >= len(prog.instructions):
            continue
        ins = prog.instructions[pc[a]]
        if ins.op in RECVS or ins.op == WAIT:
            waits[a] = {ins.peer}
        elif ins.channel_tag and ins.channel_tag.startswith("group:"):
            group = {int(x) for x in ins.channel_tag.split(":", 1)[1].split(",")}
            waits[a] = group - {a}
        else:
            waits[a] = set()
    waiting = {a: sorted(w) for a, w in waits.items()}
    # walk the wait-for graph from each blocked actor looking for a cycle
    for start in sorted(waits):
        path, seen, node = [], {}, start
        while node in waits and node not in seen:
            seen[node] = len(path)
            path.append(node)
            nxt = sorted(w for w in waits[node] if w in waits)
            if not nxt:
                break
            node = nxt[0]
        if node in seen:
            return SimulationDeadlock(path[seen[node]:] + [node], waiting)
    return SimulationDeadlock([], waiting)


def simulate_grid(grid: ScheduleGrid, cssr: CSSR, cost: CostModel, mbs: int = 1, mode: str = "sync",
                  **kw) -> tuple[Metrics, Timeline]:
    from .lowering import insert_comm

    return simulate(insert_comm(grid, cssr, mode), cost, cssr.graph, mbs, **kw)


# -- validation ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    items: tuple = ()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "message": self.message, "items": [str(i) for i in self.items]}


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind: str, message: str, *items) -> None:
        self.violations.append(Violation(kind, message, tuple(items)))

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": [v.to_dict() for v in self.violations]}


def _fmt(task) -> str:
    item, actor = task
    return f"{item}@a{actor}"


def validate(target: ScheduleGrid | Sequence[ActorProgram], cssr: CSSR,
             limits: Sequence[int] | Mapping[int, int] | None = None) -> ValidationReport:
    """Check a grid or lowered programs against the CSSR; the report lists every violation."""
    report = ValidationReport()
    if isinstance(target, ScheduleGrid):
        grid = target
        programs = None
    else:
        programs = list(target)
        grid = _grid_from_programs(programs)
    _check_completeness(grid, cssr, report)
    _check_dependencies(grid, cssr, report, timed=programs is None)
    if limits is not None:
        table = dict(limits) if isinstance(limits, Mapping) else limit_table(cssr.graph, list(limits))
        _check_inflight(grid, table, report)
    if programs is not None:
        _check_comm(programs, grid, cssr, report)
    for item in cssr.unreachable_items():
        report.add("unreachable", f"{item} can never be released", item)
    return report


def _grid_from_programs(programs: Sequence[ActorProgram]) -> ScheduleGrid:
    # one slot per computation; only the per-actor order matters for program checks
    actors = [p.actor_id for p in programs]
    rows = [[Item(i.op, i.stage_id, i.micro_batch_id) for i in p.instructions if _is_compute(i) or _is_collective(i)]
            for p in programs]
    return ScheduleGrid(actors, rows, {"untimed": True})


def _check_completeness(grid: ScheduleGrid, cssr: CSSR, report: ValidationReport) -> None:
    seen: Counter = Counter()
    for a in grid.actors:
        for item in grid.sequence(a):
            seen[(item, a)] += 1
    for task, n in seen.items():
        if n > 1:
            report.add("completeness", f"{_fmt(task)} scheduled {n} times", task[0])
    expected = set()
    unreachable = set(cssr.unreachable_items())
    for item in cssr.items:
        if item in unreachable or cssr.is_collective(item):
            continue
        for a in cssr.actors_of[item]:
            expected.add((item, a))
    for item, a in sorted(expected):
        if item.inst_type == BWD:
            has_b = (item, a) in seen
            i_task = (Item(IGRAD, item.stage_id, item.mb), a)
            w_task = (Item(WGRAD, item.stage_id, item.mb), a)
            has_i, has_w = i_task in seen, w_task in seen
            if has_b and (has_i or has_w):
                report.add("completeness", f"{item}@a{a}: both B and I/W present", item)
            elif not has_b and not (has_i and has_w):
                report.add("completeness", f"{item}@a{a}: needs B or both I and W", item)
            if has_i and has_w:
                seq = grid.sequence(a)
                if seq.index(w_task[0]) < seq.index(i_task[0]):
                    report.add("completeness", f"W before I for stage {item.stage_id} mb {item.mb} on a{a}", item)
        elif (item, a) not in seen:
            report.add("completeness", f"{_fmt((item, a))} missing", item)
    # collectives: every member copy present
    for item in cssr.items:
        if cssr.is_collective(item) and item not in unreachable:
            for a in cssr.actors_of[item]:
                if (item, a) not in seen:
                    report.add("completeness", f"{_fmt((item, a))} missing", item)
    for (item, a) in seen:
        if item.inst_type in (IGRAD, WGRAD):
            if (Item(BWD, item.stage_id, item.mb), a) not in expected:
                report.add("completeness", f"unexpected {_fmt((item, a))}", item)
        elif (item, a) not in expected and not (cssr.is_collective(item) if item in cssr else False):
            report.add("completeness", f"unexpected {_fmt((item, a))}", item)


def _check_dependencies(grid: ScheduleGrid, cssr: CSSR, report: ValidationReport, timed: bool) -> None:
    slots = grid.slots()
    order = {a: {item: k for k, item in enumerate(grid.sequence(a))} for a in grid.actors}
    for u, v in grid_dependencies(cssr, grid):
        if u not in slots or v not in slots:
            continue
        if timed:
            bad = slots[u][1] > slots[v][0]
        else:
            bad = u[1] == v[1] and order[u[1]][u[0]] > order[v[1]][v[0]]
        if bad:
            report.add("dependency", f"{_fmt(u)} must finish before {_fmt(v)} starts", u[0], v[0])


def _check_inflight(grid: ScheduleGrid, table: Mapping[int, int], report: ValidationReport) -> None:
    for a in grid.actors:
        spans = grid.spans(a)
        for stage_id, limit in table.items():
            fwd_starts = sorted(s for s, _, i in spans if i.inst_type == FWD and i.stage_id == stage_id)
            releases = sorted(e for _, e, i in spans if i.inst_type in (BWD, IGRAD) and i.stage_id == stage_id)
            for t in fwd_starts:
                live = sum(1 for s in fwd_starts if s <= t) - sum(1 for e in releases if e <= t)
                if live > limit:
                    report.add("inflight", f"a{a} stage {stage_id}: {live} micro-batches in flight at slot {t} "
                               f"(limit {limit})")
                    break


def _check_comm(programs: Sequence[ActorProgram], grid: ScheduleGrid, cssr: CSSR, report: ValidationReport) -> None:
    sends, recvs = message_tags(programs)
    for key in sorted((sends - recvs) | (recvs - sends)):
        report.add("comm", f"unmatched message {key}")
    # FIFO: payload order per channel must agree on both ends
    out_seq: dict[tuple, list] = defaultdict(list)
    in_seq: dict[tuple, list] = defaultdict(list)
    for p in programs:
        for ins in p.instructions:
            if ins.op in SENDS:
                out_seq[(p.actor_id, ins.peer, ins.channel_tag)].append((ins.stage_id, ins.micro_batch_id))
            elif ins.op in RECVS:
                in_seq[(ins.peer, p.actor_id, ins.channel_tag)].append((ins.stage_id, ins.micro_batch_id))
    for key in sorted(set(out_seq) & set(in_seq)):
        if out_seq[key] != in_seq[key]:
            report.add("fifo", f"channel {key} delivers out of order")
    # every cross-actor dependency is carried by a recv before the consumer and a send after the producer
    index: dict[int, dict[tuple, int]] = {}
    for p in programs:
        pos = {}
        for k, ins in enumerate(p.instructions):
            if ins.op in SENDS:
                pos[("send", ins.peer, ins.stage_id, ins.micro_batch_id)] = k
            elif ins.op in RECVS:
                pos.setdefault(("recv", ins.peer, ins.stage_id, ins.micro_batch_id), k)
            elif ins.op == WAIT:
                pos.setdefault(("wait", ins.peer, ins.stage_id, ins.micro_batch_id), k)
            else:
                pos[("item", ins.op, ins.stage_id, ins.micro_batch_id)] = k
        index[p.actor_id] = pos
    for (u, a), (v, b) in grid_dependencies(cssr, grid):
        if a == b or cssr.is_collective(_orig(u)) or cssr.is_collective(_orig(v)):
            continue
        pa, pb = index.get(a, {}), index.get(b, {})
        prod = pa.get(("item", u.inst_type, u.stage_id, u.mb))
        cons = pb.get(("item", v.inst_type, v.stage_id, v.mb))
        if prod is None or cons is None:
            continue
        snd = pa.get(("send", b, u.stage_id, u.mb))
        rcv = pb.get(("wait", a, u.stage_id, u.mb), pb.get(("recv", a, u.stage_id, u.mb)))
        if snd is None or snd < prod:
            report.add("comm", f"no send of {u} from a{a} to a{b} after the producer", u, v)
        if rcv is None or rcv > cons:
            report.add("dependency", f"{_fmt((v, b))} runs before receiving {u} from a{a}", u, v)


def _orig(item: Item) -> Item:
    return Item(BWD, item.stage_id, item.mb) if item.inst_type in (IGRAD, WGRAD) else item


__all__ = [
    "PROFILE_SCHEMA", "CostError", "SimulationError", "SimulationDeadlock", "CapacityExceeded",
    "ProfileRecord", "CostModel", "stage_signatures", "load_profile", "profile_from_data", "merge_profiles",
    "check_profile_covers", "Event", "Timeline", "Metrics", "simulate", "simulate_grid",
    "Violation", "ValidationReport", "validate",
]
