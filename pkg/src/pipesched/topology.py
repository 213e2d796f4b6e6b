"""Model, stage and actor descriptions, plus the stage-to-actor placement strategies."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

__all__ = [
    "ModalityConfig",
    "ModelConfig",
    "Stage",
    "StageGraph",
    "ActorMesh",
    "Placement",
    "TopologyError",
    "PLACEMENT_STRATEGIES",
    "even_split",
    "partition",
    "place",
    "mark_shared_stage",
]

PLACEMENT_STRATEGIES = ("one-to-one", "circular", "V-shape", "bidirectional", "v-bidirectional", "custom")


class TopologyError(ValueError):
    """Raised for inconsistent model / stage / actor descriptions."""


@dataclass(frozen=True)
class ModalityConfig:
    name: str
    num_layers: int
    hidden_size: int = 1024
    attention_heads: int = 16
    sequence_length: int = 1024
    vocab_size: int | None = None
    extra: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_layers < 1:
            raise TopologyError(f"modality {self.name!r}: num_layers must be >= 1, got {self.num_layers}")


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[ModalityConfig, ...]
    global_batch_size: int = 1
    micro_batch_size: int = 1

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if not self.modalities:
            raise TopologyError("a model needs at least one modality")
        names = [mod.name for mod in self.modalities]
        if len(set(names)) != len(names):
            raise TopologyError(f"duplicate modality names: {names}")
        if self.micro_batch_size < 1 or self.global_batch_size < 1:
            raise TopologyError("batch sizes must be positive")

    def modality(self, name: str) -> ModalityConfig:
        for mod in self.modalities:
            if mod.name == name:
                return mod
        raise TopologyError(f"unknown modality {name!r}")

    def num_micro_batches(self, dp: int = 1) -> int:
        """Micro-batches per iteration for a data-parallel degree ``dp``."""
        per_replica = self.micro_batch_size * dp
        if self.global_batch_size % per_replica:
            raise TopologyError(
                f"global batch {self.global_batch_size} not divisible by mbs*dp = {per_replica}"
            )
        return self.global_batch_size // per_replica


@dataclass(frozen=True)
class Stage:
    """A contiguous layer range of one modality.

    ``stage_id`` is unique across the whole graph; ``position`` is the 1-based
    pipeline position inside the stage's own pipeline.  Virtual stages carry
    the registered instruction type they exist for.
    """

    stage_id: int
    modality: str
    layer_range: tuple[int, int]
    position: int
    pipeline: int = 0
    is_shared: bool = False
    virtual_inst: str | None = None
    replica_of: int | None = None
    fwd_cost: float | None = None
    bwd_cost: float | None = None
    weight_bytes: float | None = None
    act_bytes: float | None = None

    @property
    def is_virtual(self) -> bool:
        return self.virtual_inst is not None

    @property
    def num_layers(self) -> int:
        return self.layer_range[1] - self.layer_range[0]


@dataclass(frozen=True)
class StageGraph:
    stages: tuple[Stage, ...]
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "edges", tuple(dict.fromkeys(tuple(e) for e in self.edges)))
        ids = [s.stage_id for s in self.stages]
        if len(set(ids)) != len(ids):
            raise TopologyError(f"duplicate stage ids: {ids}")
        known = set(ids)
        for u, v in self.edges:
            if u not in known or v not in known:
                raise TopologyError(f"edge ({u}, {v}) references an unknown stage")
        self.topological_order()

    def stage(self, stage_id: int) -> Stage:
        for s in self.stages:
            if s.stage_id == stage_id:
                return s
        raise TopologyError(f"unknown stage {stage_id}")

    @property
    def real_stages(self) -> list[Stage]:
        return [s for s in self.stages if not s.is_virtual]

    def successors(self, stage_id: int) -> list[int]:
        return [v for u, v in self.edges if u == stage_id]

    def predecessors(self, stage_id: int) -> list[int]:
        return [u for u, v in self.edges if v == stage_id]

    def modality_stages(self, modality: str, pipeline: int | None = None) -> list[Stage]:
        found = [
            s for s in self.stages
            if s.modality == modality and not s.is_virtual and (pipeline is None or s.pipeline == pipeline)
        ]
        return sorted(found, key=lambda s: (s.pipeline, s.position, s.stage_id))

    def pipelines(self) -> list[int]:
        return sorted({s.pipeline for s in self.real_stages})

    def pipeline_stages(self, pipeline: int) -> list[Stage]:
        return sorted((s for s in self.real_stages if s.pipeline == pipeline), key=lambda s: s.position)

    def real_sinks(self) -> list[int]:
        """Real stages with no real successor (the forward/backward turning points)."""
        real = {s.stage_id for s in self.real_stages}
        return [sid for sid in sorted(real) if not any(v in real for v in self.successors(sid))]

    def topological_order(self) -> list[int]:
        indeg = {s.stage_id: 0 for s in self.stages}
        for _, v in self.edges:
            indeg[v] += 1
        ready = sorted(sid for sid, d in indeg.items() if d == 0)
        order = []
        while ready:
            sid = ready.pop(0)
            order.append(sid)
            for v in self.successors(sid):
                indeg[v] -= 1
                if indeg[v] == 0:
                    ready.append(v)
            ready.sort()
        if len(order) != len(self.stages):
            raise TopologyError("stage graph contains a cycle")
        return order

    def with_stage(self, stage: Stage, in_edges: Iterable[int] = ()) -> StageGraph:
        return StageGraph(self.stages + (stage,), self.edges + tuple((u, stage.stage_id) for u in in_edges))

    def next_stage_id(self) -> int:
        return max((s.stage_id for s in self.stages), default=0) + 1


@dataclass(frozen=True)
class ActorMesh:
    actors: tuple[int, ...]
    modality_actors: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "actors", tuple(self.actors))
        if not self.actors:
            raise TopologyError("an actor mesh needs at least one actor")
        if len(set(self.actors)) != len(self.actors):
            raise TopologyError(f"duplicate actor ids: {self.actors}")
        object.__setattr__(
            self, "modality_actors", {k: tuple(v) for k, v in dict(self.modality_actors).items()}
        )
        for mod, acts in self.modality_actors.items():
            unknown = set(acts) - set(self.actors)
            if unknown:
                raise TopologyError(f"modality {mod!r} assigned to unknown actors {sorted(unknown)}")

    @classmethod
    def of(cls, num_actors: int, modality_actors: Mapping[str, Sequence[int]] | None = None) -> ActorMesh:
        return cls(tuple(range(num_actors)), modality_actors or {})

    def __len__(self):
        return len(self.actors)

    def actors_for(self, modality: str) -> tuple[int, ...]:
        return self.modality_actors.get(modality, self.actors)


@dataclass(frozen=True)
class Placement:
    """Result of :func:`place`.

    ``graph`` may differ from the partitioned graph: bidirectional strategies
    add a mirrored replica pipeline.  ``split_groups`` lists pipelines that
    divide the micro-batches between them.
    """

    graph: StageGraph
    mesh: ActorMesh
    strategy: str | Mapping[str, str]
    assignment: Mapping[int, tuple[int, ...]]
    shared: Mapping[int, frozenset[int]] = field(default_factory=dict)
    chunks: int = 1
    split_groups: tuple[tuple[int, ...], ...] = ()

    def stage_actors(self, stage_id: int) -> tuple[int, ...]:
        if stage_id in self.shared:
            return tuple(sorted(self.shared[stage_id]))
        holders = tuple(a for a, stages in self.assignment.items() if stage_id in stages)
        return tuple(sorted(holders))

    def owner(self, stage_id: int) -> int:
        """Actor whose copy of ``stage_id`` releases downstream dependencies (lowest id)."""
        return self.stage_actors(stage_id)[0]

    def stages_of(self, actor: int) -> tuple[int, ...]:
        return self.assignment.get(actor, ())

    def micro_batches(self, stage_id: int, m: int) -> range:
        stage = self.graph.stage(stage_id)
        for group in self.split_groups:
            if stage.pipeline in group:
                k = group.index(stage.pipeline)
                n = len(group)
                # earlier pipelines take the remainder
                bounds = [0]
                for i in range(n):
                    bounds.append(bounds[-1] + m // n + (1 if i < m % n else 0))
                return range(bounds[k], bounds[k + 1])
        return range(m)

    def actor_modality(self, actor: int) -> str | None:
        for sid in self.stages_of(actor):
            stage = self.graph.stage(sid)
            if not stage.is_virtual:
                return stage.modality
        return None

    def with_virtual_stage(self, stage: Stage, in_edges: Iterable[int], actors: Iterable[int]) -> Placement:
        actors = tuple(sorted(set(actors)))
        graph = self.graph.with_stage(stage, in_edges)
        assignment = {a: tuple(sids) for a, sids in self.assignment.items()}
        for a in actors:
            assignment[a] = _sorted_stage_ids(graph, assignment.get(a, ()) + (stage.stage_id,))
        shared = dict(self.shared)
        if len(actors) > 1:
            shared[stage.stage_id] = frozenset(actors)
        return dataclasses.replace(self, graph=graph, assignment=assignment, shared=shared)

    def validate(self) -> None:
        covered = set()
        for actor, stages in self.assignment.items():
            if actor not in self.mesh.actors:
                raise TopologyError(f"placement uses actor {actor} outside the mesh")
            covered.update(stages)
        missing = {s.stage_id for s in self.graph.stages} - covered
        if missing:
            raise TopologyError(f"stages not assigned to any actor: {sorted(missing)}")


def even_split(num_layers: int, num_stages: int) -> list[tuple[int, int]]:
    """Split ``num_layers`` into ``num_stages`` contiguous ranges; earliest stages take the remainder."""
    base, rem = divmod(num_layers, num_stages)
    ranges, begin = [], 0
    for i in range(num_stages):
        end = begin + base + (1 if i < rem else 0)
        ranges.append((begin, end))
        begin = end
    return ranges


def partition(
    model: ModelConfig,
    num_stages_per_modality: Mapping[str, int] | int,
    rule: Callable[[ModalityConfig, int], Sequence[tuple[int, int]]] | None = None,
) -> StageGraph:
    """Partition every modality's layers into a chain of stages.

    Stage ids are global and dense, numbered modality by modality in the
    order the model lists them.  A custom ``rule(modality, num_stages)``
    must return contiguous ``[begin, end)`` ranges covering all layers.
    """
    if isinstance(num_stages_per_modality, int):
        num_stages_per_modality = {mod.name: num_stages_per_modality for mod in model.modalities}
    stages: list[Stage] = []
    edges: list[tuple[int, int]] = []
    next_id = 1
    for pipeline, mod in enumerate(model.modalities):
        n = num_stages_per_modality.get(mod.name)
        if n is None:
            raise TopologyError(f"no stage count given for modality {mod.name!r}")
        if n < 1:
            raise TopologyError(f"modality {mod.name!r}: need at least one stage")
        if n > mod.num_layers:
            raise TopologyError(f"modality {mod.name!r}: {n} stages exceed {mod.num_layers} layers")
        ranges = list(rule(mod, n)) if rule is not None else even_split(mod.num_layers, n)
        _check_ranges(mod, ranges, n)
        for pos, (begin, end) in enumerate(ranges, start=1):
            stages.append(Stage(next_id, mod.name, (begin, end), pos, pipeline))
            if pos > 1:
                edges.append((next_id - 1, next_id))
            next_id += 1
    return StageGraph(tuple(stages), tuple(edges))


def _check_ranges(mod: ModalityConfig, ranges, n):
    if len(ranges) != n:
        raise TopologyError(f"modality {mod.name!r}: rule produced {len(ranges)} ranges, expected {n}")
    expect = 0
    for begin, end in ranges:
        if begin != expect:
            kind = "overlapping" if begin < expect else "missing"
            raise TopologyError(f"modality {mod.name!r}: {kind} layers at {min(begin, expect)}")
        if end <= begin:
            raise TopologyError(f"modality {mod.name!r}: empty stage [{begin}, {end})")
        expect = end
    if expect != mod.num_layers:
        raise TopologyError(f"modality {mod.name!r}: missing layers [{expect}, {mod.num_layers})")


def _sorted_stage_ids(graph: StageGraph, stage_ids: Iterable[int]) -> tuple[int, ...]:
    return tuple(sorted(set(stage_ids), key=lambda sid: (graph.stage(sid).position, sid)))


def _mirror(graph: StageGraph, stages: list[Stage], pipeline: int, next_id: int):
    """Replica of a stage chain in a fresh pipeline; returns (new stages, new edges)."""
    copies = [
        dataclasses.replace(s, stage_id=next_id + i, pipeline=pipeline, replica_of=s.stage_id)
        for i, s in enumerate(stages)
    ]
    edges = [(copies[i].stage_id, copies[i + 1].stage_id) for i in range(len(copies) - 1)]
    return copies, edges


def place(graph: StageGraph, mesh: ActorMesh, strategy: str | Mapping[str, str] = "one-to-one", **options) -> Placement:
    """Map stages to actors.

    ``strategy`` is one name for every modality or a ``{modality: name}``
    map.  Each modality is placed on ``mesh.actors_for(modality)``.
    Options: ``assignment`` (custom: ``{actor: [stage ids]}``).
    """
    modalities = list(dict.fromkeys(s.modality for s in graph.real_stages))
    per_mod = {mod: strategy for mod in modalities} if isinstance(strategy, str) else dict(strategy)
    for mod in modalities:
        if mod not in per_mod:
            raise TopologyError(f"no placement strategy for modality {mod!r}")

    assignment: dict[int, list[int]] = {a: [] for a in mesh.actors}
    extra_stages: list[Stage] = []
    extra_edges: list[tuple[int, int]] = []
    split_groups: list[tuple[int, ...]] = []
    next_id = graph.next_stage_id()
    next_pipeline = max(graph.pipelines(), default=-1) + 1
    chunks = 1

    for mod in modalities:
        name = per_mod[mod]
        if name not in PLACEMENT_STRATEGIES:
            raise TopologyError(f"unknown placement strategy {name!r}")
        stages = graph.modality_stages(mod)
        actors = list(mesh.actors_for(mod))
        p, n = len(actors), len(stages)
        if name == "custom":
            custom = options.get("assignment")
            if custom is None:
                raise TopologyError("custom placement requires an 'assignment' option")
            for actor, sids in custom.items():
                actor = int(actor)
                if actor not in assignment:
                    raise TopologyError(f"custom placement uses actor {actor} outside the mesh")
                assignment[actor].extend(int(s) for s in sids if graph.stage(int(s)).modality == mod)
            continue
        if name == "one-to-one":
            if n != p:
                raise TopologyError(f"one-to-one needs stages == actors for {mod!r}, got {n} vs {p}")
            for i, s in enumerate(stages):
                assignment[actors[i]].append(s.stage_id)
        elif name == "circular":
            if n % p:
                raise TopologyError(f"circular needs stages = v*actors for {mod!r}, got {n} vs {p}")
            chunks = max(chunks, n // p)
            for i, s in enumerate(stages):
                assignment[actors[i % p]].append(s.stage_id)
        elif name == "V-shape":
            if n != 2 * p:
                raise TopologyError(f"V-shape needs stages == 2*actors for {mod!r}, got {n} vs {p}")
            chunks = max(chunks, 2)
            for i in range(p):
                assignment[actors[i]] += [stages[i].stage_id, stages[2 * p - 1 - i].stage_id]
        elif name in ("bidirectional", "v-bidirectional"):
            vshape = name == "v-bidirectional"
            need = 2 * p if vshape else p
            if n != need:
                raise TopologyError(f"{name} needs {need} stages for {mod!r}, got {n}")
            copies, edges = _mirror(graph, stages, next_pipeline, next_id)
            next_id += len(copies)
            extra_stages += copies
            extra_edges += edges
            split_groups.append((stages[0].pipeline, next_pipeline))
            next_pipeline += 1
            rev = actors[::-1]
            if vshape:
                chunks = max(chunks, 2)
                for i in range(p):
                    assignment[actors[i]] += [stages[i].stage_id, stages[2 * p - 1 - i].stage_id]
                    assignment[rev[i]] += [copies[i].stage_id, copies[2 * p - 1 - i].stage_id]
            else:
                for i in range(p):
                    assignment[actors[i]].append(stages[i].stage_id)
                    assignment[rev[i]].append(copies[i].stage_id)

    full = StageGraph(graph.stages + tuple(extra_stages), graph.edges + tuple(extra_edges)) if extra_stages else graph
    result = Placement(
        graph=full,
        mesh=mesh,
        strategy=strategy if isinstance(strategy, str) else dict(strategy),
        assignment={a: _sorted_stage_ids(full, sids) for a, sids in assignment.items() if sids},
        chunks=chunks,
        split_groups=tuple(split_groups),
    )
    result.validate()
    return result


def mark_shared_stage(placement: Placement, stage_id: int, actor_set: Iterable[int]) -> Placement:
    """Replicate ``stage_id`` on every actor in ``actor_set`` (plus its current holder)."""
    actor_set = set(actor_set)
    if not actor_set:
        raise TopologyError("shared stage needs a nonempty actor set")
    placement.graph.stage(stage_id)  # raises for unknown stages
    unknown = actor_set - set(placement.mesh.actors)
    if unknown:
        raise TopologyError(f"actors {sorted(unknown)} are not in the mesh")
    holders = set(placement.stage_actors(stage_id)) | actor_set
    assignment = {a: tuple(s) for a, s in placement.assignment.items()}
    for a in holders:
        assignment[a] = _sorted_stage_ids(placement.graph, assignment.get(a, ()) + (stage_id,))
    shared = dict(placement.shared)
    if len(holders) > 1:
        shared[stage_id] = frozenset(holders)
        stages = tuple(dataclasses.replace(s, is_shared=True) if s.stage_id == stage_id else s
                       for s in placement.graph.stages)
        graph = StageGraph(stages, placement.graph.edges)
    else:
        graph = placement.graph
    return dataclasses.replace(placement, graph=graph, assignment=assignment, shared=shared)
