"""Declarative schedule description files: JSON schema and the builder that runs them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from .cssr import CSSR, SchedAttr, build_cssr
from .grid import ScheduleGrid
from .lowering import SYNC, ActorProgram, gradient_separation, insert_comm
from .scheduler import FWD_FIRST, Scheduler
from .simulator import CostModel, load_profile
from .topology import ActorMesh, ModalityConfig, ModelConfig, Placement, mark_shared_stage, partition, place


class SpecError(ValueError):
    """Schema or consistency error in a schedule description."""


_STP = {
    "oneOf": [
        {"type": "string", "enum": ["breadth-first", "depth-first", "breadth", "depth"]},
        {
            "type": "object",
            "properties": {
                "direction": {"type": "string", "enum": ["breadth-first", "depth-first", "breadth", "depth"]},
                "interval": {"type": "integer", "minimum": 1},
            },
            "required": ["direction"],
            "additionalProperties": False,
        },
    ]
}

_PRIORITY = {
    "type": "object",
    "properties": {
        "cttp": {"type": "string"},
        "unit1": {"type": "integer", "minimum": 1},
        "unit2": {"type": "integer", "minimum": 1},
        "fstp": _STP,
        "bstp": _STP,
        "bfstp": _STP,
    },
    "additionalProperties": False,
}

_STAGE_REF = {"oneOf": [{"type": "integer", "minimum": 1}, {"type": "string", "pattern": "^(last|virtual):.+$"}]}

SPEC_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "model": {
            "type": "object",
            "properties": {
                "modalities": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "properties": {
                            "name": {"type": "string", "minLength": 1},
                            "num_layers": {"type": "integer", "minimum": 1},
                            "hidden_size": {"type": "integer", "minimum": 1},
                            "attention_heads": {"type": "integer", "minimum": 1},
                            "sequence_length": {"type": "integer", "minimum": 1},
                            "vocab_size": {"type": "integer", "minimum": 1},
                        },
                        "required": ["name", "num_layers"],
                        "additionalProperties": False,
                    },
                },
                "global_batch_size": {"type": "integer", "minimum": 1},
                "micro_batch_size": {"type": "integer", "minimum": 1},
                "num_micro_batches": {"type": "integer", "minimum": 0},
                "dp": {"type": "integer", "minimum": 1},
            },
            "required": ["modalities"],
            "additionalProperties": False,
        },
        "mesh": {
            "type": "object",
            "properties": {
                "num_actors": {"type": "integer", "minimum": 1},
                "modality_actors": {
                    "type": "object",
                    "additionalProperties": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                },
            },
            "required": ["num_actors"],
            "additionalProperties": False,
        },
        "placement": {
            "type": "object",
            "properties": {
                "stages": {
                    "oneOf": [
                        {"type": "integer", "minimum": 1},
                        {"type": "object", "additionalProperties": {"type": "integer", "minimum": 1}},
                    ]
                },
                "strategy": {
                    "oneOf": [{"type": "string"}, {"type": "object", "additionalProperties": {"type": "string"}}]
                },
                "chunks": {"type": "integer", "minimum": 1},
                "assignment": {
                    "type": "object",
                    "additionalProperties": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                },
                "shared": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "stage": {"type": "integer", "minimum": 1},
                            "actors": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                        },
                        "required": ["stage", "actors"],
                        "additionalProperties": False,
                    },
                },
            },
            "required": ["strategy"],
            "additionalProperties": False,
        },
        "priorities": {
            "type": "object",
            "properties": {
                "default": _PRIORITY,
                "modalities": {"type": "object", "additionalProperties": _PRIORITY},
                "actors": {"type": "object", "additionalProperties": _PRIORITY},
            },
            "additionalProperties": False,
        },
        "inflight": {
            "oneOf": [
                {"type": "array", "items": {"type": "integer", "minimum": 1}},
                {"type": "string", "enum": ["1f1b", "unlimited"]},
            ]
        },
        "registrations": {
            "type": "object",
            "properties": {
                "instructions": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "name": {"type": "string", "minLength": 1},
                            "kind": {"type": "string", "enum": ["communication", "computation"]},
                            "sched_unit": {"type": "integer", "minimum": 1},
                            "group": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                        },
                        "required": ["name"],
                        "additionalProperties": False,
                    },
                },
                "stages": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "inst": {"type": "string"},
                            "modalities": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                            "actors": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                        },
                        "required": ["inst", "modalities"],
                        "additionalProperties": False,
                    },
                },
                "deps": {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "minItems": 2,
                        "maxItems": 2,
                        "items": {
                            "type": "array",
                            "minItems": 2,
                            "maxItems": 2,
                            "prefixItems": [{"type": "string"}, _STAGE_REF],
                        },
                    },
                },
            },
            "additionalProperties": False,
        },
        "passes": {
            "type": "object",
            "properties": {
                "gradient_separation": {"type": "boolean"},
                "comm_mode": {"type": "string", "enum": ["sync", "async"]},
                "slot_widths": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 1}},
            },
            "additionalProperties": False,
        },
        "cost": {
            "type": "object",
            "properties": {
                "preset": {"type": "string", "enum": ["uniform", "imbalanced"]},
                "factor": {"type": "number", "minimum": 1},
                "profile": {"type": "string"},
                "strict": {"type": "boolean"},
                "comm_latency": {"type": "number", "minimum": 0},
                "bandwidth": {"type": "number", "exclusiveMinimum": 0},
                "memory_capacity": {"type": "number", "exclusiveMinimum": 0},
                "wgrad_hold": {"type": "number", "minimum": 0, "maximum": 1},
                "occupy_sends": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
    },
    "required": ["model", "mesh", "placement"],
    "additionalProperties": False,
}


def validate_spec(data: dict) -> dict:
    data = {k: v for k, v in data.items() if k != "_base_dir"} if isinstance(data, dict) else data
    try:
        jsonschema.Draft202012Validator(SPEC_SCHEMA).validate(data)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SpecError(f"{where}: {exc.message}") from exc
    return data


def load_spec(source: str | Path | dict) -> dict:
    if isinstance(source, dict):
        return validate_spec(source)
    path = Path(source)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: not valid JSON ({exc})") from exc
    spec = dict(validate_spec(data))
    spec["_base_dir"] = str(path.parent)
    return spec


@dataclass
class Built:
    """Everything a schedule description resolves to."""

    spec: dict
    model: ModelConfig
    placement: Placement
    cssr: CSSR
    scheduler: Scheduler
    num_micro_batches: int
    mbs: int
    slot_widths: dict = field(default_factory=dict)
    separate: bool = False
    comm_mode: str = SYNC

    @property
    def inflight_limits(self):
        return self.scheduler.inflight_table()


def _model(spec: dict) -> ModelConfig:
    m = spec["model"]
    mods = [ModalityConfig(**mod) for mod in m["modalities"]]
    return ModelConfig(mods, m.get("global_batch_size", 1), m.get("micro_batch_size", 1))


def _stage_ref(ref, placement: Placement, virtual: dict[str, int]) -> int:
    if isinstance(ref, int):
        return ref
    kind, _, name = ref.partition(":")
    if kind == "virtual":
        if name not in virtual:
            raise SpecError(f"no registered stage hosts {name!r}")
        return virtual[name]
    graph = placement.graph
    sinks = [s for s in graph.real_sinks() if graph.stage(s).modality == name]
    if not sinks:
        raise SpecError(f"unknown modality {name!r} in stage reference {ref!r}")
    return min(sinks)


def build(spec: dict) -> Built:
    validate_spec(spec)
    model = _model(spec)
    mesh_spec = spec["mesh"]
    mesh = ActorMesh.of(mesh_spec["num_actors"], mesh_spec.get("modality_actors"))
    pl = spec["placement"]
    strategy = pl["strategy"]
    stages = pl.get("stages")
    if stages is None:
        stages = {}
        for mod in model.modalities:
            name = strategy if isinstance(strategy, str) else strategy.get(mod.name, "one-to-one")
            n = len(mesh.actors_for(mod.name))
            stages[mod.name] = n * (pl.get("chunks", 2) if name == "circular" else 2 if name in ("V-shape", "v-bidirectional") else 1)
    graph = partition(model, stages)
    options = {k: pl[k] for k in ("chunks", "assignment") if k in pl}
    placement = place(graph, mesh, strategy, **options)
    for entry in pl.get("shared", ()):
        placement = mark_shared_stage(placement, entry["stage"], entry["actors"])

    m_spec = spec["model"]
    dp = m_spec.get("dp", 1)
    num_mb = m_spec["num_micro_batches"] if "num_micro_batches" in m_spec else model.num_micro_batches(dp)
    cssr = build_cssr(placement, num_mb)
    reg = spec.get("registrations", {})
    for inst in reg.get("instructions", ()):
        attr = SchedAttr(sched_unit=inst.get("sched_unit", 1))
        inst_attr = {"group": inst["group"]} if "group" in inst else {}
        cssr.register_new_inst(inst["name"], attr, inst_attr, inst.get("kind", "communication"))
    virtual: dict[str, int] = {}
    for st in reg.get("stages", ()):
        virtual[st["inst"]] = cssr.register_new_stage(st["inst"], st["modalities"], st.get("actors"))
    if reg.get("deps"):
        pairs = [((t1, _stage_ref(s1, cssr.placement, virtual)), (t2, _stage_ref(s2, cssr.placement, virtual)))
                 for (t1, s1), (t2, s2) in reg["deps"]]
        cssr.set_cssr_deps(pairs)

    passes = spec.get("passes", {})
    widths = dict(passes.get("slot_widths", {}))
    sched = Scheduler(cssr, widths)
    prios = spec.get("priorities", {})
    modalities = [mod.name for mod in model.modalities]
    default = prios.get("default")
    fwd_first = False
    for mod in modalities:
        entry = prios.get("modalities", {}).get(mod, default)
        if entry is not None:
            cttp, fstp, bstp = _priority_parts(entry)
            fwd_first |= cttp["mode"] == FWD_FIRST
            sched.set_priority(mod, cttp, fstp, bstp)
    for actor, entry in prios.get("actors", {}).items():
        cttp, fstp, bstp = _priority_parts(entry)
        if "cttp" in entry:
            sched.set_cttp_for_actor(int(actor), cttp)
        if any(k in entry for k in ("fstp", "bstp", "bfstp")):
            sched.set_stp_for_actor(int(actor), fstp, bstp)
    inflight = spec.get("inflight")
    if isinstance(inflight, list):
        sched.config_inflight_micros(inflight)
    elif inflight == "1f1b":
        sched.config_inflight_micros(_one_f_one_b(cssr))
    return Built(spec, model, cssr.placement, cssr, sched, num_mb, model.micro_batch_size, widths,
                 passes.get("gradient_separation", False), passes.get("comm_mode", SYNC))


def _priority_parts(entry: dict):
    cttp = {"mode": entry.get("cttp", "bwdpass-first"), "unit1": entry.get("unit1", 1), "unit2": entry.get("unit2", 1)}
    fstp = entry.get("fstp", "breadth-first")
    bstp = entry.get("bstp", entry.get("bfstp", "breadth-first"))
    return cttp, fstp, bstp


def _one_f_one_b(cssr: CSSR) -> list[int]:
    """Per-position limits ``n - k + 1`` for pipelines of equal length ``n``."""
    graph = cssr.graph
    lengths = {len(graph.pipeline_stages(p)) for p in graph.pipelines()}
    if len(lengths) != 1:
        raise SpecError("'1f1b' in-flight policy needs pipelines of equal length; give an explicit list")
    n = lengths.pop()
    return list(range(n, 0, -1))


def cost_from_spec(spec: dict, model: ModelConfig | None = None, num_stages: int | None = None) -> CostModel:
    c = spec.get("cost", {})
    kw = {k: c[k] for k in ("comm_latency", "bandwidth", "memory_capacity", "wgrad_hold") if k in c}
    if c.get("preset", "uniform") == "imbalanced":
        if model is None or num_stages is None:
            raise SpecError("the imbalanced preset needs the model and its stage count")
        base = CostModel.imbalanced(model, num_stages, factor=c.get("factor", 5.63), **kw)
    else:
        widths = spec.get("passes", {}).get("slot_widths")
        base = CostModel.uniform(widths, **kw)
    if "profile" in c:
        path = Path(c["profile"])
        if not path.is_absolute() and "_base_dir" in spec:
            path = Path(spec["_base_dir"]) / path
        base = load_profile(path, strict=c.get("strict", False), base=base)
    return base


def synthesize(built: Built) -> tuple[ScheduleGrid, list[ActorProgram]]:
    grid = built.scheduler.run()
    if built.separate:
        grid = gradient_separation(grid, built.cssr, built.slot_widths)
    return grid, insert_comm(grid, built.cssr, built.comm_mode)


__all__ = ["SPEC_SCHEMA", "SpecError", "validate_spec", "load_spec", "Built", "build", "cost_from_spec", "synthesize"]
