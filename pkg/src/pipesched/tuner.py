"""Grid search over pipeline degree, batch split, placement and priorities."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

from .cssr import BWD, IGRAD, WGRAD, build_cssr
from .lowering import SYNC, gradient_separation, insert_comm
from .scheduler import BREADTH, BWD_FIRST, DEPTH, FWD_FIRST, INTERLEAVED, run_schedule
from .simulator import CostModel, Metrics, simulate
from .topology import ActorMesh, ModelConfig, TopologyError, partition, place

logger = logging.getLogger(__name__)

BASE_PLACEMENTS = ("one-to-one", "circular", "V-shape", "bidirectional")
OBJECTIVES = ("makespan", "bubble_ratio")
# stages per actor for each strategy (circular uses ``chunks``)
_STAGE_FACTOR = {"one-to-one": 1, "bidirectional": 1, "V-shape": 2, "v-bidirectional": 2}


class TunerError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class TunerConfig:
    pp: int
    dp: int
    mbs: int
    m: int
    placement: str
    cttp: str
    fstp: tuple
    bstp: tuple
    chunks: int = 2

    @property
    def num_stages(self) -> int:
        if self.placement == "circular":
            return self.pp * self.chunks
        return self.pp * _STAGE_FACTOR.get(self.placement, 1)

    def label(self) -> str:
        def stp(v):
            return v[0] if v[1] is None else f"{v[0]}/{v[1]}"
        return f"pp{self.pp}-dp{self.dp}-mbs{self.mbs}-{self.placement}-{self.cttp}-{stp(self.fstp)}-{stp(self.bstp)}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fstp"] = list(self.fstp)
        d["bstp"] = list(self.bstp)
        return d


@dataclass
class TuneResult:
    config: TunerConfig
    metrics: Metrics | None
    feasible: bool
    error: str | None = None
    num_slots: int | None = None
    rank: int = 0

    def objective(self, name: str) -> float:
        if self.metrics is None:
            return math.inf
        return float(getattr(self.metrics, name))

    def to_dict(self, objective: str) -> dict:
        return {
            "rank": self.rank,
            "label": self.config.label(),
            "config": self.config.to_dict(),
            "feasible": self.feasible,
            "error": self.error,
            "objective": None if self.metrics is None else self.objective(objective),
            "makespan": None if self.metrics is None else self.metrics.makespan,
            "bubble_ratio": None if self.metrics is None else self.metrics.bubble_ratio,
            "peak_memory": None if self.metrics is None else max(self.metrics.peak_memory.values(), default=0.0),
            "num_slots": self.num_slots,
        }


def _powers_of_two(upto: int) -> list[int]:
    out, v = [], 1
    while v <= upto:
        out.append(v)
        v *= 2
    return out


def _as_choices(value) -> list:
    return list(value) if isinstance(value, (list, tuple, set, frozenset)) else [value]


def enumerate_space(num_actors: int, model: ModelConfig, pins: Mapping[str, object] | None = None,
                    allow_fwdfirst: bool = False, include_v_bidirectional: bool = False,
                    chunks: int = 2) -> list[TunerConfig]:
    """All configurations of the search grid, in a stable order.

    ``pp`` and ``mbs`` range over powers of two with ``dp = num_actors // pp``;
    the interval axis only exists for circular placement, where it equals
    ``pp``; fwdpass-first is only included on request.  ``pins`` fixes an
    axis to one value or a list of values.  Placements needing more stages
    than the model has layers are skipped.
    """
    pins = dict(pins or {})
    unknown = set(pins) - {"pp", "dp", "mbs", "placement", "cttp", "fstp", "bstp"}
    if unknown:
        raise ValueError(f"unknown pinned axes: {sorted(unknown)}")
    if num_actors < 1:
        raise TunerError("need at least one actor")
    if len(model.modalities) != 1:
        raise TunerError("the tuner searches single-modality models")
    layers = model.modalities[0].num_layers
    pps = [1] if num_actors == 1 else [p for p in _powers_of_two(num_actors) if p >= 2]
    placements = list(BASE_PLACEMENTS) + (["v-bidirectional"] if include_v_bidirectional else [])
    cttps = [BWD_FIRST, INTERLEAVED] + ([FWD_FIRST] if allow_fwdfirst else [])
    if "cttp" in pins and FWD_FIRST in _as_choices(pins["cttp"]):
        cttps = list(dict.fromkeys(cttps + [FWD_FIRST]))

    def allowed(axis, values):
        if axis not in pins:
            return values
        chosen = _as_choices(pins[axis])
        return [v for v in values if v in chosen]

    out = []
    for pp in allowed("pp", pps):
        dp = num_actors // pp
        if "dp" in pins and dp not in _as_choices(pins["dp"]):
            continue
        for mbs in allowed("mbs", _powers_of_two(model.global_batch_size)):
            if model.global_batch_size % (dp * mbs):
                continue
            m = model.global_batch_size // (dp * mbs)
            for placement in allowed("placement", placements):
                cfg_probe = TunerConfig(pp, dp, mbs, m, placement, BWD_FIRST, (BREADTH, None), (BREADTH, None), chunks)
                if pp == 1 and placement != "one-to-one":
                    continue
                if cfg_probe.num_stages > layers:
                    continue
                stps = [(BREADTH, None), (DEPTH, None)]
                if placement == "circular":
                    stps += [(BREADTH, pp), (DEPTH, pp)]
                for cttp in allowed("cttp", cttps):
                    for fstp, bstp in itertools.product(_pin_stp(pins, "fstp", stps), _pin_stp(pins, "bstp", stps)):
                        out.append(TunerConfig(pp, dp, mbs, m, placement, cttp, fstp, bstp, chunks))
    if not out:
        raise TunerError("the search space is empty under the given constraints")
    return out


def parse_stp_value(value) -> tuple:
    """``"depth-first"``, ``"depth-first:4"`` or ``("depth-first", 4)`` as ``(direction, interval)``."""
    if isinstance(value, str):
        name, _, interval = value.partition(":")
        return name, int(interval) if interval else None
    name, interval = value
    return name, None if interval is None else int(interval)


def _pin_stp(pins, axis, stps):
    if axis not in pins:
        return stps
    value = pins[axis]
    single = isinstance(value, str) or (isinstance(value, (list, tuple)) and len(value) == 2
                                        and isinstance(value[0], str) and not isinstance(value[1], str))
    chosen = {parse_stp_value(v) for v in ([value] if single else value)}
    return [s for s in stps if s in chosen]


def inflight_limits(config: TunerConfig) -> list[int] | None:
    """Default in-flight policy: stage at pipeline position k holds at most ``n - k + 1`` micro-batches."""
    if config.cttp == FWD_FIRST:
        return None
    n = config.num_stages
    return list(range(n, 0, -1))


@dataclass
class CostPreset:
    """Picklable per-configuration cost factory."""

    name: str = "uniform"
    factor: float = 5.63
    extra: dict = field(default_factory=dict)

    def __call__(self, model: ModelConfig, config: TunerConfig) -> CostModel:
        if self.name == "uniform":
            return CostModel.uniform(**self.extra)
        if self.name == "imbalanced":
            return CostModel.imbalanced(model, config.pp, factor=self.factor, **self.extra)
        raise TunerError(f"unknown cost preset {self.name!r}")


@dataclass
class EvalOptions:
    separate_gradients: bool = True
    comm_mode: str = SYNC
    slot_widths: dict = field(default_factory=lambda: {BWD: 2, IGRAD: 1, WGRAD: 1})


def evaluate(config: TunerConfig, model: ModelConfig, cost, options: EvalOptions | None = None) -> TuneResult:
    """Synthesize and simulate one configuration; failures become infeasible results."""
    options = options or EvalOptions()
    try:
        cm = cost(model, config) if callable(cost) else cost
        graph = partition(model, config.num_stages)
        placement = place(graph, ActorMesh.of(config.pp), config.placement, chunks=config.chunks)
        cssr = build_cssr(placement, config.m)
        grid = run_schedule(cssr, {None: (config.cttp, config.fstp, config.bstp)},
                            inflight=inflight_limits(config), slot_widths=options.slot_widths)
        if options.separate_gradients:
            grid = gradient_separation(grid, cssr, options.slot_widths)
        programs = insert_comm(grid, cssr, options.comm_mode)
        metrics, _ = simulate(programs, cm, placement.graph, config.mbs)
    except (TopologyError, RuntimeError, ValueError) as exc:
        return TuneResult(config, None, False, f"{type(exc).__name__}: {exc}")
    feasible = all(v <= cm.memory_capacity for v in metrics.peak_memory.values())
    return TuneResult(config, metrics, feasible, None if feasible else "exceeds memory capacity", grid.num_slots)


def _evaluate_star(args):
    return evaluate(*args)


def tune(space: Sequence[TunerConfig], cost: CostModel | Callable, model: ModelConfig, objective: str = "makespan",
         workers: int = 1, options: EvalOptions | None = None) -> list[TuneResult]:
    """Evaluate every configuration and rank them.

    Feasible results come first, ascending by objective, ties broken by the
    configuration's position in ``space``; infeasible or failing ones follow.
    """
    if objective not in OBJECTIVES:
        raise TunerError(f"objective must be one of {OBJECTIVES}")
    space = list(space)
    jobs = [(cfg, model, cost, options) for cfg in space]
    if workers > 1 and len(space) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate_star, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_evaluate_star(j) for j in jobs]
    if results and all(r.metrics is None for r in results):
        details = "; ".join(f"{r.config.label()}: {r.error}" for r in results[:5])
        raise TunerError(f"no configuration could be synthesized ({details})")
    order = sorted(range(len(results)),
                   key=lambda i: (not results[i].feasible, results[i].objective(objective), i))
    ranked = [results[i] for i in order]
    for rank, r in enumerate(ranked, start=1):
        r.rank = rank
    return ranked


def baseline_1f1b(results: Sequence[TuneResult], pp: int, mbs: int) -> TuneResult | None:
    """The one-to-one bwdpass-first breadth-first entry for ``(pp, mbs)``."""
    for r in results:
        c = r.config
        if (c.pp, c.mbs, c.placement, c.cttp, c.fstp, c.bstp) == (
                pp, mbs, "one-to-one", BWD_FIRST, (BREADTH, None), (BREADTH, None)):
            return r
    return None


def report_dict(results: Sequence[TuneResult], objective: str, top: int | None = None) -> dict:
    entries = [r.to_dict(objective) for r in results]
    return {"objective": objective, "num_configs": len(entries), "results": entries[:top] if top else entries}


def report_json(results: Sequence[TuneResult], objective: str, top: int | None = None) -> str:
    return json.dumps(report_dict(results, objective, top), indent=2) + "\n"


def report_csv(results: Sequence[TuneResult], objective: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "label", "pp", "dp", "mbs", "m", "placement", "cttp", "fstp", "bstp",
                "feasible", "makespan", "bubble_ratio", "error"])
    for r in results:
        c = r.config
        w.writerow([r.rank, c.label(), c.pp, c.dp, c.mbs, c.m, c.placement, c.cttp,
                    _stp_text(c.fstp), _stp_text(c.bstp), r.feasible,
                    "" if r.metrics is None else repr(r.metrics.makespan),
                    "" if r.metrics is None else repr(r.metrics.bubble_ratio), r.error or ""])
    return buf.getvalue()


def _stp_text(stp) -> str:
    return stp[0] if stp[1] is None else f"{stp[0]}:{stp[1]}"


def human_table(results: Sequence[TuneResult], objective: str, top: int = 10) -> str:
    lines = [f"{'rank':>4}  {objective:>14}  config"]
    for r in results[:top]:
        val = "n/a" if r.metrics is None else f"{r.objective(objective):.6g}"
        flag = "" if r.feasible else f"  [infeasible: {r.error}]"
        lines.append(f"{r.rank:>4}  {val:>14}  {r.config.label()}{flag}")
    return "\n".join(lines)


__all__ = [
    "BASE_PLACEMENTS", "OBJECTIVES", "TunerError", "TunerConfig", "TuneResult", "enumerate_space",
    "inflight_limits", "parse_stp_value", "CostPreset", "EvalOptions", "evaluate", "tune", "baseline_1f1b",
    "report_dict", "report_json", "report_csv", "human_table",
]
