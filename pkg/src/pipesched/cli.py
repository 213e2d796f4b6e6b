"""Command-line front end.

Exit codes: 0 ok, 1 validation failed, 2 spec/config error, 3 deadlock, 4 infeasible.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import SpecError, build, cost_from_spec, load_spec, synthesize
from .cssr import CSSRError
from .grid import ScheduleGrid
from .lowering import dump_programs, load_programs
from .plotting import close, gantt, render_grid, tuner_bars
from .scheduler import DeadlockError
from .simulator import CostError, SimulationDeadlock, Timeline, merge_profiles, simulate, validate
from .topology import TopologyError
from .tuner import CostPreset, EvalOptions, TunerError, enumerate_space, human_table, report_csv, report_json, tune

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_SPEC = 2
EXIT_DEADLOCK = 3
EXIT_INFEASIBLE = 4

logger = logging.getLogger("pipesched")


def _out_dir(path: str | None) -> Path:
    out = Path(path or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stage_count(built) -> int:
    graph = built.placement.graph
    last = built.model.modalities[-1].name
    return len([s for s in graph.modality_stages(last) if s.pipeline == min(graph.pipelines())])


def cmd_synthesize(args) -> int:
    built = build(load_spec(args.spec))
    grid, programs = synthesize(built)
    report = validate(grid, built.cssr, built.inflight_limits)
    prog_report = validate(programs, built.cssr)
    report.violations += prog_report.violations
    out = _out_dir(args.out)
    (out / "grid.json").write_text(grid.dumps())
    (out / "programs.jsonl").write_text(dump_programs(programs))
    (out / "validation.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    if not args.no_figure:
        close(render_grid(grid, out / "grid.svg"))
    print(grid.render_text())
    print(f"num_slots={grid.num_slots} bubble_ratio={grid.bubble_ratio():.6f} valid={report.ok}")
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_validate(args) -> int:
    built = build(load_spec(args.spec))
    if args.grid:
        target = ScheduleGrid.loads(Path(args.grid).read_text())
    elif args.programs:
        target = load_programs(Path(args.programs).read_text())
    else:
        target, _ = synthesize(built)
    report = validate(target, built.cssr, built.inflight_limits)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_simulate(args) -> int:
    spec = load_spec(args.spec)
    if args.comm_mode:
        spec.setdefault("passes", {})["comm_mode"] = args.comm_mode
    built = build(spec)
    if args.programs:
        programs = load_programs(Path(args.programs).read_text())
    else:
        _, programs = synthesize(built)
    cost = cost_from_spec(spec, built.model, _stage_count(built))
    if args.scale:
        cost = cost.scale(args.scale)
    occupy = spec.get("cost", {}).get("occupy_sends", False)
    metrics, timeline = simulate(programs, cost, built.placement.graph, built.mbs, occupy_sends=occupy,
                                 capacity="error" if args.strict_memory else "warn")
    out = _out_dir(args.out)
    (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=2) + "\n")
    (out / "timeline.csv").write_text(timeline.to_csv())
    if not args.no_figure:
        fig = gantt(timeline, [p.actor_id for p in programs], metrics.makespan)
        fig.savefig(out / "timeline.svg")
        close(fig)
    print(f"makespan={metrics.makespan:.6g} bubble_ratio={metrics.bubble_ratio:.6f}")
    for a in sorted(metrics.busy):
        b = metrics.breakdown[a]
        print(f"actor {a}: compute={b['compute']:.6g} comm-wait={b['comm-wait']:.6g} "
              f"dependency-wait={b['dependency-wait']:.6g} peak_memory={metrics.peak_memory[a]:.6g}")
    return EXIT_OK


def _parse_pin(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise SpecError(f"--pin expects key=value, got {text!r}")
    values = [v.strip() for v in value.split(",") if v.strip()]
    if key in ("pp", "dp", "mbs"):
        values = [int(v) for v in values]
    return key.strip(), values


def cmd_tune(args) -> int:
    spec = load_spec(args.spec)
    built = build(spec)
    pins = dict(_parse_pin(p) for p in args.pin)
    actors = args.actors or spec["mesh"]["num_actors"]
    space = enumerate_space(actors, built.model, pins, allow_fwdfirst=args.allow_fwdfirst,
                            include_v_bidirectional=args.include_v_bidirectional)
    c = spec.get("cost", {})
    extra = {k: c[k] for k in ("comm_latency", "bandwidth", "memory_capacity", "wgrad_hold") if k in c}
    if "profile" in c:
        cost = cost_from_spec(spec, built.model, _stage_count(built))
    else:
        cost = CostPreset(c.get("preset", "uniform"), c.get("factor", 5.63), extra)
    passes = spec.get("passes", {})
    options = EvalOptions(separate_gradients=passes.get("gradient_separation", True),
                          comm_mode=passes.get("comm_mode", "sync"))
    results = tune(space, cost, built.model, args.objective, workers=args.workers, options=options)
    out = _out_dir(args.out)
    (out / "tune.json").write_text(report_json(results, args.objective))
    (out / "tune.csv").write_text(report_csv(results, args.objective))
    if not args.no_figure:
        shown = [r for r in results[: args.top] if r.metrics is not None]
        close(tuner_bars([r.config.label() for r in shown], [r.objective(args.objective) for r in shown],
                         args.objective, out / "tune.svg"))
    print(human_table(results, args.objective, args.top))
    return EXIT_OK if any(r.feasible for r in results) else EXIT_INFEASIBLE


def cmd_render(args) -> int:
    if args.grid:
        grid = ScheduleGrid.loads(Path(args.grid).read_text())
        fig = render_grid(grid, args.output)
    else:
        timeline = Timeline.from_csv(Path(args.timeline).read_text())
        fig = gantt(timeline)
        fig.savefig(args.output)
    close(fig)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_profile_merge(args) -> int:
    lists = [json.loads(Path(p).read_text()) for p in args.inputs]
    merged = merge_profiles(*lists)
    Path(args.output).write_text(json.dumps(merged, indent=2) + "\n")
    print(f"merged {sum(len(x) for x in lists)} records into {len(merged)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipesched", description="Pipeline schedule synthesis and simulation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="build the schedule grid and per-actor programs")
    p.add_argument("spec")
    p.add_argument("-o", "--out", default=".")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("validate", help="check a grid or programs against a schedule description")
    p.add_argument("spec")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--grid")
    g.add_argument("--programs")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="simulate under the description's cost model")
    p.add_argument("spec")
    p.add_argument("--programs")
    p.add_argument("--comm-mode", choices=["sync", "async"])
    p.add_argument("--scale", type=float)
    p.add_argument("--strict-memory", action="store_true")
    p.add_argument("-o", "--out", default=".")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tune", help="grid-search configurations")
    p.add_argument("spec")
    p.add_argument("--objective", choices=["makespan", "bubble_ratio"], default="makespan")
    p.add_argument("--pin", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--actors", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--allow-fwdfirst", action="store_true")
    p.add_argument("--include-v-bidirectional", action="store_true")
    p.add_argument("-o", "--out", default=".")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("render", help="draw a grid or timeline as SVG")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--grid")
    g.add_argument("--timeline")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("profile-merge", help="merge profile record files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_profile_merge)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DeadlockError, SimulationDeadlock) as exc:
        print(f"deadlock: {exc}", file=sys.stderr)
        return EXIT_DEADLOCK
    except TunerError as exc:
        print(f"tuning failed: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SpecError, TopologyError, CSSRError, CostError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC


if __name__ == "__main__":
    sys.exit(main())
