import csv
import io
import json

import pytest

from pipesched import CostModel, ModalityConfig, ModelConfig
from pipesched.simulator import CostError
from pipesched.tuner import (
    BASE_PLACEMENTS, CostPreset, EvalOptions, TunerConfig, TunerError, baseline_1f1b, enumerate_space, evaluate,
    human_table, inflight_limits, report_csv, report_json, tune,
)


def model(layers=64, gbs=128):
    return ModelConfig([ModalityConfig("t", layers)], global_batch_size=gbs)


def expected_count(actors, gbs):
    """Independent count: per (pp, mbs) point, 2 cttps x (4+16+4+4) stp pairs over the four placements."""
    total = 0
    pp = 2
    while pp <= actors:
        dp = actors // pp
        mbs = 1
        while mbs <= gbs:
            if gbs % (dp * mbs) == 0:
                total += 2 * (4 + 16 + 4 + 4)
            mbs *= 2
        pp *= 2
    return total


def test_enumeration_count_8_actors():
    space = enumerate_space(8, model())
    assert len(space) == expected_count(8, 128) == 1176
    assert {c.pp for c in space} == {2, 4, 8}
    assert all(c.dp == 8 // c.pp for c in space)
    assert all(c.m * c.dp * c.mbs == 128 for c in space)
    assert {c.mbs for c in space if c.pp == 2} == {1, 2, 4, 8, 16, 32}
    assert {c.placement for c in space} == set(BASE_PLACEMENTS)
    assert len(set(space)) == len(space)


def test_rules():
    space = enumerate_space(8, model())
    # interval only with circular placement, where it equals pp
    for c in space:
        for stp in (c.fstp, c.bstp):
            if stp[1] is not None:
                assert c.placement == "circular" and stp[1] == c.pp
    assert {c.cttp for c in space} == {"bwdpass-first", "interleaved"}
    assert "fwdpass-first" in {c.cttp for c in enumerate_space(8, model(), allow_fwdfirst=True)}
    assert "fwdpass-first" in {c.cttp for c in enumerate_space(8, model(), {"cttp": "fwdpass-first"})}


def test_pin_one_to_one_drops_interval_axis():
    space = enumerate_space(8, model(), {"placement": "one-to-one"})
    assert {c.placement for c in space} == {"one-to-one"}
    assert all(c.fstp[1] is None and c.bstp[1] is None for c in space)


def test_pins_and_errors():
    space = enumerate_space(8, model(), {"pp": [4], "mbs": 2, "fstp": "depth-first:4"})
    assert {(c.pp, c.mbs) for c in space} == {(4, 2)}
    assert {c.fstp for c in space} == {("depth-first", 4)}
    with pytest.raises(ValueError):
        enumerate_space(8, model(), {"colour": "red"})
    with pytest.raises(TunerError):
        enumerate_space(8, model(), {"pp": [3]})
    with pytest.raises(TunerError):
        enumerate_space(4, ModelConfig([ModalityConfig("a", 4), ModalityConfig("b", 4)]))


def test_single_actor():
    space = enumerate_space(1, model(4, 4))
    assert {(c.pp, c.dp, c.placement) for c in space} == {(1, 1, "one-to-one")}


def test_too_few_layers_skips_placements():
    space = enumerate_space(4, model(4, 8))
    assert {c.placement for c in space if c.pp == 2} == set(BASE_PLACEMENTS)
    assert {c.placement for c in space if c.pp == 4} == {"one-to-one", "bidirectional"}


def test_inflight_policy():
    cfg = TunerConfig(4, 1, 1, 8, "circular", "interleaved", ("breadth-first", 4), ("depth-first", 4))
    assert inflight_limits(cfg) == list(range(8, 0, -1))
    assert inflight_limits(TunerConfig(4, 1, 1, 8, "one-to-one", "fwdpass-first", ("breadth-first", None),
                                       ("breadth-first", None))) is None


def one_config(placement="one-to-one", cttp="bwdpass-first", fstp=("breadth-first", None),
               bstp=("breadth-first", None), pp=4, m=8):
    return TunerConfig(pp, 1, 1, m, placement, cttp, fstp, bstp)


def test_space_of_one():
    cfg = one_config()
    (res,) = tune([cfg], CostPreset(), model(16, 8))
    assert res.config == cfg and res.rank == 1 and res.feasible


def test_interleaved_beats_1f1b_on_uniform_costs():
    m = model(16, 8)
    opts = EvalOptions(separate_gradients=False, slot_widths={})
    base = evaluate(one_config(), m, CostPreset(), opts)
    inter = evaluate(one_config("circular", "interleaved", ("breadth-first", 4), ("depth-first", 4)), m,
                     CostPreset(), opts)
    assert base.metrics.bubble_ratio == pytest.approx(3 / 11)
    assert inter.metrics.bubble_ratio < base.metrics.bubble_ratio


def circular_costs_unknown(model, config):
    if config.placement == "circular":
        raise CostError("no profile for circular stages")
    return CostModel.uniform()


def test_failures_are_reported_not_dropped():
    good = one_config()
    bad = one_config("circular", "interleaved", ("breadth-first", 4), ("depth-first", 4))
    results = tune([bad, good], circular_costs_unknown, model(16, 8))
    assert len(results) == 2
    assert results[0].config == good
    assert not results[1].feasible and "no profile" in results[1].error
    with pytest.raises(TunerError):
        tune([bad], circular_costs_unknown, model(16, 8))


def test_interval_cursor_stall_is_recovered():
    # depth-first forward cursor starts on the second chunk, which waits on this actor's first chunk
    res = evaluate(one_config("circular", "bwdpass-first", ("depth-first", 4), ("breadth-first", 4)),
                   model(16, 8), CostPreset())
    assert res.feasible and res.error is None


def test_memory_infeasible_ranked_last():
    # one activation unit per in-flight micro-batch: pp=4 peaks at 4 on actor 0, pp=2 at 2
    m = model(8, 8)
    space = enumerate_space(4, m, {"mbs": 1, "placement": "one-to-one", "cttp": "bwdpass-first",
                                   "fstp": "breadth-first", "bstp": "breadth-first"})
    results = tune(space, CostPreset(extra={"memory_capacity": 3.0}), m)
    assert [(r.config.pp, r.feasible) for r in results] == [(2, True), (4, False)]
    assert results[1].metrics is not None and results[1].error == "exceeds memory capacity"


def test_ranking_and_reports():
    m = model(16, 8)
    space = enumerate_space(4, m, {"mbs": 1})
    results = tune(space, CostPreset("imbalanced", 5.0), m)
    assert len(results) == len(space)
    feasible = [r for r in results if r.feasible]
    assert all(feasible[0].objective("makespan") <= r.objective("makespan") for r in feasible)
    assert [r.rank for r in results] == list(range(1, len(results) + 1))
    assert results == tune(space, CostPreset("imbalanced", 5.0), m)
    report = json.loads(report_json(results, "makespan"))
    assert report["num_configs"] == len(space)
    rows = list(csv.DictReader(io.StringIO(report_csv(results, "makespan"))))
    assert len(rows) == len(space) and rows[0]["rank"] == "1"
    table = human_table(results, "makespan", top=3)
    assert len(table.splitlines()) == 4
    base = baseline_1f1b(results, 4, 1)
    assert base is not None and base.config.placement == "one-to-one"


def test_parallel_matches_serial():
    m = model(16, 8)
    space = enumerate_space(4, m, {"mbs": 2, "placement": ["one-to-one", "V-shape"]})
    serial = tune(space, CostPreset(), m)
    parallel = tune(space, CostPreset(), m, workers=2)
    assert [(r.config, r.metrics) for r in serial] == [(r.config, r.metrics) for r in parallel]


def test_persisted_profile_reproducible(tmp_path):
    from pipesched import load_profile
    path = tmp_path / "p.json"
    path.write_text(json.dumps([{"inst_type": "FwdPass", "signature": "*", "mbs": 1, "time": 1.25},
                                {"inst_type": "BwdPass", "signature": "*", "mbs": 1, "time": 2.5}]))
    m = model(8, 4)
    space = enumerate_space(2, m, {"mbs": 1})
    a = tune(space, load_profile(path), m)
    b = tune(space, load_profile(path), m)
    assert [(r.config, r.metrics) for r in a] == [(r.config, r.metrics) for r in b]
