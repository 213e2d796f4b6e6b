import pytest
from hypothesis import given, settings, strategies as st

from pipesched import (
    ActorMesh, ModalityConfig, ModelConfig, TopologyError, build_cssr, mark_shared_stage, partition, place,
    run_schedule,
)
from pipesched.topology import Stage, StageGraph


def model(n, name="text"):
    return ModelConfig([ModalityConfig(name, n)])


def layer_counts(graph):
    return [s.num_layers for s in graph.real_stages]


def test_even_partition_64_over_8():
    assert layer_counts(partition(model(64), 8)) == [8] * 8


def test_remainder_goes_to_earliest_stages():
    counts = layer_counts(partition(model(10), 4))
    assert counts == [3, 3, 2, 2]
    assert sum(counts) == 10


def test_identity_partition():
    graph = partition(model(4), 4)
    assert [s.layer_range for s in graph.stages] == [(0, 1), (1, 2), (2, 3), (3, 4)]
    assert graph.edges == ((1, 2), (2, 3), (3, 4))


def test_partition_errors():
    with pytest.raises(TopologyError):
        partition(model(4), 0)
    with pytest.raises(TopologyError):
        partition(model(3), 4)
    with pytest.raises(TopologyError):
        partition(model(4), 2, rule=lambda mod, n: [(0, 3), (2, 4)])
    with pytest.raises(TopologyError):
        partition(model(4), 2, rule=lambda mod, n: [(0, 1), (2, 4)])


def test_custom_rule():
    graph = partition(model(6), 2, rule=lambda mod, n: [(0, 1), (1, 6)])
    assert layer_counts(graph) == [1, 5]


def test_model_invariants():
    with pytest.raises(TopologyError):
        ModalityConfig("x", 0)
    with pytest.raises(TopologyError):
        ModelConfig([ModalityConfig("x", 2), ModalityConfig("x", 3)])
    with pytest.raises(TopologyError):
        ModelConfig([])
    m = ModelConfig([ModalityConfig("x", 2)], global_batch_size=12, micro_batch_size=2)
    assert m.num_micro_batches(dp=2) == 3
    with pytest.raises(TopologyError):
        m.num_micro_batches(dp=4)


def test_cyclic_graph_rejected():
    stages = [Stage(1, "x", (0, 1), 1), Stage(2, "x", (1, 2), 2)]
    with pytest.raises(TopologyError):
        StageGraph(stages, [(1, 2), (2, 1)])


def test_one_to_one():
    pl = place(partition(model(4), 4), ActorMesh.of(4), "one-to-one")
    assert {a: list(pl.stages_of(a)) for a in range(4)} == {0: [1], 1: [2], 2: [3], 3: [4]}


def test_circular():
    pl = place(partition(model(8), 8), ActorMesh.of(4), "circular")
    assert {a: list(pl.stages_of(a)) for a in range(4)} == {0: [1, 5], 1: [2, 6], 2: [3, 7], 3: [4, 8]}
    assert pl.chunks == 2


def test_vshape():
    pl = place(partition(model(8), 8), ActorMesh.of(4), "V-shape")
    assert {a: list(pl.stages_of(a)) for a in range(4)} == {0: [1, 8], 1: [2, 7], 2: [3, 6], 3: [4, 5]}


def test_bidirectional_mirror_and_split():
    pl = place(partition(model(4), 4), ActorMesh.of(4), "bidirectional")
    down = [s for s in pl.graph.stages if s.pipeline == 0]
    up = [s for s in pl.graph.stages if s.pipeline == 1]
    assert len(down) == len(up) == 4
    # replica pipeline runs over the actors in reverse order
    assert [pl.stage_actors(s.stage_id)[0] for s in up] == [3, 2, 1, 0]
    assert list(pl.micro_batches(down[0].stage_id, 8)) == [0, 1, 2, 3]
    assert list(pl.micro_batches(up[0].stage_id, 8)) == [4, 5, 6, 7]
    # odd m: the first direction takes the extra micro-batch
    assert len(pl.micro_batches(down[0].stage_id, 5)) == 3


def test_incompatible_counts():
    with pytest.raises(TopologyError):
        place(partition(model(6), 6), ActorMesh.of(4), "circular")
    with pytest.raises(TopologyError):
        place(partition(model(4), 3), ActorMesh.of(4), "one-to-one")
    with pytest.raises(TopologyError):
        place(partition(model(6), 6), ActorMesh.of(4), "V-shape")


def test_custom_assignment():
    pl = place(partition(model(4), 4), ActorMesh.of(2), "custom", assignment={0: [1, 2], 1: [3, 4]})
    assert pl.stages_of(0) == (1, 2)
    with pytest.raises(TopologyError):
        place(partition(model(4), 4), ActorMesh.of(2), "custom", assignment={0: [1, 2]})


def test_shared_first_stage_on_two_actors():
    pl = place(partition(model(4), 4), ActorMesh.of(4), "one-to-one")
    shared = mark_shared_stage(pl, 1, {0, 1})
    assert 1 in shared.stages_of(0) and 1 in shared.stages_of(1)
    assert shared.owner(1) == 0
    assert shared.graph.stage(1).is_shared


def test_shared_singleton_is_identity():
    pl = place(partition(model(4), 4), ActorMesh.of(4), "one-to-one")
    assert mark_shared_stage(pl, 2, {1}) == pl


def test_shared_errors():
    pl = place(partition(model(4), 4), ActorMesh.of(4), "one-to-one")
    with pytest.raises(TopologyError):
        mark_shared_stage(pl, 1, {9})
    with pytest.raises(TopologyError):
        mark_shared_stage(pl, 1, set())
    with pytest.raises(TopologyError):
        mark_shared_stage(pl, 99, {0})


def test_shared_last_stage_gives_two_forward_items():
    pl = place(partition(model(2), 2), ActorMesh.of(2), "one-to-one")
    pl = mark_shared_stage(pl, 2, {0, 1})
    grid = run_schedule(build_cssr(pl, 1))
    fwd_last = [i for a in grid.actors for i in grid.sequence(a) if i.inst_type == "FwdPass" and i.stage_id == 2]
    assert len(fwd_last) == 2


@settings(max_examples=40, deadline=None)
@given(layers=st.integers(1, 64), data=st.data())
def test_partition_balanced(layers, data):
    n = data.draw(st.integers(1, layers))
    counts = layer_counts(partition(model(layers), n))
    assert sum(counts) == layers
    assert max(counts) - min(counts) <= 1
    assert counts == sorted(counts, reverse=True)


@settings(max_examples=30, deadline=None)
@given(p=st.sampled_from([1, 2, 4, 8]), v=st.integers(1, 3),
       strategy=st.sampled_from(["one-to-one", "circular", "V-shape", "bidirectional"]))
def test_placement_covers_every_stage_once(p, v, strategy):
    n = {"one-to-one": p, "circular": v * p, "V-shape": 2 * p, "bidirectional": p}[strategy]
    graph = partition(model(n), n)
    pl = place(graph, ActorMesh.of(p), strategy)
    listed = [sid for a in pl.mesh.actors for sid in pl.stages_of(a)]
    assert sorted(listed) == sorted(s.stage_id for s in pl.graph.stages)
    assert place(graph, ActorMesh.of(p), strategy) == pl
    for a in pl.mesh.actors:
        positions = [pl.graph.stage(s).position for s in pl.stages_of(a)]
        assert positions == sorted(positions)
