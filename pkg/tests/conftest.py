import pytest

from pipesched import ActorMesh, ModalityConfig, ModelConfig, build_cssr, partition, place, run_schedule


# Canonical 1F1B for p=4, m=8 with unit-cost slots and one slot of cross-actor propagation.
# Written out by hand: warm-up of p-i forwards on actor i, then strict B/F alternation, then cool-down.
GOLDEN_1F1B = {
    0: "F0 F1 F2 F3 .  .  .  B0 F4 B1 F5 B2 F6 B3 F7 B4 .  B5 .  B6 .  B7",
    1: ".  F0 F1 F2 .  .  B0 F3 B1 F4 B2 F5 B3 F6 B4 F7 B5 .  B6 .  B7 .",
    2: ".  .  F0 F1 .  B0 F2 B1 F3 B2 F4 B3 F5 B4 F6 B5 F7 B6 .  B7 .  .",
    3: ".  .  .  F0 B0 F1 B1 F2 B2 F3 B3 F4 B4 F5 B5 F6 B6 F7 B7 .  .  .",
}

GOLDEN_GPIPE = {
    0: "F0 F1 F2 F3 .  .  .  .  .  .  B0 B1 B2 B3",
    1: ".  F0 F1 F2 F3 .  .  .  .  B0 B1 B2 B3 .",
    2: ".  .  F0 F1 F2 F3 .  .  B0 B1 B2 B3 .  .",
    3: ".  .  .  F0 F1 F2 F3 B0 B1 B2 B3 .  .  .",
}


def tokens(grid, actor):
    """A row as ``F3`` / ``B0`` / ``.`` tokens (stage ids omitted; one-to-one rows hold one stage)."""
    return ["." if c is None else f"{c.inst_type[0]}{c.mb}" for c in grid.row(actor)]


def chain_model(num_layers=8, name="text", gbs=1, mbs=1):
    return ModelConfig([ModalityConfig(name, num_layers)], gbs, mbs)


def one_to_one(p, m, num_layers=None):
    """Placement, CSSR pair for a plain p-stage chain."""
    model = chain_model(num_layers or max(p, 1))
    pl = place(partition(model, p), ActorMesh.of(p), "one-to-one")
    return pl, build_cssr(pl, m)


def schedule_1f1b(p, m, **kw):
    _, c = one_to_one(p, m)
    grid = run_schedule(c, {None: ("bwdpass-first", "breadth-first", "breadth-first")},
                        inflight=list(range(p, 0, -1)), **kw)
    return c, grid


@pytest.fixture
def f1b_4x8():
    return schedule_1f1b(4, 8)


# One (number, title, passed, detail) entry per acceptance criterion, printed after the run.
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{num}] {title}: {detail}")
