"""Transfer-plan rules checked against a hand-rolled state-machine oracle."""

import random

import pytest

from taskmesh.datamgr import Action, ActionKind, DataManager, UnregisteredBufferError
from taskmesh.graph import DepDirection, Program, TaskKind, listing_chain_program
from taskmesh.scheduler import CostModel, heft_schedule

IN, OUT, INOUT = DepDirection.IN, DepDirection.OUT, DepDirection.INOUT
ALLOC, FORWARD, RETRIEVE, REMOVE = (
    ActionKind.ALLOC,
    ActionKind.FORWARD,
    ActionKind.RETRIEVE,
    ActionKind.REMOVE,
)


def chain_setup(workers=2):
    graph = listing_chain_program(size_bytes=5000, cost_us=50_000.0).seal()
    cm = CostModel(workers=workers, latency_us=0.0, bandwidth_bpus=1.0)
    schedule = heft_schedule(graph, cm)
    return graph, schedule, DataManager(graph, schedule)


def test_enter_forwards_to_first_user():
    graph, schedule, dm = chain_setup()
    foo_node = schedule.assignment[1]
    plan = dm.on_enter_data(0)
    assert plan == [
        Action(ALLOC, 0, foo_node, foo_node),
        Action(FORWARD, 0, 0, foo_node),
    ]
    assert dm.state(0).locations == {foo_node}
    assert dm.state(0).fresh == foo_node


def test_enter_of_unused_buffer_registers_on_head():
    program = Program()
    program.add_buffer(16)
    b_used = program.add_buffer(16)
    program.add_task(TaskKind.TARGET, [(b_used, INOUT)], 100.0)
    graph = program.seal()
    schedule = heft_schedule(graph, CostModel(workers=2))
    dm = DataManager(graph, schedule)
    plan = dm.on_enter_data(0)
    assert plan == [Action(ALLOC, 0, 0, 0)]
    assert dm.state(0).locations == {0}


def test_enter_targets_only_the_first_users_node():
    # buffer first used by a task on some node among 4: one forward, no
    # other node touched
    program = Program()
    b = program.add_buffer(64)
    program.add_task(TaskKind.DATA_ENTER, [(b, OUT)])
    program.add_task(TaskKind.TARGET, [(b, INOUT)], 100.0)
    graph = program.seal()
    schedule = heft_schedule(graph, CostModel(workers=4))
    dm = DataManager(graph, schedule)
    plan = dm.on_enter_data(b)
    node = schedule.assignment[1]
    forwards = [a for a in plan if a.kind is FORWARD]
    assert forwards == [Action(FORWARD, b, 0, node)]


def test_before_execute_pulls_from_fresh_location_not_head():
    graph, schedule, dm = chain_setup()
    foo, bar = graph.tasks[1], graph.tasks[2]
    dm.on_enter_data(0)
    n_foo = schedule.assignment[foo.id]
    assert dm.before_execute(foo, n_foo) == []  # already present
    dm.after_execute(foo, n_foo)
    # force bar onto a different node to observe the worker-to-worker pull
    other = 1 if n_foo == 2 else 2
    plan = dm.before_execute(bar, other)
    assert plan == [Action(FORWARD, 0, n_foo, other)]


def test_before_execute_empty_when_all_present():
    graph, schedule, dm = chain_setup()
    foo = graph.tasks[1]
    node = schedule.assignment[foo.id]
    dm.on_enter_data(0)
    dm.before_execute(foo, node)
    assert dm.before_execute(foo, node) == []


def test_before_execute_pulls_each_buffer_from_its_own_location():
    program = Program()
    b0, b1, b2 = (program.add_buffer(16) for _ in range(3))
    t = program.add_task(TaskKind.TARGET, [(b0, IN), (b1, IN), (b2, IN)], 100.0)
    graph = program.seal()
    schedule = heft_schedule(graph, CostModel(workers=4))
    dm = DataManager(graph, schedule)
    # place the three buffers on three distinct nodes by hand
    for bid, node in ((b0, 1), (b1, 2), (b2, 3)):
        st = dm.state(bid)
        st.locations = {node}
        st.fresh = node
    plan = dm.before_execute(graph.tasks[t], 4)
    assert plan == [
        Action(FORWARD, b0, 1, 4),
        Action(FORWARD, b1, 2, 4),
        Action(FORWARD, b2, 3, 4),
    ]


def test_after_execute_write_invalidates_other_copies():
    graph, schedule, dm = chain_setup()
    foo = graph.tasks[1]
    dm.on_enter_data(0)
    node = schedule.assignment[foo.id]
    dm.before_execute(foo, node)
    dm.after_execute(foo, node)
    assert dm.state(0).locations == {node}
    assert dm.state(0).fresh == node


def test_after_execute_read_keeps_all_copies():
    program = Program()
    b = program.add_buffer(16)
    program.add_task(TaskKind.TARGET, [(b, OUT)], 100.0)
    t1 = program.add_task(TaskKind.TARGET, [(b, IN)], 100.0)
    graph = program.seal()
    schedule = heft_schedule(graph, CostModel(workers=4))
    dm = DataManager(graph, schedule)
    st = dm.state(b)
    st.locations = {1, 2, 3}
    st.fresh = 1
    plan = dm.after_execute(graph.tasks[t1], 4)
    assert plan == []
    assert dm.state(b).locations == {1, 2, 3, 4}
    assert dm.state(b).fresh == 1


def test_two_successive_writers_leave_single_location():
    program = Program()
    b = program.add_buffer(16)
    t0 = program.add_task(TaskKind.TARGET, [(b, INOUT)], 100.0)
    t1 = program.add_task(TaskKind.TARGET, [(b, INOUT)], 100.0)
    graph = program.seal()
    schedule = heft_schedule(graph, CostModel(workers=2))
    dm = DataManager(graph, schedule)
    dm.before_execute(graph.tasks[t0], 1)
    dm.after_execute(graph.tasks[t0], 1)
    dm.before_execute(graph.tasks[t1], 2)
    plan = dm.after_execute(graph.tasks[t1], 2)
    assert Action(REMOVE, b, 1, 1) in plan
    assert dm.state(b).locations == {2}
    assert dm.state(b).fresh == 2


def test_exit_retrieves_fresh_copy_and_releases_cluster_wide():
    graph, schedule, dm = chain_setup()
    dm.on_enter_data(0)
    foo, bar = graph.tasks[1], graph.tasks[2]
    for t in (foo, bar):
        node = schedule.assignment[t.id]
        dm.before_execute(t, node)
        dm.after_execute(t, node)
    bar_node = schedule.assignment[bar.id]
    plan = dm.on_exit_data(0, release=True)
    assert plan[0] == Action(RETRIEVE, 0, bar_node, 0)
    assert all(a.kind is REMOVE for a in plan[1:])
    assert not dm.state(0).registered
    with pytest.raises(UnregisteredBufferError):
        dm.on_exit_data(0, release=False)


def test_exit_of_head_resident_buffer_is_an_empty_retrieve():
    program = Program()
    b = program.add_buffer(16)
    program.add_task(TaskKind.HOST, [(b, INOUT)], 10.0)
    graph = program.seal()
    schedule = heft_schedule(graph, CostModel(workers=1))
    dm = DataManager(graph, schedule)
    plan = dm.on_exit_data(b, release=False)
    assert [a for a in plan if a.kind is RETRIEVE] == []


def test_exit_without_release_keeps_copies():
    graph, schedule, dm = chain_setup()
    dm.on_enter_data(0)
    foo = graph.tasks[1]
    node = schedule.assignment[foo.id]
    dm.before_execute(foo, node)
    dm.after_execute(foo, node)
    plan = dm.on_exit_data(0, release=False)
    assert plan == [Action(RETRIEVE, 0, node, 0)]
    assert dm.state(0).registered
    assert dm.state(0).locations == {0, node}
    assert dm.state(0).fresh == 0


class _OracleDirectory:
    """Independent location tracker applying the coherence rules directly."""

    def __init__(self, buffers):
        self.loc = {b: {0} for b in buffers}
        self.fresh = {b: 0 for b in buffers}

    def apply(self, action: Action):
        if action.kind is FORWARD:
            assert action.src in self.loc[action.buffer], "forward from a stale node"
            assert action.src == self.fresh[action.buffer]
            self.loc[action.buffer].add(action.dst)
        elif action.kind is RETRIEVE:
            assert action.src == self.fresh[action.buffer]
            self.loc[action.buffer].add(0)
            self.fresh[action.buffer] = 0
        elif action.kind is REMOVE:
            self.loc[action.buffer].discard(action.dst)

    def write(self, buffer, node):
        self.loc[buffer] = {node}
        self.fresh[buffer] = node


def test_randomized_sequences_match_directory_oracle():
    rng = random.Random(31)
    for _ in range(50):
        program = Program()
        nbuf = rng.randint(1, 4)
        bufs = [program.add_buffer(rng.randint(1, 32)) for _ in range(nbuf)]
        tids = []
        for _ in range(rng.randint(1, 12)):
            chosen = rng.sample(bufs, rng.randint(1, nbuf))
            deps = [(b, rng.choice((IN, OUT, INOUT))) for b in sorted(chosen)]
            tids.append(program.add_task(TaskKind.TARGET, deps, 100.0))
        graph = program.seal()
        cm = CostModel(workers=rng.randint(1, 4))
        schedule = heft_schedule(graph, cm)
        dm = DataManager(graph, schedule)
        oracle = _OracleDirectory(bufs)
        for tid in tids:  # serial replay in program order
            task = graph.tasks[tid]
            node = schedule.assignment[tid]
            for action in dm.before_execute(task, node):
                oracle.apply(action)
            for action in dm.after_execute(task, node):
                oracle.apply(action)
            for bid, d in task.deps:
                if d.writes:
                    oracle.write(bid, node)
            for bid, _ in task.deps:
                assert dm.state(bid).fresh == oracle.fresh[bid]
                assert dm.state(bid).locations == oracle.loc[bid]
                if task.direction_of(bid).writes:
                    assert len(dm.state(bid).locations) == 1
