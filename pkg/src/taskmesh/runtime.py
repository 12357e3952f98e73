"""Head-node orchestration of a program run.

Workflow: seal the graph, schedule the whole of it at the barrier, seed
the head store with the initial buffer contents, then drive execution
by readiness.  Every task goes through three phases, each applied
atomically at the task boundary:

1. *before* -- the data manager's transfer plan (enter/exit plans for
   data tasks, missing-buffer forwards for compute tasks) is issued as
   events; the task also joins any transfer already in flight for one
   of its buffers to its node;
2. *exec* -- target tasks become an EXECUTE event on their scheduled
   worker, host tasks run the kernel locally on the head;
3. *after* -- write-invalidation deletions from the data manager.

Completions arrive as event callbacks, mark the task complete, and
dispatch every newly ready task, so the number of in-flight tasks is
bounded only by readiness (or by ``max_inflight`` when set).  The first
failed event aborts the run with diagnostics.
"""

from __future__ import annotations

import os
import subprocess
import sys
import threading
import time
from collections import defaultdict
from pathlib import Path

from .config import ExperimentConfig
from .datamgr import Action, ActionKind, DataManager
from .events import (
    EventContext,
    EventType,
    NodeCore,
    OriginEvent,
)
from .graph import Program, Task, TaskGraph, TaskKind, dump_graph, validate
from .kernels import InlineKernelRunner
from .nodes import SimWorld, ThreadedWorkerNode
from .report import RunReport
from .scheduler import CostModel, Schedule, heft_schedule, schedule_to_csv
from .storage import BufferStore
from .trace import Tracer
from .transport import NetModel
from .transport.tcp import await_workers, start_head, start_worker

HEAD_ADDR_ENV = "TASKMESH_HEAD_ADDR"
RANK_ENV = "TASKMESH_RANK"


class RunError(Exception):
    pass


class RunResult:
    def __init__(self, report: RunReport, buffers: dict[int, bytes]):
        self.report = report
        self.buffers = buffers


# ---------------------------------------------------------------------------
# clusters: transport-specific glue shared by the orchestrator


class SimCluster:
    def __init__(self, config: ExperimentConfig, tracer: Tracer):
        model = NetModel(
            latency_us=config.latency_us,
            bandwidth_bpus=config.bandwidth_bpus,
            frame_overhead_us=config.frame_overhead_us,
            seed=config.seed,
        )
        self.world = SimWorld(
            workers=config.nodes,
            channels=config.channels,
            handler_slots=config.handlers or 1,
            model=model,
            rate_ipus=config.sim_rate_ipus,
            tracer=tracer,
        )
        self.config = config
        self.tracer = self.world.tracer
        self.ctx = self.world.context(0)
        self.head_store = self.world.nodes[0].core.store
        self.workers = list(range(1, config.nodes + 1))
        self.startup_us = 0
        self._done = False

    def now_us(self) -> int:
        return self.world.net.now_us

    def post(self, etype: EventType, dst: int, args=None, payload=None) -> OriginEvent:
        return self.ctx.post(etype, dst, args, payload)

    def run_local_kernel(self, task_id, iterations, inputs, writes, on_done) -> None:
        self.world.nodes[0].runner.begin(task_id, iterations, inputs, writes, on_done)

    def charge_scheduling(self, evaluations: int) -> int:
        # deterministic model: one virtual microsecond per EFT evaluation
        self.world.net.advance_to(self.world.net.now_us + evaluations)
        return evaluations

    def signal(self) -> None:
        self._done = True

    def finish_wait(self, predicate, timeout_s: float) -> bool:
        return self.world.run_until(lambda: self._done or predicate())

    def shutdown(self) -> int:
        start = self.now_us()
        pending = [self.post(EventType.EXIT, n) for n in self.workers]
        self.world.run_until(lambda: all(ev.finished for ev in pending))
        return self.now_us() - start

    def busy_by_node(self, orchestrator_busy: dict[int, int]) -> dict[int, int]:
        return {n: self.world.nodes[n].runner.busy_us for n in range(len(self.workers) + 1)}

    def close(self) -> None:
        pass


class TcpCluster:
    def __init__(self, config: ExperimentConfig, tracer: Tracer, bundle_dir: Path | None):
        t0 = time.perf_counter_ns()
        self.config = config
        self.tracer = tracer
        self.head = start_head(config.nodes)
        self.workers = list(range(1, config.nodes + 1))
        self._procs: list[subprocess.Popen] = []
        addr = f"{self.head.addr[0]}:{self.head.addr[1]}"
        for rank in self.workers:
            cmd = [
                sys.executable, "-m", "taskmesh", "worker",
                "--rank", str(rank), "--head", addr,
                "--channels", str(config.channels),
            ]
            if config.handlers:
                cmd += ["--handlers", str(config.handlers)]
            if bundle_dir is not None:
                cmd += ["--trace-dir", str(bundle_dir)]
            env = dict(os.environ, **{RANK_ENV: str(rank), HEAD_ADDR_ENV: addr})
            self._procs.append(subprocess.Popen(cmd, env=env))
        await_workers(self.head, config.nodes, timeout_s=config.timeout_s)
        self.head_store = BufferStore()
        self.ctx = EventContext(0, self.head, config.channels, tracer)
        self._done = threading.Event()
        for rank in self.workers:  # gates are up once every sync returns
            self.ctx.wait(self.ctx.post(EventType.SYNC, rank), timeout_s=config.timeout_s)
        self.startup_us = (time.perf_counter_ns() - t0) // 1000

    def now_us(self) -> int:
        return self.tracer._clock()

    def post(self, etype: EventType, dst: int, args=None, payload=None) -> OriginEvent:
        ev = self.ctx.post(etype, dst, args, payload)
        waiter = threading.Thread(target=self._wait_one, args=(ev,), daemon=True)
        waiter.start()
        return ev

    def _wait_one(self, ev: OriginEvent) -> None:
        from .events import EventFailedError

        try:
            self.ctx.wait(ev, timeout_s=self.config.timeout_s)
        except EventFailedError:
            pass  # the orchestrator's on_done callback observes the failure

    def run_local_kernel(self, task_id, iterations, inputs, writes, on_done) -> None:
        def work():
            outputs, elapsed = InlineKernelRunner().begin(task_id, iterations, inputs, writes, on_done)
            on_done(outputs, elapsed)

        threading.Thread(target=work, daemon=True).start()

    def charge_scheduling(self, evaluations: int) -> int | None:
        return None  # real time is measured by the caller

    def signal(self) -> None:
        self._done.set()

    def finish_wait(self, predicate, timeout_s: float) -> bool:
        deadline = time.monotonic() + timeout_s
        while not predicate():
            if not self._done.wait(timeout=min(0.1, max(0.0, deadline - time.monotonic()))):
                if time.monotonic() >= deadline:
                    return False
            self._done.clear()
        return True

    def shutdown(self) -> int:
        start = time.perf_counter_ns()
        pending = [self.ctx.post(EventType.EXIT, n) for n in self.workers]
        for ev in pending:
            try:
                self.ctx.wait(ev, timeout_s=10.0)
            except Exception:
                pass
        for proc in self._procs:
            try:
                proc.wait(timeout=10.0)
            except subprocess.TimeoutExpired:
                proc.kill()
        self.head.close()
        return (time.perf_counter_ns() - start) // 1000

    def busy_by_node(self, orchestrator_busy: dict[int, int]) -> dict[int, int]:
        return dict(orchestrator_busy)

    def close(self) -> None:
        for proc in self._procs:
            if proc.poll() is None:
                proc.kill()


# ---------------------------------------------------------------------------
# the orchestrator


class Orchestrator:
    def __init__(self, graph: TaskGraph, schedule: Schedule, dm: DataManager,
                 cluster, tracer: Tracer, max_inflight: int = 0):
        self.graph = graph
        self.schedule = schedule
        self.dm = dm
        self.cluster = cluster
        self.tracer = tracer
        self.max_inflight = max_inflight
        self._lock = threading.RLock()
        self.pending_preds = {t.id: len(graph.predecessors[t.id]) for t in graph.tasks}
        self.status = {t.id: "pending" for t in graph.tasks}
        self.inflight_targets = 0
        self.completed = 0
        self.failure: str | None = None
        self.busy_us: dict[int, int] = defaultdict(int)
        self.bytes_moved = 0
        self.events_ok = 0
        # transfers in flight keyed by (buffer, destination node)
        self._xfers: dict[tuple[int, int], set[OriginEvent]] = defaultdict(set)

    # -- public ------------------------------------------------------------

    def start(self) -> None:
        with self._lock:
            self.dispatch_ready()
            self._maybe_finished()

    @property
    def finished(self) -> bool:
        return self.failure is not None or self.completed == len(self.graph.tasks)

    def dispatch_ready(self) -> list[int]:
        """Dispatch every pending task whose predecessors are complete."""
        started = []
        with self._lock:
            for task in self.graph.tasks:
                if self.status[task.id] != "pending" or self.pending_preds[task.id] > 0:
                    continue
                if (self.max_inflight and task.kind is TaskKind.TARGET
                        and self.inflight_targets >= self.max_inflight):
                    continue
                if self.failure is not None:
                    break
                started.append(task.id)
                self._begin(task)
        return started

    # -- per-task state machine ---------------------------------------------

    def _begin(self, task: Task) -> None:
        node = self.schedule.assignment[task.id]
        self.status[task.id] = "dispatched"
        if task.kind is TaskKind.TARGET:
            self.inflight_targets += 1
        self.tracer.task(task.id, "dispatched", node)
        try:
            if task.kind is TaskKind.DATA_ENTER:
                plan = [a for bid, _ in task.deps for a in self.dm.on_enter_data(bid)]
                self._run_plan(task, plan, lambda: self._complete(task))
            elif task.kind is TaskKind.DATA_EXIT:
                plan = [a for bid, _ in task.deps for a in self.dm.on_exit_data(bid, task.release)]
                self._run_plan(task, plan, lambda: self._complete(task))
            elif task.kind is TaskKind.TARGET:
                plan = self.dm.before_execute(task, node)
                self._run_plan(task, plan, lambda: self._start_execute(task, node), join_deps=True)
            else:  # HOST
                plan = self.dm.before_execute(task, 0)
                self._run_plan(task, plan, lambda: self._start_host(task), join_deps=True)
        except Exception as exc:
            self._fail(f"task {task.id}: {exc}")

    def _run_plan(self, task: Task, plan: list[Action], cont, join_deps: bool = False) -> None:
        events: list[OriginEvent] = []
        for action in plan:
            events.extend(self._issue(action))
        if join_deps:
            node = self.schedule.assignment[task.id] if task.kind is TaskKind.TARGET else 0
            for bid, _ in task.deps:
                events.extend(self._xfers.get((bid, node), ()))
        events = list(dict.fromkeys(events))
        if not events:
            cont()
            return
        state = {"left": len(events), "cont": cont}

        def on_event(ev: OriginEvent) -> None:
            with self._lock:
                if ev.state.value == "failed":
                    self._fail(f"task {task.id}: event tag {ev.tag} failed: {ev.error}")
                    return
                self.events_ok += 1
                state["left"] -= 1
                if state["left"] == 0 and self.failure is None:
                    state["cont"]()

        for ev in events:
            ev.on_done(on_event)

    def _start_execute(self, task: Task, node: int) -> None:
        sizes = self._write_sizes(task)
        args = {
            "task": task.id,
            "iterations": task.payload.iterations if task.payload else 0,
            "reads": [b for b, d in task.deps if d.reads],
            "writes": [[b, sizes[b]] for b, d in task.deps if d.writes],
        }
        ev = self.cluster.post(EventType.EXECUTE, node, args)

        def on_exec(ev: OriginEvent) -> None:
            with self._lock:
                if ev.state.value == "failed":
                    self._fail(f"task {task.id}: execution failed: {ev.error}")
                    return
                self.busy_us[node] += int(ev.completion.get("elapsed_us", 0))
                plan = self.dm.after_execute(task, node)
                self._run_plan(task, plan, lambda: self._complete(task))

        ev.on_done(on_exec)

    def _start_host(self, task: Task) -> None:
        sizes = self._write_sizes(task)
        inputs = [(b, self.cluster.head_store.read(b)) for b, d in task.deps if d.reads]
        writes = [(b, sizes[b]) for b, d in task.deps if d.writes]
        iterations = task.payload.iterations if task.payload else 0

        def on_kernel(outputs, elapsed_us) -> None:
            with self._lock:
                for bid, data in outputs:
                    self.cluster.head_store.write(bid, data)
                self.busy_us[0] += int(elapsed_us)
                plan = self.dm.after_execute(task, 0)
                self._run_plan(task, plan, lambda: self._complete(task))

        self.cluster.run_local_kernel(task.id, iterations, inputs, writes, on_kernel)

    def _complete(self, task: Task) -> None:
        self.status[task.id] = "complete"
        if task.kind is TaskKind.TARGET:
            self.inflight_targets -= 1
        self.completed += 1
        self.tracer.task(task.id, "complete", self.schedule.assignment[task.id])
        for succ in self.graph.successors[task.id]:
            self.pending_preds[succ] -= 1
        self.dispatch_ready()
        self._maybe_finished()

    def _maybe_finished(self) -> None:
        if self.finished:
            self.cluster.signal()

    def _fail(self, message: str) -> None:
        if self.failure is None:
            self.failure = message
        self.cluster.signal()

    def _write_sizes(self, task: Task) -> dict[int, int]:
        declared = task.payload.writes if task.payload and task.payload.writes else {}
        return {
            bid: declared.get(bid, self.graph.buffer(bid).size_bytes)
            for bid, d in task.deps
            if d.writes
        }

    # -- plan actions -> events -----------------------------------------------

    def _issue(self, action: Action) -> list[OriginEvent]:
        kind, bid = action.kind, action.buffer
        size = self.graph.buffer(bid).size_bytes
        if kind is ActionKind.ALLOC:
            if action.dst == 0:
                self.cluster.head_store.alloc(bid, size)
                self.tracer.data("alloc", bid, 0, 0)
                return []
            ev = self.cluster.post(EventType.ALLOC_BUFFER, action.dst, {"buffer": bid, "size": size})
            ev.on_done(lambda e, a=action: self._log_action("alloc", a, 0))
            return [ev]
        if kind in (ActionKind.FORWARD, ActionKind.RETRIEVE):
            name = "forward" if kind is ActionKind.FORWARD else "retrieve"
            if action.src == action.dst:
                return []
            if action.src == 0:
                payload = self.cluster.head_store.read(bid)
                ev = self.cluster.post(EventType.SUBMIT_DATA, action.dst,
                                       {"buffer": bid, "size": size}, payload)
                self._track_xfer(bid, action.dst, ev, name, size)
                return [ev]
            if action.dst == 0:
                ev = self.cluster.post(EventType.RETRIEVE_DATA, action.src, {"buffer": bid})

                def land(e: OriginEvent, b=bid) -> None:
                    if e.state.value != "failed" and e.result is not None:
                        self.cluster.head_store.write(b, e.result)

                ev.on_done(land)
                self._track_xfer(bid, 0, ev, name, size)
                return [ev]
            recv = self.cluster.post(EventType.EXCHANGE_DATA, action.dst,
                                     {"buffer": bid, "role": "recv", "src": action.src})
            send = self.cluster.post(EventType.EXCHANGE_DATA, action.src,
                                     {"buffer": bid, "role": "send", "peer": action.dst,
                                      "peer_tag": recv.tag, "peer_channel": recv.channel})
            self._track_xfer(bid, action.dst, recv, name, size)
            return [recv, send]
        if kind is ActionKind.REMOVE:
            ev = self.cluster.post(EventType.DELETE_BUFFER, action.dst, {"buffer": bid})
            ev.on_done(lambda e, a=action: self._log_action("remove", a, 0))
            return [ev]
        raise RunError(f"unhandled action {action}")

    def _track_xfer(self, bid: int, dst: int, ev: OriginEvent, name: str, size: int) -> None:
        key = (bid, dst)
        self._xfers[key].add(ev)

        def settle(e: OriginEvent) -> None:
            with self._lock:
                self._xfers[key].discard(e)
                if e.state.value != "failed":
                    self.bytes_moved += size
                    self.tracer.data(name, bid, self._src_of(e), dst)

        ev.on_done(settle)

    @staticmethod
    def _src_of(ev: OriginEvent) -> int:
        if ev.etype is EventType.SUBMIT_DATA:
            return 0
        if ev.etype is EventType.RETRIEVE_DATA:
            return ev.destination
        return int(ev.args.get("src", ev.destination))

    def _log_action(self, name: str, action: Action, _src: int) -> None:
        self.tracer.data(name, action.buffer, action.src, action.dst)


# ---------------------------------------------------------------------------
# run entry points


def run_program(program: Program, config: ExperimentConfig,
                bundle_dir: str | Path | None = None) -> RunResult:
    graph = program.seal()
    violations = validate(graph)
    if violations:
        raise RunError("invalid program: " + "; ".join(violations))
    if bundle_dir is not None:
        bundle_dir = Path(bundle_dir)
        bundle_dir.mkdir(parents=True, exist_ok=True)

    t_run0 = time.perf_counter_ns()
    tracer = Tracer(lambda: (time.perf_counter_ns() - t_run0) // 1000)
    sim = config.transport == "sim"
    cluster = (SimCluster(config, tracer) if sim
               else TcpCluster(config, tracer, bundle_dir))
    try:
        tracer.marker("run_start")
        cm = CostModel(workers=config.nodes, latency_us=config.latency_us,
                       bandwidth_bpus=config.bandwidth_bpus)
        tracer.marker("graph_sealed")
        t_sched = time.perf_counter_ns()
        schedule = heft_schedule(graph, cm)
        scheduling_us = (time.perf_counter_ns() - t_sched) // 1000
        virtual = cluster.charge_scheduling(schedule.eft_evaluations)
        if virtual is not None:
            scheduling_us = virtual
        tracer.marker("schedule_done")

        for buf in graph.buffers:
            cluster.head_store.write(buf.id, program.initial_content(buf.id))

        dm = DataManager(graph, schedule)
        orch = Orchestrator(graph, schedule, dm, cluster, tracer,
                            max_inflight=config.max_inflight)
        orch.start()
        if not cluster.finish_wait(lambda: orch.finished, config.timeout_s):
            orch.failure = orch.failure or f"run did not finish within {config.timeout_s}s"
        shutdown_us = cluster.shutdown()
        tracer.marker("run_end")
        if orch.failure:
            raise RunError(orch.failure)

        wall_us = cluster.now_us() if sim else (time.perf_counter_ns() - t_run0) // 1000
        report = RunReport(
            transport=config.transport,
            workers=config.nodes,
            seed=config.seed,
            tasks=len(graph.tasks),
            edges=graph.edge_count,
            wall_us=int(wall_us),
            startup_us=int(cluster.startup_us),
            scheduling_us=int(scheduling_us),
            shutdown_us=int(shutdown_us),
            makespan_est_us=int(schedule.makespan),
            bytes_moved=orch.bytes_moved,
            events_notified=cluster.ctx.notified,
            events_completed=cluster.ctx.completed_ok,
            eft_evaluations=schedule.eft_evaluations,
            busy_us=cluster.busy_by_node(orch.busy_us),
        )
        buffers = {b.id: cluster.head_store.read(b.id) for b in graph.buffers
                   if cluster.head_store.has(b.id)}
        if bundle_dir is not None:
            (bundle_dir / "graph.txt").write_text(dump_graph(graph))
            (bundle_dir / "schedule.csv").write_text(schedule_to_csv(schedule))
            (bundle_dir / "report.txt").write_text(report.to_text())
            nodes = range(config.nodes + 1) if sim else [0]
            tracer.write_bundle(bundle_dir, nodes)
        return RunResult(report, buffers)
    finally:
        cluster.close()


def worker_main(rank: int, head_addr: str, channels: int = 8,
                handlers: int | None = None, trace_dir: str | None = None) -> int:
    """Entry point of a spawned worker process; returns its exit code."""
    t0 = time.perf_counter_ns()
    host, _, port = head_addr.partition(":")
    endpoint = start_worker(rank, (host, int(port)))
    tracer = Tracer(lambda: (time.perf_counter_ns() - t0) // 1000)
    core = NodeCore(rank, endpoint, BufferStore(), InlineKernelRunner(), tracer, channels)
    node = ThreadedWorkerNode(core, handlers=handlers)
    node.run()
    if trace_dir:
        Path(trace_dir).mkdir(parents=True, exist_ok=True)
        (Path(trace_dir) / f"events_node{rank}.csv").write_text(tracer.events_csv(rank))
    return 0
