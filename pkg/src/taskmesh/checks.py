"""Offline validators over a run bundle.

A bundle directory holds ``graph.txt``, ``schedule.csv``, ``tasks.csv``,
``data.csv``, and one ``events_node<k>.csv`` per node.  Four invariant
families are re-derived from the files alone:

* **dag-order** -- for every derived edge, the producer's ``complete``
  row precedes the consumer's ``dispatched`` row in the head trace.
* **coherence** -- the data actions replay against an independent
  location directory: every forward/retrieve sources the freshest copy,
  a write leaves exactly one worker copy (the head's silently dropped
  stale copy aside), and buffer content produced on a worker is never
  relayed through the head on its way to another worker.
* **conservation** -- per event tag: one notification at the origin,
  one queued destination half, one terminal state on each side; the
  global counts agree.
* **isolation** -- a tag only ever appears on its origin and its single
  destination node.

Replay interleaving: head rows are merged by ``(ts, family, file row)``
with dispatched < data < complete at equal timestamps, which is exact
for runs with the configured minimum network latency of one
microsecond.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .graph import TaskGraph, load_graph
from .trace import load_data, load_events, load_tasks


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.detail}"


def load_schedule_csv(path: str | Path) -> dict[int, int]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["task_id", "node", "est_us", "eft_us"]
    return {int(r[0]): int(r[1]) for r in rows[1:]}


def check_dag_order(graph: TaskGraph, task_rows) -> CheckResult:
    dispatch_seq: dict[int, int] = {}
    complete_seq: dict[int, int] = {}
    for idx, (_, tid, status, _) in enumerate(task_rows):
        if status == "dispatched":
            dispatch_seq[tid] = idx
        elif status == "complete":
            complete_seq[tid] = idx
    missing = [t.id for t in graph.tasks if t.id not in complete_seq]
    if missing:
        return CheckResult("dag-order", False, f"tasks never completed: {missing[:5]}")
    bad = [
        (u, v)
        for u, v, _ in sorted(graph.edges)
        if complete_seq[u] > dispatch_seq[v]
    ]
    if bad:
        return CheckResult("dag-order", False, f"consumer dispatched before producer completed: {bad[:5]}")
    return CheckResult("dag-order", True, f"{graph.edge_count} edges ordered correctly")


def check_coherence(graph: TaskGraph, assignment: dict[int, int],
                    task_rows, data_rows) -> CheckResult:
    writes_of = {t.id: [b for b, d in t.deps if d.writes] for t in graph.tasks}
    merged = []
    for idx, row in enumerate(task_rows):
        if row[2] == "dispatched":
            merged.append((row[0], 0, idx, "dispatched", row))
        elif row[2] == "complete":
            merged.append((row[0], 2, idx, "complete", row))
    for idx, row in enumerate(data_rows):
        merged.append((row[0], 1, idx, "data", row))
    merged.sort(key=lambda e: (e[0], e[1], e[2]))

    fresh = {b.id: 0 for b in graph.buffers}
    locations = {b.id: {0} for b in graph.buffers}
    worker_written: set[int] = set()
    problems: list[str] = []

    for _, _, _, kind, row in merged:
        if kind == "data":
            _, action, buf, src, dst = row
            if action == "alloc":
                continue
            if action in ("forward", "retrieve"):
                if src != fresh[buf]:
                    problems.append(f"{action} of buffer {buf} from node {src}, fresh at {fresh[buf]}")
                if action == "forward" and src == 0 and buf in worker_written:
                    problems.append(f"buffer {buf} relayed through the head to node {dst}")
                locations[buf].add(dst)
                if action == "retrieve":
                    fresh[buf] = 0
                    worker_written.discard(buf)
            elif action == "remove":
                locations[buf].discard(dst)
        elif kind == "complete":
            _, tid, _, node = row
            for buf in writes_of.get(tid, ()):
                stale_workers = locations[buf] - {node, 0}
                if stale_workers:
                    problems.append(
                        f"task {tid} wrote buffer {buf} but copies remain on {sorted(stale_workers)}"
                    )
                locations[buf] = {node}
                fresh[buf] = node
                if node != 0:
                    worker_written.add(buf)
    if problems:
        return CheckResult("coherence", False, "; ".join(problems[:5]))
    return CheckResult("coherence", True, f"{len(data_rows)} data actions replay cleanly")


def check_conservation(event_rows) -> CheckResult:
    by_tag: dict[int, list] = {}
    for row in event_rows:
        by_tag.setdefault(row[2], []).append(row)
    notified = queued = origin_done = dest_done = 0
    problems: list[str] = []
    for tag, rows in sorted(by_tag.items()):
        origins = {node for _, node, _, _, state in rows if state == "created"}
        if len(origins) != 1:
            problems.append(f"tag {tag}: expected one origin, saw {sorted(origins)}")
            continue
        origin = next(iter(origins))
        n_notified = sum(1 for r in rows if r[4] == "notified")
        n_queued = sum(1 for r in rows if r[4] == "queued")
        n_dest_done = sum(1 for r in rows if r[4] in ("done", "failed") and r[1] != origin)
        n_origin_done = sum(1 for r in rows if r[4] in ("done", "failed") and r[1] == origin)
        if not (n_notified == n_queued == n_dest_done == n_origin_done == 1):
            problems.append(
                f"tag {tag}: notified={n_notified} queued={n_queued} "
                f"dest_done={n_dest_done} origin_done={n_origin_done}"
            )
        notified += n_notified
        queued += n_queued
        dest_done += n_dest_done
        origin_done += n_origin_done
    if problems:
        return CheckResult("conservation", False, "; ".join(problems[:5]))
    return CheckResult(
        "conservation", True,
        f"{notified} notified = {queued} queued = {dest_done} completed = {origin_done} received",
    )


def check_isolation(event_rows) -> CheckResult:
    nodes_by_tag: dict[int, set[int]] = {}
    origin_by_tag: dict[int, int] = {}
    dest_by_tag: dict[int, set[int]] = {}
    for _, node, tag, _, state in event_rows:
        nodes_by_tag.setdefault(tag, set()).add(node)
        if state == "created":
            origin_by_tag[tag] = node
        if state == "queued":
            dest_by_tag.setdefault(tag, set()).add(node)
    problems: list[str] = []
    for tag, nodes in sorted(nodes_by_tag.items()):
        origin = origin_by_tag.get(tag)
        dests = dest_by_tag.get(tag, set())
        if origin is None or len(dests) != 1:
            problems.append(f"tag {tag}: origin={origin} destinations={sorted(dests)}")
            continue
        dest = next(iter(dests))
        if dest == origin or nodes - {origin, dest}:
            problems.append(f"tag {tag}: touched nodes {sorted(nodes)} (origin {origin}, dest {dest})")
    if problems:
        return CheckResult("isolation", False, "; ".join(problems[:5]))
    return CheckResult("isolation", True, f"{len(nodes_by_tag)} tags confined to their two parties")


def check_bundle(directory: str | Path) -> list[CheckResult]:
    directory = Path(directory)
    graph = load_graph((directory / "graph.txt").read_text())
    assignment = load_schedule_csv(directory / "schedule.csv")
    task_rows = load_tasks(directory / "tasks.csv")
    task_rows = [r for r in task_rows if r[1] >= 0]  # drop run markers
    data_rows = load_data(directory / "data.csv")
    event_rows = []
    for path in sorted(directory.glob("events_node*.csv")):
        event_rows.extend(load_events(path))
    return [
        check_dag_order(graph, task_rows),
        check_coherence(graph, assignment, task_rows, data_rows),
        check_conservation(event_rows),
        check_isolation(event_rows),
    ]
