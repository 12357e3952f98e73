"""Run trace recording and the CSV schemas shared by the offline checkers.

Three row families, written as separate files in a run bundle:

* ``events_node<k>.csv`` -- ``ts_us,node,event_tag,etype,state`` -- one
  file per node, every protocol state transition observed on that node;
* ``data.csv`` -- ``ts_us,action,buffer,src,dst`` -- every applied data
  action, logged on the head at completion time;
* ``tasks.csv`` -- ``ts_us,task_id,status,node`` -- task lifecycle plus
  run markers (task_id -1): run_start, graph_sealed, schedule_done,
  run_end.

Timestamps are integer microseconds: virtual time for simulator runs
(byte-identical across replays of the same seed), time since the local
process run start otherwise.
"""

from __future__ import annotations

import csv
import io
import threading
from pathlib import Path
from typing import Callable, Iterable

EVENT_HEADER = ["ts_us", "node", "event_tag", "etype", "state"]
DATA_HEADER = ["ts_us", "action", "buffer", "src", "dst"]
TASK_HEADER = ["ts_us", "task_id", "status", "node"]

MARKER = -1


class Tracer:
    def __init__(self, clock_us: Callable[[], int]):
        self._clock = clock_us
        self._lock = threading.Lock()
        self.event_rows: list[tuple[int, int, int, str, str]] = []
        self.data_rows: list[tuple[int, str, int, int, int]] = []
        self.task_rows: list[tuple[int, int, str, int]] = []

    def event(self, node: int, tag: int, etype, state) -> None:
        name = etype.name.lower() if hasattr(etype, "name") else str(etype)
        sname = state.value if hasattr(state, "value") else str(state)
        with self._lock:
            self.event_rows.append((self._clock(), node, tag, name, sname))

    def data(self, action: str, buffer: int, src: int, dst: int) -> None:
        with self._lock:
            self.data_rows.append((self._clock(), action, buffer, src, dst))

    def task(self, task_id: int, status: str, node: int) -> None:
        with self._lock:
            self.task_rows.append((self._clock(), task_id, status, node))

    def marker(self, name: str) -> None:
        self.task(MARKER, name, 0)

    # -- output ----------------------------------------------------------------

    def events_csv(self, node: int | None = None) -> str:
        rows = [r for r in self.event_rows if node is None or r[1] == node]
        return _render(EVENT_HEADER, rows)

    def data_csv(self) -> str:
        return _render(DATA_HEADER, self.data_rows)

    def tasks_csv(self) -> str:
        return _render(TASK_HEADER, self.task_rows)

    def write_bundle(self, directory: str | Path, nodes: Iterable[int], head: bool = True) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for node in nodes:
            (directory / f"events_node{node}.csv").write_text(self.events_csv(node))
        if head:
            (directory / "data.csv").write_text(self.data_csv())
            (directory / "tasks.csv").write_text(self.tasks_csv())


def _render(header: list[str], rows: list[tuple]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return out.getvalue()


def _load(path: Path, header: list[str]) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != header:
        raise ValueError(f"{path}: expected header {','.join(header)}")
    return rows[1:]


def load_events(path: str | Path) -> list[tuple[int, int, int, str, str]]:
    return [(int(r[0]), int(r[1]), int(r[2]), r[3], r[4]) for r in _load(Path(path), EVENT_HEADER)]


def load_data(path: str | Path) -> list[tuple[int, str, int, int, int]]:
    return [(int(r[0]), r[1], int(r[2]), int(r[3]), int(r[4])) for r in _load(Path(path), DATA_HEADER)]


def load_tasks(path: str | Path) -> list[tuple[int, int, str, int]]:
    return [(int(r[0]), int(r[1]), r[2], int(r[3])) for r in _load(Path(path), TASK_HEADER)]
