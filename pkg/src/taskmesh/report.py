"""Run reports: timing decomposition and volume counters for one run.

Reports serialise to a flat ``key = value`` text file (same grammar as
the experiment config).  Simulator runs fill the timing fields from the
virtual clock and a deterministic scheduling-cost model, so two runs
with the same seed produce byte-identical report files; TCP runs use
real wall-clock measurements.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class RunReport:
    transport: str
    workers: int
    seed: int
    tasks: int
    edges: int
    wall_us: int
    startup_us: int
    scheduling_us: int
    shutdown_us: int
    makespan_est_us: int
    bytes_moved: int
    events_notified: int
    events_completed: int
    eft_evaluations: int
    busy_us: dict[int, int] = field(default_factory=dict)

    @property
    def busy_total_us(self) -> int:
        return sum(self.busy_us.values())

    def overhead_fractions(self) -> dict[str, float]:
        """startup/scheduling/shutdown normalised by total wall time."""
        wall = max(self.wall_us, 1)
        return {
            "startup_frac": self.startup_us / wall,
            "scheduling_frac": self.scheduling_us / wall,
            "shutdown_frac": self.shutdown_us / wall,
        }

    def to_text(self) -> str:
        items: dict[str, object] = {
            "transport": self.transport,
            "workers": self.workers,
            "seed": self.seed,
            "tasks": self.tasks,
            "edges": self.edges,
            "wall_us": self.wall_us,
            "startup_us": self.startup_us,
            "scheduling_us": self.scheduling_us,
            "shutdown_us": self.shutdown_us,
            "makespan_est_us": self.makespan_est_us,
            "bytes_moved": self.bytes_moved,
            "events_notified": self.events_notified,
            "events_completed": self.events_completed,
            "eft_evaluations": self.eft_evaluations,
        }
        for node in sorted(self.busy_us):
            items[f"busy_us.{node}"] = self.busy_us[node]
        for name, value in sorted(self.overhead_fractions().items()):
            items[name] = f"{value:.6f}"
        return "".join(f"{k} = {v}\n" for k, v in sorted(items.items()))

    @classmethod
    def from_text(cls, text: str) -> "RunReport":
        values: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
        busy = {
            int(k.split(".", 1)[1]): int(v)
            for k, v in values.items()
            if k.startswith("busy_us.")
        }
        return cls(
            transport=values["transport"],
            workers=int(values["workers"]),
            seed=int(values["seed"]),
            tasks=int(values["tasks"]),
            edges=int(values["edges"]),
            wall_us=int(values["wall_us"]),
            startup_us=int(values["startup_us"]),
            scheduling_us=int(values["scheduling_us"]),
            shutdown_us=int(values["shutdown_us"]),
            makespan_est_us=int(values["makespan_est_us"]),
            bytes_moved=int(values["bytes_moved"]),
            events_notified=int(values["events_notified"]),
            events_completed=int(values["events_completed"]),
            eft_evaluations=int(values["eft_evaluations"]),
            busy_us=busy,
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())
