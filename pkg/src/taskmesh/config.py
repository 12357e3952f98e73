"""Experiment configuration: a flat ``key = value`` text format.

One assignment per line, ``#`` starts a comment, blank lines are
ignored.  Unknown keys and malformed values are reported with their
line number.  :func:`serialize` emits a canonical form (sorted keys),
and parse -> serialize -> parse is the identity on the parsed value.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

PATTERNS = ("trivial", "stencil1d", "fft", "tree")
TRANSPORTS = ("sim", "tcp")


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    transport: str = "sim"
    nodes: int = 2
    pattern: str = "trivial"
    width: int = 4
    steps: int = 4
    iterations: int = 1_000_000
    ccr: float = 1.0
    repeats: int = 1
    seed: int = 0
    channels: int = 8
    handlers: int = 1
    output: str = "results.csv"
    latency_us: int = 5
    bandwidth_bpus: float = 1.0
    frame_overhead_us: int = 10
    sim_rate_ipus: float = 200.0
    max_inflight: int = 0
    plot: bool = True
    trace_dir: str = ""
    timeout_s: float = 300.0

    def validate(self) -> None:
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"transport must be one of {TRANSPORTS}, got {self.transport!r}")
        if self.pattern not in PATTERNS:
            raise ConfigError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if self.nodes < 1:
            raise ConfigError("nodes must be >= 1")
        if self.width < 1 or self.steps < 1:
            raise ConfigError("width and steps must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.ccr <= 0:
            raise ConfigError("ccr must be positive")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.handlers < 0:
            raise ConfigError("handlers must be >= 0 (0 = auto)")
        if self.latency_us < 1:
            # a strictly positive latency keeps trace timestamps of causally
            # ordered actions distinct, which the offline replay relies on
            raise ConfigError("latency_us must be >= 1")
        if self.frame_overhead_us < 0:
            raise ConfigError("frame overhead must be >= 0")
        if self.bandwidth_bpus <= 0 or self.sim_rate_ipus <= 0:
            raise ConfigError("bandwidth and sim rate must be positive")
        if self.max_inflight < 0:
            raise ConfigError("max_inflight must be >= 0 (0 = unlimited)")


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str, lineno: int):
    ftype = _FIELD_TYPES[key]
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: invalid value {raw!r} for key {key!r}") from None


def parse(text: str) -> ExperimentConfig:
    config = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(config, key, _convert(key, raw, lineno))
    config.validate()
    return config


def parse_file(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text)


def serialize(config: ExperimentConfig) -> str:
    lines = []
    for f in sorted(fields(ExperimentConfig), key=lambda f: f.name):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
