"""Power and resource sample acquisition.

Three backends share one polling interface: a metrics-exporter scraper, an
NDJSON trace replayer and a deterministic simulated meter. Samples are
filtered down to the processes of the monitored application by name glob or
PID set.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import math
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

DEFAULT_POWER_METRIC = "scaph_process_power_consumption_microwatts"
DEFAULT_CPU_METRIC = "scaph_process_cpu_usage_percentage"
DEFAULT_MEMORY_METRIC = "scaph_process_memory_virtual_bytes"


class SamplingError(Exception):
    pass


class MalformedLine(SamplingError):
    def __init__(self, line_no: int, line: str = ""):
        super().__init__(f"malformed exposition line {line_no}: {line!r}")
        self.line_no = line_no


class MissingLabel(SamplingError):
    def __init__(self, label: str, line_no: int):
        super().__init__(f"line {line_no}: missing label {label!r}")
        self.label = label
        self.line_no = line_no


class BackendUnavailable(SamplingError):
    pass


@dataclass(frozen=True)
class PowerSample:
    timestamp_ms: int
    power_watts: float
    process_id: int
    process_name: str
    host: str = "localhost"

    def __post_init__(self):
        if not self.power_watts >= 0:
            raise ValueError(f"power_watts must be >= 0, got {self.power_watts}")
        if self.process_id <= 0:
            raise ValueError(f"process_id must be positive, got {self.process_id}")

    @property
    def stream(self) -> tuple[str, int]:
        return (self.host, self.process_id)


@dataclass(frozen=True)
class ResourceSample:
    timestamp_ms: int
    cpu_percent: float
    memory_mb: float
    process_id: int = 0
    process_name: str = ""
    host: str = "localhost"

    def __post_init__(self):
        if not 0.0 <= self.cpu_percent <= 100.0:
            raise ValueError(f"cpu_percent must lie in [0, 100], got {self.cpu_percent}")
        if not self.memory_mb >= 0:
            raise ValueError(f"memory_mb must be >= 0, got {self.memory_mb}")

    def to_dict(self) -> dict:
        return {"t_ms": self.timestamp_ms, "cpu_percent": self.cpu_percent, "mem_mb": self.memory_mb}


@dataclass(frozen=True)
class ScrapeTarget:
    endpoint_url: str
    power_metric_name: str = DEFAULT_POWER_METRIC
    unit_scale: float = 1e-6
    label_keys: Mapping[str, str] = field(default_factory=lambda: {"pid": "pid", "exe": "exe"})
    cpu_metric_name: str | None = None
    memory_metric_name: str | None = None
    # bytes -> MB for the memory sibling metric
    memory_scale: float = 1.0 / (1024 * 1024)
    host: str = "localhost"

    def __post_init__(self):
        if not self.unit_scale > 0:
            raise ValueError("unit_scale must be > 0")


@dataclass(frozen=True)
class ProcessSelector:
    """Matches a process by name glob, by PID, or by either."""

    name_pattern: str | None = None
    pids: frozenset[int] = frozenset()

    def matches(self, process_name: str, process_id: int) -> bool:
        if process_id in self.pids:
            return True
        return self.name_pattern is not None and fnmatch.fnmatchcase(process_name, self.name_pattern)

    @classmethod
    def parse(cls, text: str) -> "ProcessSelector":
        """``pid:1,2,3`` selects PIDs; anything else is a name glob."""
        if text.startswith("pid:"):
            return cls(pids=frozenset(int(p) for p in text[4:].split(",") if p))
        return cls(name_pattern=text)


# --- exposition format ----------------------------------------------------

_NAME = r"[a-zA-Z_:][a-zA-Z0-9_:]*"
_SAMPLE_RE = re.compile(
    rf"^(?P<name>{_NAME})"
    r"(?:\{(?P<labels>(?:[^}\"]|\"(?:[^\"\\]|\\.)*\")*)\})?"
    r"[ \t]+(?P<value>\S+)"
    r"(?:[ \t]+(?P<ts>-?\d+))?[ \t]*$"
)
_LABEL_RE = re.compile(r'\s*([a-zA-Z_][a-zA-Z0-9_]*)\s*=\s*"((?:[^"\\]|\\.)*)"\s*(?:,|$)')
_ESCAPES = {"\\\\": "\\", '\\"': '"', "\\n": "\n"}


def _unescape(value: str) -> str:
    return re.sub(r'\\[\\"n]', lambda m: _ESCAPES[m.group(0)], value)


def _escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def _parse_labels(text: str | None, line_no: int, line: str) -> dict[str, str]:
    if not text:
        return {}
    labels = {}
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _LABEL_RE.match(text, pos)
        if not m:
            raise MalformedLine(line_no, line)
        labels[m.group(1)] = _unescape(m.group(2))
        pos = m.end()
    return labels


def _parse_value(raw: str, line_no: int, line: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise MalformedLine(line_no, line) from None


def iter_exposition(body: str):
    """Yield ``(line_no, name, labels, value, timestamp_ms | None)`` per sample line."""
    for line_no, line in enumerate(body.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        m = _SAMPLE_RE.match(stripped)
        if not m:
            raise MalformedLine(line_no, line)
        labels = _parse_labels(m.group("labels"), line_no, line)
        value = _parse_value(m.group("value"), line_no, line)
        ts = int(m.group("ts")) if m.group("ts") is not None else None
        yield line_no, m.group("name"), labels, value, ts


def _pid_of(labels: Mapping[str, str], target: ScrapeTarget, line_no: int) -> int:
    key = target.label_keys.get("pid", "pid")
    if key not in labels:
        raise MissingLabel(key, line_no)
    try:
        return int(labels[key])
    except ValueError:
        raise MissingLabel(key, line_no) from None


def parse_exposition(body: str, target: ScrapeTarget, scrape_time: int) -> list[PowerSample]:
    """Extract per-process power samples from a text exposition body.

    Lines without an explicit timestamp are stamped with ``scrape_time``
    (milliseconds). Metric names other than ``target.power_metric_name`` are
    skipped.
    """
    samples = []
    exe_key = target.label_keys.get("exe", "exe")
    for line_no, name, labels, value, ts in iter_exposition(body):
        if name != target.power_metric_name:
            continue
        pid = _pid_of(labels, target, line_no)
        if math.isnan(value):
            log.warning("line %d: NaN power value for pid %d skipped", line_no, pid)
            continue
        samples.append(PowerSample(
            timestamp_ms=ts if ts is not None else scrape_time,
            power_watts=value * target.unit_scale,
            process_id=pid,
            process_name=labels.get(exe_key, ""),
            host=target.host,
        ))
    return dedupe(samples)


def parse_resources(body: str, target: ScrapeTarget, scrape_time: int) -> list[ResourceSample]:
    """Join the configured CPU and memory sibling metrics by PID.

    Returns an empty list when neither sibling metric is configured.
    """
    if target.cpu_metric_name is None and target.memory_metric_name is None:
        return []
    exe_key = target.label_keys.get("exe", "exe")
    rows: dict[tuple[int, int], dict] = {}
    for line_no, name, labels, value, ts in iter_exposition(body):
        if name not in (target.cpu_metric_name, target.memory_metric_name):
            continue
        pid = _pid_of(labels, target, line_no)
        t = ts if ts is not None else scrape_time
        row = rows.setdefault((pid, t), {"name": labels.get(exe_key, ""), "cpu": 0.0, "mem": 0.0})
        if name == target.cpu_metric_name:
            row["cpu"] = min(max(value, 0.0), 100.0)
        else:
            row["mem"] = max(value, 0.0) * target.memory_scale
    return [
        ResourceSample(t, row["cpu"], row["mem"], pid, row["name"], target.host)
        for (pid, t), row in rows.items()
    ]


def render_exposition(samples: Iterable[PowerSample], target: ScrapeTarget,
                      resources: Iterable[ResourceSample] = (),
                      with_timestamps: bool = True) -> str:
    """Render samples back into exposition text, the inverse of :func:`parse_exposition`."""
    pid_key = target.label_keys.get("pid", "pid")
    exe_key = target.label_keys.get("exe", "exe")
    lines = [
        f"# HELP {target.power_metric_name} Power consumption of the process.",
        f"# TYPE {target.power_metric_name} gauge",
    ]

    def emit(name, s, value):
        ts = f" {s.timestamp_ms}" if with_timestamps else ""
        lines.append(
            f'{name}{{{exe_key}="{_escape(s.process_name)}",{pid_key}="{s.process_id}"}} {float(value)!r}{ts}'
        )

    for s in samples:
        emit(target.power_metric_name, s, s.power_watts / target.unit_scale)
    for r in resources:
        if target.cpu_metric_name:
            emit(target.cpu_metric_name, r, r.cpu_percent)
        if target.memory_metric_name:
            emit(target.memory_metric_name, r, r.memory_mb / target.memory_scale)
    return "\n".join(lines) + "\n"


def dedupe(samples: Sequence[PowerSample]) -> list[PowerSample]:
    """Keep the last-parsed sample for duplicate (stream, timestamp) pairs."""
    seen: dict[tuple, int] = {}
    out: list[PowerSample] = []
    for s in samples:
        key = (s.host, s.process_id, s.timestamp_ms)
        if key in seen:
            log.warning("duplicate timestamp %d for pid %d; keeping last value", s.timestamp_ms, s.process_id)
            out[seen[key]] = s
        else:
            seen[key] = len(out)
            out.append(s)
    return out


def filter_by_process(samples, selector: ProcessSelector | Sequence[ProcessSelector]):
    """Return the samples that belong to a selected process, order preserved."""
    selectors = [selector] if isinstance(selector, ProcessSelector) else list(selector)
    return [s for s in samples if any(sel.matches(s.process_name, s.process_id) for sel in selectors)]


# --- backends -------------------------------------------------------------

def monotonic_epoch_clock() -> Callable[[], int]:
    """A millisecond clock anchored at wall time but advanced by the monotonic clock.

    Wall-clock steps (NTP, DST) therefore never produce negative intervals.
    """
    wall0 = time.time()
    mono0 = time.monotonic()
    return lambda: int((wall0 + time.monotonic() - mono0) * 1000)


class ManualClock:
    """Deterministic clock for tests and offline replays."""

    def __init__(self, now_ms: int = 0):
        self.now_ms = now_ms

    def __call__(self) -> int:
        return self.now_ms

    def advance(self, ms: int) -> int:
        self.now_ms += ms
        return self.now_ms


class _StreamGuard:
    """Drops samples that would break per-stream timestamp monotonicity across polls."""

    def __init__(self):
        self._last: dict[tuple, int] = {}

    def admit(self, samples):
        out = []
        for s in sorted(samples, key=lambda s: s.timestamp_ms):
            key = (s.host, s.process_id)
            last = self._last.get(key)
            if last is not None and s.timestamp_ms <= last:
                log.warning("dropping stale sample t=%d for pid %d (last %d)", s.timestamp_ms, s.process_id, last)
                continue
            self._last[key] = s.timestamp_ms
            out.append(s)
        return out


class Backend:
    """Base class. ``fetch`` returns new, unfiltered samples since the last call."""

    host = "localhost"

    def fetch(self) -> tuple[list[PowerSample], list[ResourceSample]]:
        raise NotImplementedError


class ScrapeBackend(Backend):
    def __init__(self, target: ScrapeTarget, clock: Callable[[], int] | None = None,
                 timeout_s: float = 0.5):
        self.target = target
        self.host = target.host
        self.clock = clock or monotonic_epoch_clock()
        self.timeout_s = timeout_s
        self._power_guard = _StreamGuard()
        self._resource_guard = _StreamGuard()

    def fetch(self):
        try:
            with urllib.request.urlopen(self.target.endpoint_url, timeout=self.timeout_s) as resp:
                body = resp.read().decode("utf-8")
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise BackendUnavailable(f"{self.target.endpoint_url}: {exc}") from exc
        now = self.clock()
        power = self._power_guard.admit(parse_exposition(body, self.target, now))
        resources = self._resource_guard.admit(parse_resources(body, self.target, now))
        return power, resources


def read_trace(path: str | Path, host: str = "localhost"):
    """Load an NDJSON trace of ``{"t_ms", "w", "pid", "name", "cpu"?, "mem_mb"?}`` records."""
    power, resources = [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                t, pid, name = int(rec["t_ms"]), int(rec["pid"]), str(rec["name"])
                power.append(PowerSample(t, float(rec["w"]), pid, name, host))
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedLine(line_no, line.rstrip()) from exc
            if "cpu" in rec or "mem_mb" in rec:
                resources.append(ResourceSample(t, float(rec.get("cpu", 0.0)), float(rec.get("mem_mb", 0.0)),
                                                pid, name, host))
    return power, resources


def write_trace(path: str | Path, power: Iterable[PowerSample], resources: Iterable[ResourceSample] = ()):
    by_key = {(r.timestamp_ms, r.process_id): r for r in resources}
    with open(path, "w", encoding="utf-8") as fh:
        for s in power:
            rec = {"t_ms": s.timestamp_ms, "w": s.power_watts, "pid": s.process_id, "name": s.process_name}
            r = by_key.get((s.timestamp_ms, s.process_id))
            if r is not None:
                rec["cpu"] = r.cpu_percent
                rec["mem_mb"] = r.memory_mb
            fh.write(json.dumps(rec) + "\n")


class ReplayBackend(Backend):
    """Replays a recorded trace.

    Without a clock the whole trace is returned by the first poll. With a
    clock, each poll returns the records whose timestamp has been reached.
    """

    def __init__(self, power: Sequence[PowerSample], resources: Sequence[ResourceSample] = (),
                 clock: Callable[[], int] | None = None):
        self._power = sorted(power, key=lambda s: s.timestamp_ms)
        self._resources = sorted(resources, key=lambda s: s.timestamp_ms)
        self.clock = clock
        self._pi = 0
        self._ri = 0
        if self._power:
            self.host = self._power[0].host

    @classmethod
    def from_file(cls, path, clock=None, host="localhost"):
        power, resources = read_trace(path, host)
        return cls(power, resources, clock)

    def fetch(self):
        horizon = math.inf if self.clock is None else self.clock()
        pi, ri = self._pi, self._ri
        while pi < len(self._power) and self._power[pi].timestamp_ms <= horizon:
            pi += 1
        while ri < len(self._resources) and self._resources[ri].timestamp_ms <= horizon:
            ri += 1
        power, resources = self._power[self._pi:pi], self._resources[self._ri:ri]
        self._pi, self._ri = pi, ri
        return power, resources


@dataclass
class SimulatedProcess:
    name: str
    pid: int
    power: Callable[[float], float]
    cpu: Callable[[float], float] | None = None
    memory: Callable[[float], float] | None = None


def constant(value: float) -> Callable[[float], float]:
    return lambda t: value


class SimulatedBackend(Backend):
    """Samples analytic per-process profiles on a fixed grid.

    Profiles are functions of seconds since ``start_ms``. Grid points at
    ``start_ms + k * interval_ms`` (k >= 0) are emitted once the clock has
    reached them.
    """

    def __init__(self, processes: Sequence[SimulatedProcess], clock: Callable[[], int],
                 interval_ms: int = 2000, start_ms: int | None = None, host: str = "sim"):
        self.processes = list(processes)
        self.clock = clock
        self.interval_ms = interval_ms
        self.start_ms = clock() if start_ms is None else start_ms
        self.host = host
        self._next_k = 0
        self.available = True

    def fetch(self):
        if not self.available:
            raise BackendUnavailable("simulated exporter stopped")
        now = self.clock()
        power, resources = [], []
        while self.start_ms + self._next_k * self.interval_ms <= now:
            t_ms = self.start_ms + self._next_k * self.interval_ms
            t = (t_ms - self.start_ms) / 1000.0
            for p in self.processes:
                power.append(PowerSample(t_ms, p.power(t), p.pid, p.name, self.host))
                if p.cpu is not None or p.memory is not None:
                    resources.append(ResourceSample(
                        t_ms,
                        p.cpu(t) if p.cpu else 0.0,
                        p.memory(t) if p.memory else 0.0,
                        p.pid, p.name, self.host,
                    ))
            self._next_k += 1
        return power, resources


def poll(backend: Backend, selector: ProcessSelector | Sequence[ProcessSelector] | None = None):
    """Fetch new samples from ``backend`` and keep those of the selected processes.

    Raises :class:`BackendUnavailable` when the backend cannot be reached;
    callers record a gap rather than inventing samples.
    """
    power, resources = backend.fetch()
    if selector is None:
        return list(power), list(resources)
    return filter_by_process(power, selector), filter_by_process(resources, selector)
