"""Append-only time-series store and the per-iteration JSON export format.

Series live in memory behind a bisect index and, when a path is given, are
mirrored to a JSON-lines file that is flushed and fsynced before an append
returns. Reopening the file replays it.
"""

from __future__ import annotations

import bisect
import enum
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .energy import EnergyWindow, GapMarker
from .sampling import PowerSample, ResourceSample


class StoreError(Exception):
    pass


class OutOfOrderAppend(StoreError):
    pass


class UnknownSeries(StoreError, KeyError):
    pass


class SchemaViolation(StoreError, ValueError):
    def __init__(self, field_path: str, message: str = ""):
        super().__init__(f"{field_path}: {message}" if message else field_path)
        self.field_path = field_path


class Metric(str, enum.Enum):
    POWER = "power"
    ENERGY = "energy"
    CPU = "cpu"
    MEMORY = "memory"


@dataclass(frozen=True)
class SeriesKey:
    host: str
    process_name: str
    metric: Metric

    def __post_init__(self):
        if not self.host or not self.process_name:
            raise ValueError("host and process_name must be non-empty")
        object.__setattr__(self, "metric", Metric(self.metric))

    def to_dict(self) -> dict:
        return {"host": self.host, "process_name": self.process_name, "metric": self.metric.value}


def point_time(point) -> int:
    if isinstance(point, (EnergyWindow, GapMarker)):
        return point.t0_ms
    return point.timestamp_ms


def encode_point(point) -> dict:
    if isinstance(point, EnergyWindow):
        return {"kind": "window", **point.to_dict()}
    if isinstance(point, GapMarker):
        return {"kind": "gap", "t0_ms": point.t0_ms, "t1_ms": point.t1_ms, "sample_count": point.sample_count}
    if isinstance(point, PowerSample):
        return {"kind": "power", "t_ms": point.timestamp_ms, "w": point.power_watts,
                "pid": point.process_id, "name": point.process_name, "host": point.host}
    if isinstance(point, ResourceSample):
        return {"kind": "resource", "t_ms": point.timestamp_ms, "cpu_percent": point.cpu_percent,
                "mem_mb": point.memory_mb, "pid": point.process_id, "name": point.process_name,
                "host": point.host}
    raise TypeError(f"cannot store {type(point).__name__}")


def decode_point(d: dict):
    kind = d["kind"]
    if kind == "window":
        return window_from_dict(d)
    if kind == "gap":
        return GapMarker(d["t0_ms"], d["t1_ms"], d["sample_count"])
    if kind == "power":
        return PowerSample(d["t_ms"], d["w"], d["pid"], d["name"], d["host"])
    if kind == "resource":
        return ResourceSample(d["t_ms"], d["cpu_percent"], d["mem_mb"], d["pid"], d["name"], d["host"])
    raise ValueError(f"unknown point kind {kind!r}")


def window_from_dict(d: dict) -> EnergyWindow:
    return EnergyWindow(
        t0_ms=d["t0_ms"], t1_ms=d["t1_ms"], joules=d["joules"], sample_count=d["sample_count"],
        normalized=d.get("normalized"), partial=d.get("partial", False),
    )


class _Series:
    __slots__ = ("times", "points")

    def __init__(self):
        self.times: list[int] = []
        self.points: list = []


class TimeSeriesStore:
    """Single writer per series, any number of readers."""

    def __init__(self, path: str | Path | None = None, fsync: bool = True):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self._series: dict[SeriesKey, _Series] = {}
        self._lock = threading.RLock()
        self._fh = None
        if self.path is not None:
            if self.path.exists():
                self._replay()
            self._fh = open(self.path, "a", encoding="utf-8")

    def _replay(self):
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                key = SeriesKey(**rec["key"])
                self._add(key, [decode_point(rec["point"])])

    def close(self):
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _validate(self, key: SeriesKey, points: Sequence):
        series = self._series.get(key)
        last = series.times[-1] if series and series.times else None
        for p in points:
            t = point_time(p)
            if last is not None and t <= last:
                raise OutOfOrderAppend(f"{key.process_name}/{key.metric.value}: t={t} not after {last}")
            last = t

    def _add(self, key: SeriesKey, points: Sequence):
        series = self._series.setdefault(key, _Series())
        for p in points:
            series.times.append(point_time(p))
            series.points.append(p)

    def append(self, key: SeriesKey, points: Iterable) -> int:
        """Append points in time order. Returns the number of points acked."""
        points = list(points)
        with self._lock:
            self._validate(key, points)
            if self._fh is not None and points:
                k = key.to_dict()
                self._fh.write("".join(json.dumps({"key": k, "point": encode_point(p)}) + "\n" for p in points))
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            self._add(key, points)
        return len(points)

    def query_range(self, key: SeriesKey, from_ms: int, to_ms: int) -> list:
        """Points with ``from_ms <= t < to_ms`` in time order."""
        if from_ms > to_ms:
            raise ValueError(f"from_ms {from_ms} > to_ms {to_ms}")
        with self._lock:
            series = self._series.get(key)
            if series is None:
                raise UnknownSeries(key)
            lo = bisect.bisect_left(series.times, from_ms)
            hi = bisect.bisect_left(series.times, to_ms)
            return series.points[lo:hi]

    def all_points(self, key: SeriesKey) -> list:
        with self._lock:
            series = self._series.get(key)
            if series is None:
                raise UnknownSeries(key)
            return list(series.points)

    def last(self, key: SeriesKey):
        with self._lock:
            series = self._series.get(key)
            if series is None or not series.points:
                raise UnknownSeries(key)
            return series.points[-1]

    def keys(self) -> list[SeriesKey]:
        with self._lock:
            return list(self._series)

    def has(self, key: SeriesKey) -> bool:
        with self._lock:
            return key in self._series


# --- iteration exports ----------------------------------------------------

@dataclass(frozen=True)
class ModeChange:
    """One entry of an export's adaptation log."""

    t_ms: int
    from_mode: str
    to_mode: str
    rule_id: str

    def to_dict(self) -> dict:
        return {"t_ms": self.t_ms, "from": self.from_mode, "to": self.to_mode, "rule_id": self.rule_id}


@dataclass
class IterationExport:
    iteration_index: int
    scenario: str
    windows: list[EnergyWindow] = field(default_factory=list)
    resources: list[ResourceSample] = field(default_factory=list)
    adaptation_log: list[ModeChange] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iteration_index": self.iteration_index,
            "scenario": self.scenario,
            "windows": [w.to_dict() for w in self.windows],
            "resources": [r.to_dict() for r in self.resources],
            "adaptation_log": [e.to_dict() for e in self.adaptation_log],
        }

    @property
    def total_joules(self) -> float:
        return sum(w.joules for w in self.windows)


def _require(obj: dict, name: str, types, path: str) -> Any:
    if not isinstance(obj, dict):
        raise SchemaViolation(path or "<root>", "expected an object")
    full = f"{path}.{name}" if path else name
    if name not in obj:
        raise SchemaViolation(full, "missing")
    value = obj[name]
    # bool is an int subclass; reject it for numeric fields
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise SchemaViolation(full, f"expected {types}, got bool")
    if not isinstance(value, types):
        raise SchemaViolation(full, f"expected {types}, got {type(value).__name__}")
    return value


def _list(obj: dict, name: str, path: str = "") -> list:
    return _require(obj, name, list, path)


def validate_export(data: Any) -> IterationExport:
    """Build an :class:`IterationExport` from parsed JSON, naming the first bad field."""
    num = (int, float)
    index = _require(data, "iteration_index", int, "")
    if index < 1:
        raise SchemaViolation("iteration_index", "must be >= 1")
    scenario = _require(data, "scenario", str, "")
    windows = []
    for i, w in enumerate(_list(data, "windows")):
        p = f"windows[{i}]"
        t0 = _require(w, "t0_ms", int, p)
        t1 = _require(w, "t1_ms", int, p)
        joules = _require(w, "joules", num, p)
        count = _require(w, "sample_count", int, p)
        normalized = _require(w, "normalized", num, p) if "normalized" in w else None
        partial = _require(w, "partial", bool, p) if "partial" in w else False
        try:
            windows.append(EnergyWindow(t0, t1, joules, count, normalized, partial))
        except ValueError as exc:
            raise SchemaViolation(p, str(exc)) from None
    for i in range(1, len(windows)):
        if windows[i].t0_ms < windows[i - 1].t0_ms:
            raise SchemaViolation(f"windows[{i}].t0_ms", "windows out of order")
    resources = []
    for i, r in enumerate(_list(data, "resources")):
        p = f"resources[{i}]"
        try:
            resources.append(ResourceSample(
                _require(r, "t_ms", int, p), _require(r, "cpu_percent", num, p), _require(r, "mem_mb", num, p)))
        except ValueError as exc:
            if isinstance(exc, SchemaViolation):
                raise
            raise SchemaViolation(p, str(exc)) from None
    log = []
    for i, e in enumerate(_list(data, "adaptation_log")):
        p = f"adaptation_log[{i}]"
        log.append(ModeChange(_require(e, "t_ms", int, p), _require(e, "from", str, p),
                              _require(e, "to", str, p), _require(e, "rule_id", str, p)))
    return IterationExport(index, scenario, windows, resources, log)


def dumps_export(export: IterationExport) -> str:
    return json.dumps(export.to_dict(), indent=2) + "\n"


def export_iteration(export: IterationExport, path: str | Path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / iteration_filename(export.iteration_index)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(dumps_export(export))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def import_iteration(path: str | Path) -> IterationExport:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaViolation("<root>", f"invalid JSON: {exc}") from None
    return validate_export(data)


def iteration_filename(index: int) -> str:
    return f"iteration_{index:03d}.json"


def iteration_files(directory: str | Path) -> list[Path]:
    return sorted(Path(directory).glob("iteration_*.json"))
