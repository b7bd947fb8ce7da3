"""The monitor scheduler and its HTTP read endpoints.

A poller thread runs one :meth:`MonitorScheduler.tick` per interval: poll
every backend, keep the monitored processes, integrate closed windows,
normalize and append everything to the store. Request handlers only read the
store, so a slow scrape never blocks a read.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence
from urllib.parse import parse_qs, urlsplit

from .energy import (EnergyWindow, GapMarker, IntegratorConfig, RunningMax, WindowIntegrator,
                     aggregate_by_name, normalize)
from .sampling import (Backend, BackendUnavailable, ProcessSelector, ReplayBackend, ResourceSample,
                       ScrapeBackend, ScrapeTarget, SimulatedBackend, SimulatedProcess, constant,
                       monotonic_epoch_clock, poll)
from .store import Metric, SeriesKey, TimeSeriesStore, UnknownSeries

log = logging.getLogger(__name__)

FAR_FUTURE_MS = 2 ** 62


class ServiceError(Exception):
    status = 500


class UnknownProcess(ServiceError):
    status = 404


class InvalidRange(ServiceError):
    status = 400


class BindFailure(ServiceError):
    pass


@dataclass
class BackendSpec:
    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("scrape", "replay", "sim", "target-sim"):
            raise ValueError(f"unknown backend kind {self.kind!r}")


@dataclass
class MonitorConfig:
    targets: list[BackendSpec]
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    listen_address: str = "127.0.0.1:8787"
    monitored_processes: list[ProcessSelector] = field(default_factory=lambda: [ProcessSelector("*")])
    store_path: str | None = None
    client_timeout_ms: int = 500

    def __post_init__(self):
        if not self.targets:
            raise ValueError("at least one monitoring target is required")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MonitorConfig":
        integrator = IntegratorConfig(
            interval_ms=int(d.get("interval_ms", 2000)),
            window_ms=int(d.get("window_ms", d.get("interval_ms", 2000))),
            allow_fast_sampling=bool(d.get("allow_fast_sampling", False)),
        )
        targets = [BackendSpec(t["kind"], {k: v for k, v in t.items() if k != "kind"}) for t in d.get("targets", [])]
        processes = [ProcessSelector.parse(p) for p in d.get("processes", ["*"])]
        return cls(
            targets=targets,
            integrator=integrator,
            listen_address=d.get("listen", "127.0.0.1:8787"),
            monitored_processes=processes,
            store_path=d.get("store"),
            client_timeout_ms=int(d.get("client_timeout_ms", 500)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "MonitorConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def build_backend(spec: BackendSpec, clock: Callable[[], int], integrator: IntegratorConfig,
                  timeout_ms: int = 500) -> Backend:
    o = spec.options
    if spec.kind == "scrape":
        target = ScrapeTarget(
            endpoint_url=o["url"],
            **{k: o[k] for k in ("power_metric_name", "unit_scale", "cpu_metric_name",
                                 "memory_metric_name", "host") if k in o},
        )
        return ScrapeBackend(target, clock, timeout_s=timeout_ms / 1000.0)
    if spec.kind == "replay":
        return ReplayBackend.from_file(o["path"], clock=clock if o.get("realtime") else None,
                                       host=o.get("host", "localhost"))
    if spec.kind == "sim":
        processes = [
            SimulatedProcess(p["name"], int(p["pid"]), constant(float(p["watts"])),
                             constant(float(p["cpu"])) if "cpu" in p else None,
                             constant(float(p["mem_mb"])) if "mem_mb" in p else None)
            for p in o.get("processes", [{"name": "recommender", "pid": 4242, "watts": 10.0}])
        ]
        return SimulatedBackend(processes, clock, integrator.interval_ms, host=o.get("host", "sim"))
    from .targetsim import TargetBackend
    return TargetBackend.from_options(o, clock, integrator.interval_ms)


class _Stream:
    def __init__(self, config: IntegratorConfig):
        self.integrator = WindowIntegrator(config)
        self.tracker = RunningMax()


class MonitorScheduler:
    """Poll, integrate and store. One instance owns all per-stream integration state."""

    def __init__(self, config: MonitorConfig, store: TimeSeriesStore | None = None,
                 clock: Callable[[], int] | None = None, backends: Sequence[Backend] | None = None):
        self.config = config
        self.clock = clock or monotonic_epoch_clock()
        self.store = store if store is not None else TimeSeriesStore(config.store_path)
        if backends is None:
            backends = [build_backend(s, self.clock, config.integrator, config.client_timeout_ms)
                        for s in config.targets]
        self.backends = list(backends)
        self.streams: dict[tuple[str, str], _Stream] = {}
        self._backend_streams: dict[int, set] = defaultdict(set)
        self.health: dict[int, dict] = {i: {"status": "ok", "error": None} for i in range(len(self.backends))}
        self._lock = threading.Lock()

    def _stream(self, host: str, name: str) -> _Stream:
        key = (host, name)
        if key not in self.streams:
            self.streams[key] = _Stream(self.config.integrator)
        return self.streams[key]

    def _append_windows(self, host: str, name: str, stream: _Stream, windows):
        points = []
        for w in windows:
            if isinstance(w, EnergyWindow):
                w = normalize(w, stream.tracker)
            points.append(w)
        if points:
            self.store.append(SeriesKey(host, name, Metric.ENERGY), points)

    def tick(self) -> dict:
        """One poll cycle over all backends. Returns the number of samples and windows ingested."""
        with self._lock:
            summary = {"samples": 0, "windows": 0, "gaps": 0}
            now = self.clock()
            for i, backend in enumerate(self.backends):
                try:
                    power, resources = poll(backend, self.config.monitored_processes)
                except BackendUnavailable as exc:
                    log.warning("backend %d unavailable: %s", i, exc)
                    self.health[i] = {"status": "degraded", "error": str(exc)}
                    for key in self._backend_streams[i]:
                        stream = self.streams[key]
                        gaps = stream.integrator.advance_to(now)
                        self._append_windows(*key, stream, gaps)
                        summary["gaps"] += len(gaps)
                    continue
                self.health[i] = {"status": "ok", "error": None}
                self._ingest(i, power, resources, summary)
            return summary

    def _ingest(self, backend_index: int, power, resources, summary: dict):
        by_stream = defaultdict(list)
        for s in aggregate_by_name(power):
            by_stream[(s.host, s.process_name)].append(s)
        for (host, name), samples in by_stream.items():
            self._backend_streams[backend_index].add((host, name))
            self.store.append(SeriesKey(host, name, Metric.POWER), samples)
            stream = self._stream(host, name)
            windows = []
            for s in samples:
                windows.extend(stream.integrator.push(s))
            self._append_windows(host, name, stream, windows)
            summary["samples"] += len(samples)
            summary["windows"] += sum(isinstance(w, EnergyWindow) for w in windows)
            summary["gaps"] += sum(isinstance(w, GapMarker) for w in windows)
        by_res = defaultdict(dict)
        for r in resources:
            bucket = by_res[(r.host, r.process_name)]
            prev = bucket.get(r.timestamp_ms)
            if prev is not None:
                r = ResourceSample(r.timestamp_ms, min(100.0, prev.cpu_percent + r.cpu_percent),
                                   prev.memory_mb + r.memory_mb, min(prev.process_id, r.process_id),
                                   r.process_name, r.host)
            bucket[r.timestamp_ms] = r
        for (host, name), bucket in by_res.items():
            points = [bucket[t] for t in sorted(bucket)]
            self.store.append(SeriesKey(host, name, Metric.CPU), points)
            self.store.append(SeriesKey(host, name, Metric.MEMORY), points)

    def flush(self):
        """Close open windows as partial windows, e.g. when the monitored process exits."""
        with self._lock:
            for (host, name), stream in self.streams.items():
                self._append_windows(host, name, stream, stream.integrator.flush())

    def healthz(self) -> dict:
        degraded = any(h["status"] != "ok" for h in self.health.values())
        return {
            "status": "degraded" if degraded else "ok",
            "targets": [{"index": i, **h} for i, h in sorted(self.health.items())],
        }


# --- read side: pure functions of the store --------------------------------

def _series_for(store: TimeSeriesStore, process: str, metric: Metric, host: str | None = None):
    keys = [k for k in store.keys() if k.process_name == process and k.metric == metric
            and (host is None or k.host == host)]
    if not keys:
        raise UnknownProcess(f"no {metric.value} series for process {process!r}")
    return sorted(keys, key=lambda k: k.host)


def _check_range(from_ms: int, to_ms: int):
    if from_ms > to_ms:
        raise InvalidRange(f"from_ms {from_ms} > to_ms {to_ms}")


def get_energy(store: TimeSeriesStore, process: str, from_ms: int = 0, to_ms: int = FAR_FUTURE_MS,
               host: str | None = None) -> dict:
    """Sum the windows lying entirely inside ``[from_ms, to_ms)`` and count the gap markers there."""
    _check_range(from_ms, to_ms)
    joules = 0.0
    count = 0
    gaps = 0
    peak = 0.0
    for key in _series_for(store, process, Metric.ENERGY, host):
        for p in store.all_points(key):
            if isinstance(p, EnergyWindow):
                peak = max(peak, p.joules)
        for p in store.query_range(key, from_ms, to_ms):
            if p.t1_ms > to_ms:
                continue
            if isinstance(p, GapMarker):
                gaps += 1
            else:
                joules += p.joules
                count += 1
    return {
        "process": process,
        "from_ms": from_ms,
        "to_ms": to_ms,
        "joules": joules,
        "normalized": joules / peak if peak > 0 else 0.0,
        "window_count": count,
        "gaps": gaps,
    }


def get_resources(store: TimeSeriesStore, process: str, metric: Metric, from_ms: int = 0,
                  to_ms: int = FAR_FUTURE_MS, host: str | None = None) -> dict:
    _check_range(from_ms, to_ms)
    field_name = "cpu_percent" if metric is Metric.CPU else "mem_mb"
    points = []
    for key in _series_for(store, process, metric, host):
        for r in store.query_range(key, from_ms, to_ms):
            points.append({"t_ms": r.timestamp_ms, field_name: r.to_dict()[field_name]})
    points.sort(key=lambda p: p["t_ms"])
    values = [p[field_name] for p in points]
    return {
        "process": process,
        "from_ms": from_ms,
        "to_ms": to_ms,
        "points": points,
        "mean": sum(values) / len(values) if values else None,
    }


def get_latest_power(store: TimeSeriesStore, process: str, host: str | None = None) -> dict:
    latest = None
    for key in _series_for(store, process, Metric.POWER, host):
        try:
            s = store.last(key)
        except UnknownSeries:
            continue
        if latest is None or s.timestamp_ms > latest.timestamp_ms:
            latest = s
    if latest is None:
        raise UnknownProcess(process)
    return {"process": process, "t_ms": latest.timestamp_ms, "power_watts": latest.power_watts,
            "pid": latest.process_id, "host": latest.host}


def _int_param(query: Mapping[str, list[str]], name: str, default: int) -> int:
    raw = query.get(name)
    if not raw:
        return default
    try:
        return int(raw[0])
    except ValueError:
        raise InvalidRange(f"{name} must be an integer") from None


def route(store: TimeSeriesStore, health: Callable[[], dict], target: str) -> tuple[int, dict]:
    """Dispatch a GET request line to ``(status, json_body)``."""
    parts = urlsplit(target)
    query = parse_qs(parts.query)
    path = parts.path.rstrip("/") or "/"
    try:
        if path == "/healthz":
            return 200, health()
        process = (query.get("process") or [None])[0]
        host = (query.get("host") or [None])[0]
        if path not in ("/energy", "/cpu", "/memory", "/power/latest"):
            return 404, {"error": f"no route {path}"}
        if not process:
            return 400, {"error": "missing query parameter 'process'"}
        if path == "/power/latest":
            return 200, get_latest_power(store, process, host)
        from_ms = _int_param(query, "from_ms", 0)
        to_ms = _int_param(query, "to_ms", FAR_FUTURE_MS)
        if path == "/energy":
            return 200, get_energy(store, process, from_ms, to_ms, host)
        metric = Metric.CPU if path == "/cpu" else Metric.MEMORY
        return 200, get_resources(store, process, metric, from_ms, to_ms, host)
    except ServiceError as exc:
        return exc.status, {"error": str(exc)}


def _make_handler(store: TimeSeriesStore, health: Callable[[], dict]):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def do_GET(self):  # noqa: N802
            status, body = route(store, health, self.path)
            payload = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, fmt, *args):
            log.debug("%s - %s", self.address_string(), fmt % args)

    return Handler


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


class MonitorHandle:
    """A running service: HTTP server thread plus the poller thread."""

    def __init__(self, scheduler: MonitorScheduler, server: ThreadingHTTPServer, poll_interval_s: float | None):
        self.scheduler = scheduler
        self.server = server
        self._stop = threading.Event()
        self._threads = [threading.Thread(target=server.serve_forever, name="encoms-http", daemon=True)]
        if poll_interval_s is not None:
            self._threads.append(threading.Thread(target=self._poll_loop, args=(poll_interval_s,),
                                                  name="encoms-poller", daemon=True))
        for t in self._threads:
            t.start()

    @property
    def address(self) -> tuple[str, int]:
        return self.server.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def _poll_loop(self, interval_s: float):
        while not self._stop.is_set():
            try:
                self.scheduler.tick()
            except Exception:  # keep the poller alive; the error shows up in /healthz
                log.exception("monitor tick failed")
            self._stop.wait(interval_s)

    def stop(self):
        self._stop.set()
        self.server.shutdown()
        self.server.server_close()
        for t in self._threads:
            t.join(timeout=5)
        self.scheduler.flush()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def run_monitor(config: MonitorConfig, scheduler: MonitorScheduler | None = None,
                poll: bool = True) -> MonitorHandle:
    """Start polling and serving. ``poll=False`` serves a scheduler driven by the caller."""
    scheduler = scheduler or MonitorScheduler(config)
    host, port = parse_address(config.listen_address)
    try:
        server = ThreadingHTTPServer((host, port), _make_handler(scheduler.store, scheduler.healthz))
    except OSError as exc:
        raise BindFailure(f"cannot listen on {config.listen_address}: {exc}") from exc
    server.daemon_threads = True
    interval = config.integrator.interval_ms / 1000.0 if poll else None
    return MonitorHandle(scheduler, server, interval)
