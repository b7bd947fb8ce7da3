"""Deterministic simulated adaptable store.

The recommender's CPU share follows the execution cost of the active
algorithm times the request rate; power is linear in CPU share. Switching
algorithm costs a one-off training burst. All randomness comes from one seeded
generator that draws the same number of values every tick, so runs that differ
only in mode or variant see identical load noise.
"""

from __future__ import annotations

import enum
import math
import threading
from dataclasses import dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping, Sequence

import numpy as np

from .adaptation import Machine, Mode, Snapshot, TransitionEvent
from .energy import EnergyWindow, IntegratorConfig, RunningMax, WindowIntegrator, normalize
from .sampling import (DEFAULT_CPU_METRIC, DEFAULT_MEMORY_METRIC, Backend, PowerSample, ResourceSample,
                       ScrapeTarget, render_exposition)


class Variant(str, enum.Enum):
    DEACTIVATE = "Deactivate"
    SLOPE_ONE = "SlopeOne"
    ORDER_BASED = "OrderBased"
    POPULARITY = "Popularity"
    PREPROCESSED_SLOPE_ONE = "PreprocessedSlopeOne"


class Phase(str, enum.Enum):
    TRAINING = "training"
    EXECUTION = "execution"


@dataclass(frozen=True)
class CostParams:
    """Dataset sizes for the cost expressions.

    N distinct products, R products per user, U users, I products per user,
    C products in the cart, S order sets per user. The defaults are
    calibration choices.
    """

    N: int = 100
    R: int = 5
    U: int = 50
    I: int = 10  # noqa: E741
    C: int = 3
    S: int = 4

    def __post_init__(self):
        for name in "NRUICS":
            if getattr(self, name) < 1:
                raise ValueError(f"cost parameter {name} must be >= 1")


@dataclass(frozen=True)
class CostModel:
    variant: Variant
    params: CostParams = CostParams()

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))


def cost_units(model: CostModel, phase: Phase | str) -> float:
    """Instantiate the asymptotic training/execution cost of ``model.variant``.

    Logarithms are base 2.
    """
    p = model.params
    phase = Phase(phase)
    v = model.variant
    if v is Variant.DEACTIVATE:
        return 0.0
    nlogn = p.N * math.log2(p.N)
    if phase is Phase.TRAINING:
        return float({
            Variant.SLOPE_ONE: p.U * p.R ** 2,
            Variant.ORDER_BASED: 1,
            Variant.POPULARITY: p.U * p.I,
            Variant.PREPROCESSED_SLOPE_ONE: p.U * p.N * p.R,
        }[v])
    return float({
        Variant.SLOPE_ONE: p.N * p.R,
        Variant.ORDER_BASED: p.C * p.U * p.S * p.I * nlogn,
        Variant.POPULARITY: nlogn,
        Variant.PREPROCESSED_SLOPE_ONE: nlogn,
    }[v])


MODE_VARIANTS: Mapping[Mode, Variant] = {
    Mode.NORMAL: Variant.SLOPE_ONE,
    Mode.HIGH_PERFORMANCE: Variant.PREPROCESSED_SLOPE_ONE,
    Mode.LOW_POWER: Variant.DEACTIVATE,
}


@dataclass(frozen=True)
class PowerModel:
    idle_watts: float = 0.5
    watts_per_cpu_fraction: float = 40.0

    def __post_init__(self):
        if self.idle_watts < 0 or self.watts_per_cpu_fraction <= 0:
            raise ValueError("idle_watts must be >= 0 and watts_per_cpu_fraction > 0")

    def power(self, cpu_fraction: float) -> float:
        return self.idle_watts + self.watts_per_cpu_fraction * cpu_fraction


class Level(str, enum.Enum):
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"


PEAK_PARALLEL = {Level.LOW: 100, Level.MEDIUM: 1000, Level.HIGH: 5000}


@dataclass(frozen=True)
class WorkloadProfile:
    level: Level = Level.MEDIUM
    ramp_seconds: int = 20
    peak_parallel: int = 1000
    increase_per_second: int = 0
    # chance per tick of a request burst multiplying the load by burst_factor
    burst_probability: float = 0.0
    burst_factor: float = 2.5

    def __post_init__(self):
        object.__setattr__(self, "level", Level(self.level))
        if self.peak_parallel < 1:
            raise ValueError("peak_parallel must be >= 1")
        if self.increase_per_second < 0 or self.ramp_seconds < 0:
            raise ValueError("ramp_seconds and increase_per_second must be >= 0")

    @classmethod
    def preset(cls, level: Level | str, **overrides) -> "WorkloadProfile":
        level = Level(level)
        return cls(level=level, peak_parallel=PEAK_PARALLEL[level], **overrides)

    def requests_at(self, t_s: float) -> float:
        """Parallel requests ``t_s`` seconds after load generation started."""
        if t_s < 0:
            return 0.0
        ramp = 1.0 if self.ramp_seconds == 0 else min(1.0, t_s / self.ramp_seconds)
        extra = self.increase_per_second * max(0.0, t_s - self.ramp_seconds)
        return self.peak_parallel * ramp + extra


WORKLOADS = {
    "low": WorkloadProfile.preset(Level.LOW),
    "medium": WorkloadProfile.preset(Level.MEDIUM),
    "high": WorkloadProfile.preset(Level.HIGH),
    # low load growing every second, with occasional user bursts
    "traffic-increase": WorkloadProfile.preset(Level.LOW, increase_per_second=5, burst_probability=0.05),
}


@dataclass(frozen=True)
class SimConfig:
    workload: WorkloadProfile = WorkloadProfile()
    params: CostParams = CostParams()
    power: PowerModel = PowerModel()
    interval_ms: int = 2000
    window_ms: int = 2000
    # None: calibrate so that medium load under SlopeOne uses half the CPU
    capacity: float | None = None
    # None: calibrate so that a PreprocessedSlopeOne retrain bursts to half the CPU
    training_capacity: float | None = None
    jitter: float = 0.05
    memory_base_mb: float = 100.0
    memory_step_mb: float = 4.0
    memory_step_probability: float = 0.1
    bindings: Mapping[Mode, Variant] = field(default_factory=lambda: dict(MODE_VARIANTS))
    process_name: str = "recommender"
    pid: int = 4242
    host: str = "sim"

    def resolved_capacity(self) -> float:
        if self.capacity is not None:
            return self.capacity
        return PEAK_PARALLEL[Level.MEDIUM] * cost_units(CostModel(Variant.SLOPE_ONE, self.params), Phase.EXECUTION) / 0.5

    def resolved_training_capacity(self) -> float:
        if self.training_capacity is not None:
            return self.training_capacity
        return cost_units(CostModel(Variant.PREPROCESSED_SLOPE_ONE, self.params), Phase.TRAINING) / 0.5


@dataclass(frozen=True)
class Tick:
    power: PowerSample
    resources: ResourceSample
    requests: float
    variant: Variant
    cpu_fraction: float
    burst: bool


class AdaptableStore:
    """The simulated target. Each :meth:`tick` emits the sample at the next grid instant."""

    def __init__(self, config: SimConfig = SimConfig(), seed: int | Sequence[int] = 0,
                 start_ms: int = 0, mode: Mode = Mode.NORMAL, variant: Variant | None = None,
                 load_origin_ms: int | None = None):
        self.config = config
        self.start_ms = start_ms
        # workload time is measured from load_origin_ms (defaults to the start)
        self.load_origin_ms = start_ms if load_origin_ms is None else load_origin_ms
        self.rng = np.random.default_rng(seed)
        self.mode = Mode(mode)
        self.variant = Variant(variant) if variant is not None else config.bindings[self.mode]
        self.capacity = config.resolved_capacity()
        self.training_capacity = config.resolved_training_capacity()
        self.memory_mb = config.memory_base_mb
        self._k = 0
        self._pending: tuple[int, Mode] | None = None
        self._burst_due = False

    @property
    def now_ms(self) -> int:
        """Timestamp of the next sample."""
        return self.start_ms + self._k * self.config.interval_ms

    def request_mode(self, mode: Mode, at_ms: int):
        """Switch mode at the first window boundary strictly after ``at_ms``."""
        w = self.config.window_ms
        j = (at_ms - self.start_ms) // w + 1
        self._pending = (self.start_ms + j * w, Mode(mode))

    def _apply_pending(self, t_ms: int):
        if self._pending is None or self._pending[0] > t_ms:
            return
        _, mode = self._pending
        self._pending = None
        variant = self.config.bindings[mode]
        self.mode = mode
        if variant is not self.variant:
            self.variant = variant
            self._burst_due = True

    def tick(self) -> Tick:
        cfg = self.config
        t_ms = self.now_ms
        self._apply_pending(t_ms)
        u_jitter, u_burst, u_mem, u_step = self.rng.random(4).tolist()
        t_s = (t_ms - self.load_origin_ms) / 1000.0
        requests = cfg.workload.requests_at(t_s) * (1.0 + cfg.jitter * (2.0 * u_jitter - 1.0))
        if u_burst < cfg.workload.burst_probability:
            requests *= cfg.workload.burst_factor
        model = CostModel(self.variant, cfg.params)
        cpu = requests * cost_units(model, Phase.EXECUTION) / self.capacity
        burst = self._burst_due
        if burst:
            cpu += cost_units(model, Phase.TRAINING) / self.training_capacity
            self._burst_due = False
        cpu = min(max(cpu, 0.0), 1.0)
        if u_mem < cfg.memory_step_probability:
            self.memory_mb += cfg.memory_step_mb * u_step
        self._k += 1
        return Tick(
            power=PowerSample(t_ms, cfg.power.power(cpu), cfg.pid, cfg.process_name, cfg.host),
            resources=ResourceSample(t_ms, cpu * 100.0, self.memory_mb, cfg.pid, cfg.process_name, cfg.host),
            requests=requests,
            variant=self.variant,
            cpu_fraction=cpu,
            burst=burst,
        )


@dataclass
class SimulationResult:
    ticks: list[Tick]
    windows: list = field(default_factory=list)
    transitions: list[TransitionEvent] = field(default_factory=list)

    @property
    def power(self) -> list[PowerSample]:
        return [t.power for t in self.ticks]

    @property
    def resources(self) -> list[ResourceSample]:
        return [t.resources for t in self.ticks]

    @property
    def requests(self) -> list[tuple[int, float]]:
        return [(t.power.timestamp_ms, t.requests) for t in self.ticks]


def window_snapshot(window: EnergyWindow, resources: Sequence[ResourceSample]) -> Snapshot:
    cpu = [r.cpu_percent for r in resources if window.t0_ms <= r.timestamp_ms <= window.t1_ms]
    metrics = {"energy_joules": window.joules, "cpu_percent": sum(cpu) / len(cpu) if cpu else 0.0}
    if window.normalized is not None:
        metrics["normalized_energy"] = window.normalized
    return Snapshot(window.t1_ms, metrics)


class ClosedLoop:
    """Monitor the target window by window and feed the adaptation machine.

    Transitions are requested on the target and take effect at its next
    window boundary.
    """

    def __init__(self, target: AdaptableStore, machine: Machine | None = None):
        self.target = target
        self.machine = machine
        self.integrator = WindowIntegrator(
            IntegratorConfig(target.config.interval_ms, target.config.window_ms, allow_fast_sampling=True))
        self.tracker = RunningMax()
        self.ticks: list[Tick] = []
        self.windows: list = []
        self.transitions: list[TransitionEvent] = []
        self._resources: list[ResourceSample] = []

    def run(self, n_ticks: int):
        for _ in range(n_ticks):
            tick = self.target.tick()
            self.ticks.append(tick)
            self._resources.append(tick.resources)
            for w in self.integrator.push(tick.power):
                if isinstance(w, EnergyWindow):
                    w = normalize(w, self.tracker)
                    snapshot = window_snapshot(w, self._resources)
                    self._resources = [r for r in self._resources if r.timestamp_ms >= w.t1_ms]
                else:
                    snapshot = Snapshot(w.t1_ms, None)
                self.windows.append(w)
                if self.machine is not None:
                    event = self.machine.observe(snapshot)
                    if event is not None:
                        self.transitions.append(event)
                        self.target.request_mode(event.to_mode, event.t_ms)
        return self


def simulate(duration_s: float, workload: WorkloadProfile = WorkloadProfile(), *,
             schedule: Sequence[tuple[int, Mode]] = (), machine: Machine | None = None,
             config: SimConfig | None = None, seed: int | Sequence[int] = 0,
             mode: Mode = Mode.NORMAL, variant: Variant | None = None,
             start_ms: int = 0) -> SimulationResult:
    """Run the target for ``duration_s`` seconds (inclusive of both end samples).

    ``schedule`` lists ``(t_ms, mode)`` requests applied at the next window
    boundary; ``machine`` closes the loop through the adaptation rules.
    """
    config = config or SimConfig()
    if config.workload != workload:
        config = replace(config, workload=workload)
    target = AdaptableStore(config, seed=seed, start_ms=start_ms, mode=mode, variant=variant)
    n_ticks = int(round(duration_s * 1000 / config.interval_ms)) + 1
    pending = sorted(schedule, key=lambda s: s[0])
    loop = ClosedLoop(target, machine)
    for _ in range(n_ticks):
        while pending and pending[0][0] < target.now_ms:
            at, m = pending.pop(0)
            target.request_mode(m, at)
        loop.run(1)
    return SimulationResult(loop.ticks, loop.windows, loop.transitions)



class TargetBackend(Backend):
    """Runs the simulated target against a clock, as a sampling backend."""

    def __init__(self, target: AdaptableStore, clock):
        self.target = target
        self.clock = clock
        self.host = target.config.host

    @classmethod
    def from_options(cls, options: Mapping, clock, interval_ms: int) -> "TargetBackend":
        workload = WORKLOADS[options.get("workload", "medium")]
        config = SimConfig(workload=workload, interval_ms=interval_ms, window_ms=interval_ms,
                           process_name=options.get("name", "recommender"),
                           pid=int(options.get("pid", 4242)), host=options.get("host", "sim"))
        variant = options.get("variant")
        target = AdaptableStore(config, seed=int(options.get("seed", 0)), start_ms=clock(),
                                mode=Mode(options.get("mode", Mode.NORMAL.value)),
                                variant=Variant(variant) if variant else None)
        return cls(target, clock)

    def fetch(self):
        now = self.clock()
        power, resources = [], []
        while self.target.now_ms <= now:
            tick = self.target.tick()
            power.append(tick.power)
            resources.append(tick.resources)
        return power, resources


def serve_exposition(backend: Backend, address: tuple[str, int] = ("127.0.0.1", 0),
                     target: ScrapeTarget | None = None):
    """Expose the latest samples of ``backend`` at ``GET /metrics`` in text exposition format.

    Returns the started server; its ``server_address`` holds the bound port.
    """
    target = target or ScrapeTarget("", cpu_metric_name=DEFAULT_CPU_METRIC, memory_metric_name=DEFAULT_MEMORY_METRIC)
    latest: dict = {"power": {}, "resources": {}}
    lock = threading.Lock()

    class Handler(BaseHTTPRequestHandler):
        def do_GET(self):  # noqa: N802
            if self.path.split("?")[0] != "/metrics":
                self.send_error(404)
                return
            with lock:
                power, resources = backend.fetch()
                for s in power:
                    latest["power"][s.process_id] = s
                for r in resources:
                    latest["resources"][r.process_id] = r
                body = render_exposition(latest["power"].values(), target, latest["resources"].values(),
                                         with_timestamps=False).encode()
            self.send_response(200)
            self.send_header("Content-Type", "text/plain; version=0.0.4")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, fmt, *args):
            pass

    server = ThreadingHTTPServer(address, Handler)
    threading.Thread(target=server.serve_forever, name="encoms-exporter", daemon=True).start()
    return server
