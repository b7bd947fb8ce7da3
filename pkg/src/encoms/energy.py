"""Trapezoidal energy integration over fixed windows, with max-normalization."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Sequence

from .sampling import PowerSample

MIN_INTERVAL_MS = 2000


class EnergyError(ValueError):
    pass


class InsufficientSamples(EnergyError):
    pass


class NonMonotonicTimestamps(EnergyError):
    pass


class MixedStreams(EnergyError):
    pass


@dataclass(frozen=True)
class EnergyWindow:
    t0_ms: int
    t1_ms: int
    joules: float
    sample_count: int
    normalized: float | None = None
    partial: bool = False

    def __post_init__(self):
        if self.t1_ms <= self.t0_ms:
            raise ValueError(f"window must have t1 > t0 ({self.t0_ms}, {self.t1_ms})")
        if not self.joules >= 0:
            raise ValueError(f"joules must be >= 0, got {self.joules}")
        if self.sample_count < 2:
            raise ValueError("an energy window needs at least 2 samples")
        if self.normalized is not None and not 0.0 <= self.normalized <= 1.0:
            raise ValueError(f"normalized must lie in [0, 1], got {self.normalized}")

    def to_dict(self) -> dict:
        d = {"t0_ms": self.t0_ms, "t1_ms": self.t1_ms, "joules": self.joules, "sample_count": self.sample_count}
        if self.normalized is not None:
            d["normalized"] = self.normalized
        if self.partial:
            d["partial"] = True
        return d


@dataclass(frozen=True)
class GapMarker:
    """A window that could not be integrated. Distinct from a zero-energy window."""

    t0_ms: int
    t1_ms: int
    sample_count: int = 0

    def to_dict(self) -> dict:
        return {"t0_ms": self.t0_ms, "t1_ms": self.t1_ms, "sample_count": self.sample_count, "gap": True}


@dataclass(frozen=True)
class IntegratorConfig:
    interval_ms: int = 2000
    window_ms: int = 2000
    allow_fast_sampling: bool = False
    # consecutive samples further apart than gap_factor * interval_ms break the stream
    gap_factor: float = 1.5

    def __post_init__(self):
        if self.interval_ms <= 0 or self.window_ms <= 0:
            raise ValueError("interval_ms and window_ms must be positive")
        if self.interval_ms < MIN_INTERVAL_MS and not self.allow_fast_sampling:
            raise ValueError(
                f"interval_ms={self.interval_ms} is below {MIN_INTERVAL_MS} ms; "
                "pass allow_fast_sampling to override"
            )
        if self.window_ms % self.interval_ms:
            raise ValueError("window_ms must be a multiple of interval_ms")

    @property
    def max_spacing_ms(self) -> float:
        return self.gap_factor * self.interval_ms


def trapezoid_joules(samples: Sequence[PowerSample]) -> float:
    total = 0.0
    for a, b in zip(samples, samples[1:]):
        total += (a.power_watts + b.power_watts) / 2.0 * ((b.timestamp_ms - a.timestamp_ms) / 1000.0)
    return total


def _check_stream(samples: Sequence[PowerSample]):
    if len(samples) < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {len(samples)}")
    first = samples[0]
    for a, b in zip(samples, samples[1:]):
        if b.timestamp_ms <= a.timestamp_ms:
            raise NonMonotonicTimestamps(f"timestamp {b.timestamp_ms} does not follow {a.timestamp_ms}")
        if (b.host, b.process_name) != (first.host, first.process_name):
            raise MixedStreams(f"samples from {first.process_name!r} and {b.process_name!r} mixed")


def integrate(samples: Sequence[PowerSample], partial: bool = False) -> EnergyWindow:
    """Energy in joules of one ordered sample stream.

    Each consecutive pair contributes ``(P_i + P_{i+1}) / 2 * dt`` with its own
    ``dt``, so irregular spacing is handled exactly.
    """
    samples = list(samples)
    _check_stream(samples)
    return EnergyWindow(
        t0_ms=samples[0].timestamp_ms,
        t1_ms=samples[-1].timestamp_ms,
        joules=trapezoid_joules(samples),
        sample_count=len(samples),
        partial=partial,
    )


def aggregate_by_name(samples: Iterable[PowerSample]) -> list[PowerSample]:
    """Sum the power of same-named processes sharing a timestamp.

    An application may run as several PIDs; integration is linear, so summing
    first equals summing per-PID energies.
    """
    merged: dict[tuple, PowerSample] = {}
    for s in samples:
        key = (s.host, s.process_name, s.timestamp_ms)
        prev = merged.get(key)
        if prev is None:
            merged[key] = s
        else:
            merged[key] = replace(prev, power_watts=prev.power_watts + s.power_watts,
                                  process_id=min(prev.process_id, s.process_id))
    return sorted(merged.values(), key=lambda s: (s.host, s.process_name, s.timestamp_ms))


class WindowIntegrator:
    """Incremental windowing of one process stream.

    Windows tile ``[origin + k*window_ms, origin + (k+1)*window_ms)``. Every
    trapezoid belongs to the window holding its left sample; the first sample
    at or past a boundary is shared by both neighbours, so window energies sum
    to the integral over the whole span.
    """

    def __init__(self, config: IntegratorConfig, origin_ms: int | None = None):
        self.config = config
        self.origin_ms = origin_ms
        self._k = 0
        self._pending: list[PowerSample] = []

    def _bounds(self, k: int) -> tuple[int, int]:
        w = self.config.window_ms
        return self.origin_ms + k * w, self.origin_ms + (k + 1) * w

    def _close(self, closing: PowerSample | None, partial: bool = False):
        t0, t1 = self._bounds(self._k)
        samples = list(self._pending)
        if closing is not None and (not samples or samples[-1] is not closing):
            samples.append(closing)
        self._k += 1
        self._pending = [closing] if closing is not None else []
        broken = any(b.timestamp_ms - a.timestamp_ms > self.config.max_spacing_ms
                     for a, b in zip(samples, samples[1:]))
        if len(samples) < 2 or broken:
            return GapMarker(t0, t1, len(samples))
        return integrate(samples, partial=partial)

    def push(self, sample: PowerSample) -> list:
        """Feed the next sample; returns the windows it closes."""
        if self.origin_ms is None:
            self.origin_ms = sample.timestamp_ms
        last = self._pending[-1].timestamp_ms if self._pending else self._bounds(self._k)[0] - 1
        if sample.timestamp_ms <= last:
            raise NonMonotonicTimestamps(f"timestamp {sample.timestamp_ms} does not follow {last}")
        out = []
        while sample.timestamp_ms >= self._bounds(self._k)[1]:
            out.append(self._close(sample))
        if not self._pending or self._pending[-1] is not sample:
            self._pending.append(sample)
        return out

    def advance_to(self, now_ms: int) -> list:
        """Close every window that ended at or before ``now_ms`` as a gap (backend outage)."""
        if self.origin_ms is None:
            return []
        out = []
        while self._bounds(self._k)[1] <= now_ms:
            t0, t1 = self._bounds(self._k)
            out.append(GapMarker(t0, t1, len(self._pending)))
            self._k += 1
            self._pending = []
        return out

    def flush(self) -> list:
        """Emit what remains of the open window as a partial window (process ended)."""
        if len(self._pending) < 2:
            self._pending = []
            return []
        return [self._close(None, partial=True)]


def integrate_stream(stream: Iterable[PowerSample], config: IntegratorConfig,
                     origin_ms: int | None = None, flush: bool = False) -> Iterator:
    """Yield an :class:`EnergyWindow` or :class:`GapMarker` per elapsed window."""
    integrator = WindowIntegrator(config, origin_ms)
    for sample in stream:
        yield from integrator.push(sample)
    if flush:
        yield from integrator.flush()


class RunningMax:
    """Largest window energy seen so far for one process."""

    def __init__(self, value: float = 0.0):
        self.value = value

    def update(self, joules: float) -> float:
        if joules > self.value:
            self.value = joules
        return self.value


def normalize(window: EnergyWindow, tracker: RunningMax) -> EnergyWindow:
    peak = tracker.update(window.joules)
    return replace(window, normalized=window.joules / peak if peak > 0 else 0.0)
