"""Experiment protocol and analysis.

Each iteration starts a fresh simulated target in the scenario's mode, runs
the warmup load, monitors for ``monitor_s`` seconds (adaptation enabled only
for ADAPT), exports the iteration file and discards the target. Analysis turns
a set of export directories into a :class:`~encoms.report.Report`.
"""

from __future__ import annotations

import enum
import fnmatch
import json
import logging
import shutil
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .adaptation import Machine, Mode, load_preset
from .energy import EnergyWindow
from .report import CorrelationRow, PairCell, Report, TransitionSummary, VariantRow
from .stats import ConstantInput, StatsError, descriptive, mann_whitney, pearson
from .store import (IterationExport, SchemaViolation, export_iteration, import_iteration,
                    iteration_files, iteration_filename)
from .targetsim import WORKLOADS, AdaptableStore, ClosedLoop, SimConfig, Variant, WorkloadProfile

log = logging.getLogger(__name__)


class HarnessError(Exception):
    pass


class ProtocolFailure(HarnessError):
    def __init__(self, iteration: int, cause: BaseException):
        super().__init__(f"iteration {iteration} failed: {cause}")
        self.iteration = iteration


class InsufficientIterations(HarnessError):
    pass


class Scenario(str, enum.Enum):
    NOADAPT = "NOADAPT"
    ADAPT = "ADAPT"
    ORIGINAL = "ORIGINAL"


@dataclass
class ExperimentConfig:
    scenario: Scenario = Scenario.NOADAPT
    iterations: int = 30
    warmup_s: int = 20
    monitor_s: int = 100
    workload: WorkloadProfile = WORKLOADS["medium"]
    rule_preset: str = "energy-adapt"
    seed: int = 0
    output_dir: Path = Path("runs")
    # fixed algorithm for a non-adaptive run; None uses the Normal-mode binding
    variant: Variant | None = None
    sim: SimConfig = SimConfig()

    def __post_init__(self):
        self.scenario = Scenario(self.scenario)
        self.output_dir = Path(self.output_dir)
        if self.variant is not None:
            self.variant = Variant(self.variant)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.monitor_s * 1000 < 2 * self.sim.interval_ms:
            raise ValueError("monitor_s must cover at least two sampling intervals")
        if self.warmup_s < 0:
            raise ValueError("warmup_s must be >= 0")
        if self.scenario is Scenario.ADAPT and self.variant is not None:
            raise ValueError("ADAPT runs follow the mode bindings; a fixed variant is not allowed")

    def manifest(self) -> dict:
        return {
            "scenario": self.scenario.value,
            "iterations": self.iterations,
            "warmup_s": self.warmup_s,
            "monitor_s": self.monitor_s,
            "workload": {k: (v.value if isinstance(v, enum.Enum) else v)
                         for k, v in self.workload.__dict__.items()},
            "rule_preset": self.rule_preset,
            "seed": self.seed,
            "variant": self.variant.value if self.variant else None,
            "interval_ms": self.sim.interval_ms,
            "window_ms": self.sim.window_ms,
        }


def _ticks(seconds: int, interval_ms: int) -> int:
    return seconds * 1000 // interval_ms


def run_iteration(config: ExperimentConfig, index: int) -> IterationExport:
    """One warmup + monitor cycle on a fresh target."""
    sim = replace(config.sim, workload=config.workload)
    target = AdaptableStore(sim, seed=[config.seed, index], start_ms=0, mode=Mode.NORMAL,
                            variant=config.variant)
    for _ in range(_ticks(config.warmup_s, sim.interval_ms)):
        target.tick()
    machine = None
    if config.scenario is not Scenario.ORIGINAL:
        machine = Machine(load_preset(config.rule_preset), start_mode=Mode.NORMAL,
                          enabled=config.scenario is Scenario.ADAPT)
    loop = ClosedLoop(target, machine)
    loop.run(_ticks(config.monitor_s, sim.interval_ms) + 1)
    return IterationExport(
        iteration_index=index,
        scenario=config.scenario.value,
        windows=[w for w in loop.windows if isinstance(w, EnergyWindow)],
        resources=[t.resources for t in loop.ticks],
        adaptation_log=[e.to_log() for e in loop.transitions],
    )


def _rotate(output_dir: Path):
    """Move a previous run's files aside so numbering restarts at 1."""
    old = iteration_files(output_dir)
    manifest = output_dir / "manifest.json"
    if not old and not manifest.exists():
        return
    k = 1
    while (output_dir / f"rotated-{k}").exists():
        k += 1
    dest = output_dir / f"rotated-{k}"
    dest.mkdir()
    for p in old + ([manifest] if manifest.exists() else []):
        shutil.move(str(p), dest / p.name)


def _write_manifest(config: ExperimentConfig, completed: int, failed: int | None = None):
    data = {**config.manifest(), "completed": completed, "failed_iteration": failed}
    (config.output_dir / "manifest.json").write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def run_experiment(config: ExperimentConfig) -> Path:
    """Run every iteration sequentially and write ``iteration_NNN.json`` files."""
    config.output_dir.mkdir(parents=True, exist_ok=True)
    _rotate(config.output_dir)
    for i in range(1, config.iterations + 1):
        try:
            export = run_iteration(config, i)
            export_iteration(export, config.output_dir / iteration_filename(i))
        except Exception as exc:
            _write_manifest(config, i - 1, failed=i)
            raise ProtocolFailure(i, exc) from exc
        log.info("iteration %d/%d: %.3f J", i, config.iterations, export.total_joules)
    _write_manifest(config, config.iterations)
    return config.output_dir


# --- analysis -------------------------------------------------------------

def load_exports(directory: str | Path) -> list[IterationExport]:
    files = iteration_files(directory)
    exports = []
    for f in files:
        try:
            exports.append(import_iteration(f))
        except SchemaViolation as exc:
            raise SchemaViolation(f"{f.name}:{exc.field_path}", str(exc)) from None
    return exports


def iteration_energy(export: IterationExport, aggregate: str = "sum") -> float:
    joules = [w.joules for w in export.windows]
    if not joules:
        raise InsufficientIterations(f"iteration {export.iteration_index} has no energy windows")
    if aggregate == "sum":
        return sum(joules)
    if aggregate == "mean":
        return sum(joules) / len(joules)
    raise ValueError(f"unknown aggregate {aggregate!r}")


def window_pairs(exports: Sequence[IterationExport]) -> tuple[list[float], list[float], list[float]]:
    """Per-window (energy, mean CPU %, mean memory MB) triples pooled over iterations."""
    energy, cpu, mem = [], [], []
    for e in exports:
        res = e.resources
        j = 0
        for w in e.windows:
            while j < len(res) and res[j].timestamp_ms < w.t0_ms:
                j += 1
            k = j
            inside = []
            while k < len(res) and res[k].timestamp_ms <= w.t1_ms:
                inside.append(res[k])
                k += 1
            if not inside:
                continue
            energy.append(w.joules)
            cpu.append(sum(r.cpu_percent for r in inside) / len(inside))
            mem.append(sum(r.memory_mb for r in inside) / len(inside))
    return energy, cpu, mem


def _safe_pearson(x, y):
    try:
        return pearson(x, y)
    except (ConstantInput, StatsError):
        return None


def analyze_exports(variants: dict[str, list[IterationExport]], baseline: str | None = None,
                    aggregate: str = "sum") -> Report:
    """Build a report from labelled export lists.

    The baseline is placed first; every later variant is compared against
    each earlier one, the earlier one acting as the reference column.
    """
    if not variants:
        raise InsufficientIterations("no variants to analyze")
    labels = list(variants)
    baseline = baseline or labels[0]
    if baseline not in variants:
        raise HarnessError(f"baseline {baseline!r} is not among {labels}")
    labels.remove(baseline)
    labels.insert(0, baseline)

    totals = {}
    for label in labels:
        exports = variants[label]
        if len(exports) < 3:
            raise InsufficientIterations(f"{label}: {len(exports)} iterations, need at least 3")
        totals[label] = [iteration_energy(e, aggregate) for e in exports]

    report = Report(baseline=baseline)
    for label in labels:
        report.rows.append(VariantRow(label, descriptive(totals[label])))
    for i, row in enumerate(labels):
        for column in labels[:i]:
            report.cells.append(PairCell(row, column, mann_whitney(totals[row], totals[column])))
    for label in labels:
        exports = variants[label]
        energy, cpu, mem = window_pairs(exports)
        ok = len(energy) >= 3
        report.correlations.append(CorrelationRow(
            label, len(energy),
            _safe_pearson(energy, cpu) if ok else None,
            _safe_pearson(energy, mem) if ok else None,
        ))
        pairs = Counter(f"{e.from_mode}->{e.to_mode}" for x in exports for e in x.adaptation_log)
        total = sum(pairs.values())
        report.transitions.append(TransitionSummary(label, total, total / len(exports), dict(sorted(pairs.items()))))
    return report


def analyze(dirs: Sequence[str | Path], baseline: str | None = None, aggregate: str = "sum",
            labels: Sequence[str] | None = None) -> Report:
    """Analyze export directories; each directory is one variant labelled by its name."""
    labels = list(labels) if labels else [Path(d).name for d in dirs]
    if len(set(labels)) != len(labels):
        raise HarnessError(f"variant labels must be unique: {labels}")
    return analyze_exports({label: load_exports(d) for label, d in zip(labels, dirs)}, baseline, aggregate)


# --- external datasets ----------------------------------------------------

@dataclass
class ExternalAdapter:
    """How to read a foreign per-iteration dataset.

    Each file matching ``pattern`` becomes one iteration. Files are JSON
    arrays of records (or objects holding the array under ``records_key``),
    or CSV with a header row. ``energy_field`` holds joules per record;
    ``time_field`` optionally holds a timestamp in ``time_unit``.
    """

    pattern: str = "*.json"
    format: str = "json"
    records_key: str | None = None
    energy_field: str = "energy"
    time_field: str | None = "timestamp"
    time_unit: str = "s"
    interval_ms: int = 2000
    aggregate: str = "mean"
    filters: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "ExternalAdapter":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def _records(path: Path, adapter: ExternalAdapter) -> list[dict]:
    if adapter.format == "csv":
        import csv
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    else:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        rows = data[adapter.records_key] if adapter.records_key else data
    return [r for r in rows if all(str(r.get(k)) == str(v) for k, v in adapter.filters.items())]


def import_external(directory: str | Path, adapter: ExternalAdapter, scenario: str = "EXTERNAL") -> list[IterationExport]:
    scale = {"s": 1000, "ms": 1, "us": 0.001, "ns": 1e-6}[adapter.time_unit]
    files = sorted(p for p in Path(directory).rglob("*") if p.is_file() and fnmatch.fnmatch(p.name, adapter.pattern))
    exports = []
    for index, path in enumerate(files, start=1):
        windows = []
        last_t1 = None
        for k, rec in enumerate(_records(path, adapter)):
            raw = rec.get(adapter.energy_field)
            if raw in (None, ""):
                continue
            if adapter.time_field and rec.get(adapter.time_field) not in (None, ""):
                t0 = int(round(float(rec[adapter.time_field]) * scale))
            else:
                t0 = k * adapter.interval_ms
            if last_t1 is not None and t0 < last_t1:
                t0 = last_t1
            t1 = t0 + adapter.interval_ms
            windows.append(EnergyWindow(t0, t1, max(0.0, float(raw)), 2))
            last_t1 = t1
        if windows:
            exports.append(IterationExport(index, scenario, windows))
    return exports
