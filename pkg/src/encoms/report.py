"""Analysis report model and its text, CSV and JSON renderings.

CSV and JSON parse back into an equal :class:`Report`.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

from .stats import Correlation, PairwiseComparison, StatReport

FORMATS = ("table-text", "csv", "json")


@dataclass(frozen=True)
class VariantRow:
    label: str
    stats: StatReport


@dataclass(frozen=True)
class PairCell:
    """Comparison of ``row`` (tested) against ``column`` (baseline); row comes after column."""

    row: str
    column: str
    comparison: PairwiseComparison


@dataclass(frozen=True)
class CorrelationRow:
    label: str
    n_windows: int
    cpu: Correlation | None
    memory: Correlation | None


@dataclass(frozen=True)
class TransitionSummary:
    label: str
    total: int
    per_iteration_mean: float
    by_pair: dict = field(default_factory=dict)


@dataclass
class Report:
    baseline: str
    rows: list[VariantRow] = field(default_factory=list)
    cells: list[PairCell] = field(default_factory=list)
    correlations: list[CorrelationRow] = field(default_factory=list)
    transitions: list[TransitionSummary] = field(default_factory=list)

    @property
    def labels(self) -> list[str]:
        return [r.label for r in self.rows]

    def cell(self, row: str, column: str) -> PairCell | None:
        for c in self.cells:
            if c.row == row and c.column == column:
                return c
        return None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        def corr(x):
            return None if x is None else Correlation(**x)

        return cls(
            baseline=d["baseline"],
            rows=[VariantRow(r["label"], StatReport(**r["stats"])) for r in d["rows"]],
            cells=[PairCell(c["row"], c["column"], PairwiseComparison(**c["comparison"])) for c in d["cells"]],
            correlations=[CorrelationRow(c["label"], c["n_windows"], corr(c["cpu"]), corr(c["memory"]))
                          for c in d["correlations"]],
            transitions=[TransitionSummary(**t) for t in d["transitions"]],
        )


# --- CSV ------------------------------------------------------------------

CSV_COLUMNS = (
    "section", "label", "column",
    "n", "aec", "std", "rsec", "ci95_half_width", "shapiro_p",
    "u_statistic", "p_value", "dec_percent", "method",
    "n_windows", "cpu_r", "cpu_p", "mem_r", "mem_p",
    "total", "per_iteration_mean", "by_pair",
)
_INT_FIELDS = {"n", "n_windows", "total"}
_STR_FIELDS = {"section", "label", "column", "method", "by_pair"}


def _cell_text(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _to_csv(report: Report) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()

    def emit(**row):
        writer.writerow({k: _cell_text(row.get(k)) for k in CSV_COLUMNS})

    emit(section="meta", label=report.baseline)
    for r in report.rows:
        emit(section="descriptive", label=r.label, **asdict(r.stats))
    for c in report.cells:
        emit(section="pairwise", label=c.row, column=c.column, **asdict(c.comparison))
    for c in report.correlations:
        emit(section="correlation", label=c.label, n_windows=c.n_windows,
             cpu_r=c.cpu.r if c.cpu else None, cpu_p=c.cpu.p_value if c.cpu else None,
             mem_r=c.memory.r if c.memory else None, mem_p=c.memory.p_value if c.memory else None)
    for t in report.transitions:
        emit(section="transitions", label=t.label, total=t.total, per_iteration_mean=t.per_iteration_mean,
             by_pair=json.dumps(t.by_pair, sort_keys=True))
    return buf.getvalue()


def _from_csv(text: str) -> Report:
    def typed(row):
        out = {}
        for k, v in row.items():
            if k in _STR_FIELDS:
                out[k] = v
            elif v == "":
                out[k] = None
            elif k in _INT_FIELDS:
                out[k] = int(v)
            else:
                out[k] = float(v)
        return out

    report = None
    for raw in csv.DictReader(io.StringIO(text)):
        row = typed(raw)
        section = row["section"]
        if section == "meta":
            report = Report(baseline=row["label"])
        elif section == "descriptive":
            report.rows.append(VariantRow(row["label"], StatReport(
                n=row["n"], aec=row["aec"], std=row["std"], rsec=row["rsec"],
                ci95_half_width=row["ci95_half_width"], shapiro_p=row["shapiro_p"])))
        elif section == "pairwise":
            report.cells.append(PairCell(row["label"], row["column"], PairwiseComparison(
                u_statistic=row["u_statistic"], p_value=row["p_value"], dec_percent=row["dec_percent"],
                method=row["method"])))
        elif section == "correlation":
            cpu = Correlation(row["cpu_r"], row["cpu_p"]) if row["cpu_r"] is not None else None
            mem = Correlation(row["mem_r"], row["mem_p"]) if row["mem_r"] is not None else None
            report.correlations.append(CorrelationRow(row["label"], row["n_windows"], cpu, mem))
        elif section == "transitions":
            report.transitions.append(TransitionSummary(row["label"], row["total"], row["per_iteration_mean"],
                                                        json.loads(row["by_pair"])))
        else:
            raise ValueError(f"unknown report section {section!r}")
    if report is None:
        raise ValueError("report CSV has no meta row")
    return report


# --- text -----------------------------------------------------------------

def _fmt(value, spec: str = ".2f") -> str:
    return "--" if value is None else format(value, spec)


def _fmt_p(p: float | None) -> str:
    if p is None:
        return "--"
    return f"{p:.2g}" if p < 0.01 else f"{p:.3f}"


def _table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    out = [line, "  ".join("-" * w for w in widths)]
    out += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(out)


def _to_text(report: Report) -> str:
    parts = [f"Baseline: {report.baseline}", ""]
    parts.append(_table(
        ["variant", "n", "AEC (J)", "CI95", "STD", "RSEC", "Shapiro p"],
        [[r.label, str(r.stats.n), _fmt(r.stats.aec), _fmt(r.stats.ci95_half_width), _fmt(r.stats.std),
          _fmt(r.stats.rsec, ".3f"), _fmt_p(r.stats.shapiro_p)] for r in report.rows],
    ))
    labels = report.labels
    if len(labels) > 1:
        parts += ["", "Pairwise Wilcoxon-Mann-Whitney (row vs column): %DEC / p-value"]
        matrix = []
        for i, row in enumerate(labels):
            line = [row]
            for col in labels[:-1]:
                c = report.cell(row, col) if labels.index(col) < i else None
                if c is None:
                    line.append("")
                else:
                    dec = "--" if c.comparison.dec_percent is None else f"{c.comparison.dec_percent:+.0f}"
                    line.append(f"{dec} / {_fmt_p(c.comparison.p_value)}")
            matrix.append(line)
        parts.append(_table(["variant", *labels[:-1]], matrix))
    if report.correlations:
        parts += ["", "Pearson correlation of window energy with CPU and memory"]
        parts.append(_table(
            ["variant", "windows", "CPU r", "CPU p", "memory r", "memory p"],
            [[c.label, str(c.n_windows),
              _fmt(c.cpu.r if c.cpu else None, ".3f"), _fmt_p(c.cpu.p_value if c.cpu else None),
              _fmt(c.memory.r if c.memory else None, ".3f"), _fmt_p(c.memory.p_value if c.memory else None)]
             for c in report.correlations],
        ))
    if any(t.total for t in report.transitions):
        parts += ["", "Mode transitions"]
        parts.append(_table(
            ["variant", "total", "per iteration", "by transition"],
            [[t.label, str(t.total), f"{t.per_iteration_mean:.2f}",
              ", ".join(f"{k}: {v}" for k, v in sorted(t.by_pair.items())) or "--"]
             for t in report.transitions],
        ))
    return "\n".join(parts) + "\n"


def render_report(report: Report, fmt: str = "table-text") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2) + "\n"
    if fmt == "csv":
        return _to_csv(report)
    if fmt == "table-text":
        return _to_text(report)
    raise ValueError(f"unknown report format {fmt!r}; choose from {', '.join(FORMATS)}")


def parse_report(text: str, fmt: str) -> Report:
    if fmt == "json":
        return Report.from_dict(json.loads(text))
    if fmt == "csv":
        return _from_csv(text)
    raise ValueError(f"cannot parse {fmt!r} reports")
