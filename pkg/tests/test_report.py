import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from encoms.energy import EnergyWindow
from encoms.harness import analyze_exports
from encoms.report import FORMATS, parse_report, render_report
from encoms.store import IterationExport, ModeChange


def exports(values, transitions=0):
    out = []
    for i, v in enumerate(values):
        windows = [EnergyWindow(0, 2000, float(v) / 2, 2), EnergyWindow(2000, 4000, float(v) / 2, 2)]
        log = [ModeChange(2000, "Normal", "LowPower", "energy-rise")] * transitions
        out.append(IterationExport(i + 1, "ADAPT" if transitions else "NOADAPT", windows, [], log))
    return out


def report_for(means, n=6, seed=0):
    rng = np.random.default_rng(seed)
    return analyze_exports({f"v{k}": exports(m + rng.normal(0, 0.2, n)) for k, m in enumerate(means)})


def test_single_variant_has_no_matrix():
    r = report_for([10])
    assert len(r.rows) == 1 and r.cells == []
    assert "Pairwise" not in render_report(r)


def test_five_variants_lower_triangle():
    r = report_for([10, 11, 12, 13, 14])
    assert len(r.cells) == 10
    labels = r.labels
    assert all(labels.index(c.column) < labels.index(c.row) for c in r.cells)


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_round_trip(fmt):
    r = report_for([10, 10.1, 20, 5])
    r.transitions[1] = r.transitions[1].__class__("v1", 6, 1.0, {"Normal->LowPower": 6})
    assert parse_report(render_report(r, fmt), fmt) == r


def test_transitions_section_only_when_present():
    r = analyze_exports({"a": exports([10, 11, 12]), "b": exports([10, 11, 12], transitions=2)})
    text = render_report(r)
    assert "Mode transitions" in text and "Normal->LowPower: 6" in text
    assert r.transitions[1].per_iteration_mean == 2.0


def test_unknown_format():
    with pytest.raises(ValueError):
        render_report(report_for([1]), "xml")
    with pytest.raises(ValueError):
        parse_report("", "table-text")
    assert set(FORMATS) == {"table-text", "csv", "json"}


def _matrix_cells(text):
    lines = text.split("Pairwise")[1].split("\n\n")[0].splitlines()[3:]
    return [c for line in lines for c in re.findall(r"(\S+) / (\S+)", line)]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(1, 30), min_size=2, max_size=5), st.integers(0, 1000))
def test_gate_never_violated_in_rendering(means, seed):
    r = report_for(means, seed=seed)
    for c in r.cells:
        assert (c.comparison.dec_percent is not None) <= (c.comparison.p_value < 0.05)
    for dec, p in _matrix_cells(render_report(r)):
        if dec != "--":
            assert float(p) < 0.05
    for fmt in ("csv", "json"):
        back = parse_report(render_report(r, fmt), fmt)
        assert all((c.comparison.dec_percent is None) or c.comparison.p_value < 0.05 for c in back.cells)
