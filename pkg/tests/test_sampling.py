import json
import logging
import socket

import pytest
from hypothesis import given
from hypothesis import strategies as st

from encoms.sampling import (DEFAULT_CPU_METRIC, DEFAULT_MEMORY_METRIC, BackendUnavailable, MalformedLine,
                             ManualClock, MissingLabel, PowerSample, ProcessSelector, ReplayBackend,
                             ResourceSample, ScrapeBackend, ScrapeTarget, SimulatedBackend, SimulatedProcess,
                             constant, filter_by_process, parse_exposition, parse_resources, poll, read_trace,
                             render_exposition, write_trace)

from oracles import glob_match

TARGET = ScrapeTarget("http://unused/metrics")
FULL = ScrapeTarget("http://unused/metrics", cpu_metric_name=DEFAULT_CPU_METRIC,
                    memory_metric_name=DEFAULT_MEMORY_METRIC)


# --- parse_exposition ------------------------------------------------------

def test_microwatt_line_becomes_watts():
    body = 'scaph_process_power_consumption_microwatts{exe="recommender",pid="4242"} 12500000'
    (s,) = parse_exposition(body, TARGET, scrape_time=1000)
    assert s.power_watts == 12.5
    assert (s.process_id, s.process_name, s.timestamp_ms) == (4242, "recommender", 1000)


def test_comment_only_body():
    assert parse_exposition("# HELP whatever text", TARGET, 0) == []


def test_other_metric_ignored():
    assert parse_exposition('other_metric{pid="1"} 5', TARGET, 0) == []


def test_explicit_timestamp_wins_over_scrape_time():
    body = 'scaph_process_power_consumption_microwatts{exe="a",pid="1"} 1000000 1234'
    assert parse_exposition(body, TARGET, 99)[0].timestamp_ms == 1234


def test_label_escapes_and_order():
    body = 'scaph_process_power_consumption_microwatts{pid="7", exe="we\\"ird\\\\name"} 2e6\n'
    (s,) = parse_exposition(body, TARGET, 0)
    assert s.process_name == 'we"ird\\name' and s.power_watts == 2.0


def test_configurable_metric_and_scale():
    target = ScrapeTarget("x", power_metric_name="node_power_watts", unit_scale=1.0)
    (s,) = parse_exposition('node_power_watts{pid="3",exe="db"} 4.5', target, 0)
    assert s.power_watts == 4.5


def test_malformed_line_reports_line_number():
    body = "# ok\nscaph_process_power_consumption_microwatts{pid=1} 5\n"
    with pytest.raises(MalformedLine) as exc:
        parse_exposition(body, TARGET, 0)
    assert exc.value.line_no == 2


def test_unparseable_value():
    with pytest.raises(MalformedLine):
        parse_exposition('scaph_process_power_consumption_microwatts{pid="1"} abc', TARGET, 0)


def test_missing_pid_label():
    with pytest.raises(MissingLabel):
        parse_exposition('scaph_process_power_consumption_microwatts{exe="a"} 5', TARGET, 0)


def test_duplicate_keeps_last_with_warning(caplog):
    body = ('scaph_process_power_consumption_microwatts{exe="a",pid="1"} 1000000 10\n'
            'scaph_process_power_consumption_microwatts{exe="a",pid="1"} 3000000 10\n')
    with caplog.at_level(logging.WARNING):
        (s,) = parse_exposition(body, TARGET, 0)
    assert s.power_watts == 3.0
    assert "duplicate" in caplog.text


def test_resources_joined_by_pid():
    body = (f'{DEFAULT_CPU_METRIC}{{exe="a",pid="1"}} 42.5\n'
            f'{DEFAULT_MEMORY_METRIC}{{exe="a",pid="1"}} {200 * 1024 * 1024}\n')
    (r,) = parse_resources(body, FULL, 5)
    assert (r.cpu_percent, r.memory_mb, r.timestamp_ms) == (42.5, 200.0, 5)


def test_resources_absent_without_sibling_metrics():
    assert parse_resources(f'{DEFAULT_CPU_METRIC}{{pid="1"}} 3', TARGET, 0) == []


names = st.text(st.characters(min_codepoint=32, max_codepoint=126), min_size=1, max_size=12)


@given(st.lists(st.tuples(st.integers(1, 99999), names, st.floats(0, 1000, allow_nan=False)),
                min_size=1, max_size=10, unique_by=lambda x: x[0]))
def test_render_then_parse_is_identity(rows):
    samples = [PowerSample(1000, w, pid, name) for pid, name, w in rows]
    parsed = parse_exposition(render_exposition(samples, TARGET), TARGET, 0)
    assert [(p.process_id, p.process_name) for p in parsed] == [(s.process_id, s.process_name) for s in samples]
    for p, s in zip(parsed, samples):
        assert abs(p.power_watts - s.power_watts) <= 1e-9


def test_render_resources_round_trip():
    res = [ResourceSample(0, 12.0, 64.0, 9, "svc")]
    body = render_exposition([PowerSample(0, 1.0, 9, "svc")], FULL, res)
    (r,) = parse_resources(body, FULL, 0)
    assert (r.cpu_percent, r.memory_mb) == pytest.approx((12.0, 64.0))


# --- filter_by_process -----------------------------------------------------

def _samples(*specs):
    return [PowerSample(i, 1.0, pid, name) for i, (pid, name) in enumerate(specs)]


def test_filter_by_pid():
    s = _samples((1, "a"), (4242, "b"), (3, "c"))
    assert filter_by_process(s, ProcessSelector(pids=frozenset({4242}))) == [s[1]]


def test_filter_empty():
    assert filter_by_process([], ProcessSelector("*")) == []


def test_filter_glob():
    s = _samples((1, "recommender"), (2, "webui"), (3, "recommender"))
    out = filter_by_process(s, ProcessSelector("recomm*"))
    assert [x.process_name for x in out] == ["recommender", "recommender"]


def test_selector_parse():
    assert ProcessSelector.parse("pid:1,2").pids == frozenset({1, 2})
    assert ProcessSelector.parse("web*").name_pattern == "web*"


@given(st.lists(st.tuples(st.integers(1, 5), st.text("abcr", min_size=1, max_size=6)), max_size=20),
       st.text("abcr*?", min_size=1, max_size=6))
def test_filter_is_subsequence_matching_glob_oracle(specs, pattern):
    s = _samples(*specs)
    out = filter_by_process(s, ProcessSelector(pattern))
    assert out == [x for x in s if glob_match(x.process_name, pattern)]
    it = iter(s)
    assert all(any(o is x for x in it) for o in out)


# --- backends --------------------------------------------------------------

def test_simulated_constant_after_4s():
    clock = ManualClock(0)
    backend = SimulatedBackend([SimulatedProcess("recommender", 4242, constant(10.0))], clock, 2000)
    poll(backend)  # the origin sample
    clock.advance(4000)
    power, _ = poll(backend)
    assert [(p.timestamp_ms, p.power_watts) for p in power] == [(2000, 10.0), (4000, 10.0)]


def test_simulated_unavailable():
    backend = SimulatedBackend([SimulatedProcess("a", 1, constant(1.0))], ManualClock(0))
    backend.available = False
    with pytest.raises(BackendUnavailable):
        poll(backend)


def test_replay_three_sample_trace(tmp_path):
    path = tmp_path / "trace.ndjson"
    recs = [{"t_ms": 0, "w": 1.5, "pid": 7, "name": "svc"},
            {"t_ms": 2000, "w": 2.5, "pid": 7, "name": "svc", "cpu": 10.0, "mem_mb": 50.0},
            {"t_ms": 4000, "w": 3.5, "pid": 7, "name": "svc"}]
    path.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    power, resources = poll(ReplayBackend.from_file(path))
    assert [(p.timestamp_ms, p.power_watts, p.process_id, p.process_name) for p in power] == \
        [(0, 1.5, 7, "svc"), (2000, 2.5, 7, "svc"), (4000, 3.5, 7, "svc")]
    assert [(r.cpu_percent, r.memory_mb) for r in resources] == [(10.0, 50.0)]


def test_replay_with_clock_paces_records():
    clock = ManualClock(0)
    backend = ReplayBackend([PowerSample(t, 1.0, 1, "a") for t in (0, 2000, 4000)], clock=clock)
    assert len(poll(backend)[0]) == 1
    clock.advance(4000)
    assert len(poll(backend)[0]) == 2
    assert poll(backend)[0] == []


def test_trace_round_trip(tmp_path):
    power = [PowerSample(t, 1.0 + t, 3, "x") for t in (0, 2000)]
    res = [ResourceSample(2000, 5.0, 6.0, 3, "x")]
    write_trace(tmp_path / "t.ndjson", power, res)
    p2, r2 = read_trace(tmp_path / "t.ndjson")
    assert p2 == power and [(r.cpu_percent, r.memory_mb) for r in r2] == [(5.0, 6.0)]


def test_malformed_trace(tmp_path):
    (tmp_path / "bad.ndjson").write_text('{"t_ms": 0}\n')
    with pytest.raises(MalformedLine):
        read_trace(tmp_path / "bad.ndjson")


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_scrape_stopped_exporter():
    backend = ScrapeBackend(ScrapeTarget(f"http://127.0.0.1:{_free_port()}/metrics"), timeout_s=0.5)
    with pytest.raises(BackendUnavailable):
        poll(backend)


@given(st.lists(st.integers(0, 20), min_size=1, max_size=15))
def test_successive_polls_strictly_increasing(steps):
    clock = ManualClock(0)
    backend = SimulatedBackend([SimulatedProcess("a", 1, constant(1.0)), SimulatedProcess("b", 2, constant(2.0))],
                               clock, 2000)
    seen = {}
    for step in steps:
        clock.advance(step * 1000)
        for p in poll(backend)[0]:
            assert p.timestamp_ms > seen.get(p.process_id, -1)
            seen[p.process_id] = p.timestamp_ms
