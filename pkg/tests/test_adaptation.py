import json
from unittest import mock

import pytest
from hypothesis import given
from hypothesis import strategies as st

from encoms import adaptation
from encoms.adaptation import (AdaptationError, AdaptationRule, Condition, Machine, MachineState, MissingReference,
                               Mode, Operator, Reference, Snapshot, TransitionEvent, evaluate, load_preset,
                               load_rules, observe_loop, preset_names, rule_from_dict, step)


def energy_trace(values, t0=0, dt=2000):
    return [Snapshot(t0 + dt * (i + 1), {"energy_joules": v}) for i, v in enumerate(values)]


def cpu_trace(values, dt=2000):
    return [Snapshot(dt * (i + 1), {"cpu_percent": v}) for i, v in enumerate(values)]


def run(values, preset="energy-adapt", trace=energy_trace, **kw):
    machine = Machine(load_preset(preset), **kw)
    return list(observe_loop(trace(values), machine)), machine


# --- evaluate --------------------------------------------------------------

def test_between_two_bounds():
    c = Condition("cpu_percent", Operator.BETWEEN_TWO_BOUNDS, 1, 10)
    assert evaluate(c, 5)
    assert not evaluate(c, 1) and not evaluate(c, 10)


def test_greater_than_cpu_rule():
    assert evaluate(Condition("cpu_percent", Operator.GREATER_THAN, 50), 60)
    assert not evaluate(Condition("cpu_percent", Operator.GREATER_THAN, 50), 50)


def test_less_than():
    assert evaluate(Condition("cpu_percent", Operator.LESS_THAN, 50), 40)


def test_relative_increase():
    c = Condition("energy_joules", Operator.RELATIVE_INCREASE_AT_LEAST, 0.5, reference=Reference.PREVIOUS_WINDOW)
    assert evaluate(c, 16, previous=10)
    assert evaluate(c, 15, previous=10)
    assert not evaluate(c, 12, previous=10)


def test_relative_decrease_against_escalation_reference():
    c = Condition("energy_joules", Operator.RELATIVE_DECREASE_AT_LEAST, 0.5,
                  reference=Reference.ESCALATION_REFERENCE)
    assert evaluate(c, 7, reference=16)
    assert evaluate(c, 8, reference=16)
    assert not evaluate(c, 9, reference=16)


def test_missing_reference():
    c = Condition("energy_joules", Operator.RELATIVE_INCREASE_AT_LEAST, 0.5, reference=Reference.PREVIOUS_WINDOW)
    with pytest.raises(MissingReference):
        evaluate(c, 1.0)


@pytest.mark.parametrize("kwargs", [
    dict(metric="latency", operator=Operator.GREATER_THAN, threshold=1),
    dict(metric="cpu_percent", operator=Operator.BETWEEN_TWO_BOUNDS, threshold=5, upper=1),
    dict(metric="cpu_percent", operator=Operator.BETWEEN_TWO_BOUNDS, threshold=5),
    dict(metric="energy_joules", operator=Operator.RELATIVE_INCREASE_AT_LEAST, threshold=0.5),
])
def test_invalid_conditions(kwargs):
    with pytest.raises(AdaptationError):
        Condition(**kwargs)


def test_rule_validation():
    cond = Condition("cpu_percent", Operator.GREATER_THAN, 50)
    with pytest.raises(AdaptationError):
        AdaptationRule("x", cond, {Mode.NORMAL}, Mode.NORMAL)
    with pytest.raises(AdaptationError):
        AdaptationRule("x", cond, {Mode.NORMAL}, Mode.LOW_POWER, cooldown_periods=-1)
    with pytest.raises(AdaptationError):
        TransitionEvent(0, Mode.NORMAL, Mode.NORMAL, "x", 1.0)


# --- step ------------------------------------------------------------------

def test_cpu_default_normal_to_lowpower():
    state, event = step(MachineState(Mode.NORMAL), {"cpu_percent": 60}, load_preset("cpu-default"))
    assert event.to_mode is Mode.LOW_POWER and state.mode is Mode.LOW_POWER


def test_cpu_default_lowpower_to_normal():
    state, event = step(MachineState(Mode.LOW_POWER), {"cpu_percent": 40}, load_preset("cpu-default"))
    assert event.to_mode is Mode.NORMAL and event.rule_id == "cpu-low"


def test_scripted_energy_trace():
    events, machine = run([10, 10, 16, 16, 7])
    assert [(e.from_mode, e.to_mode) for e in events] == [(Mode.NORMAL, Mode.LOW_POWER), (Mode.LOW_POWER, Mode.NORMAL)]
    # the third and fifth windows (ending at 6 s and 10 s)
    assert [e.t_ms for e in events] == [6000, 10_000]
    assert [e.triggering_value for e in events] == [16, 7]
    assert machine.state.escalation_reference == 16


def test_hp_preset_returns_to_high_performance():
    events, _ = run([10, 10, 16, 16, 7], preset="energy-adapt-hp")
    assert [e.to_mode for e in events] == [Mode.LOW_POWER, Mode.HIGH_PERFORMANCE]


def test_cpu_crossing_up_then_down():
    events, _ = run([30, 40, 60, 70, 40, 30], preset="cpu-default", trace=cpu_trace)
    assert [(e.from_mode, e.to_mode) for e in events] == [(Mode.NORMAL, Mode.LOW_POWER), (Mode.LOW_POWER, Mode.NORMAL)]
    assert [e.t_ms for e in events] == [6000, 10_000]


def test_first_match_wins_and_order_is_the_only_tie_break():
    a = rule_from_dict({"rule_id": "a", "metric": "cpu_percent", "operator": "GreaterThan", "threshold": 10,
                        "from_modes": ["Normal"], "to_mode": "LowPower"})
    b = rule_from_dict({"rule_id": "b", "metric": "cpu_percent", "operator": "GreaterThan", "threshold": 20,
                        "from_modes": ["Normal"], "to_mode": "HighPerformance"})
    _, e1 = step(MachineState(), {"cpu_percent": 90}, [a, b])
    _, e2 = step(MachineState(), {"cpu_percent": 90}, [b, a])
    assert (e1.rule_id, e1.to_mode) == ("a", Mode.LOW_POWER)
    assert (e2.rule_id, e2.to_mode) == ("b", Mode.HIGH_PERFORMANCE)
    assert (e1.t_ms, e1.from_mode, e1.triggering_value) == (e2.t_ms, e2.from_mode, e2.triggering_value)


def test_missing_metric_skips_rule():
    state, event = step(MachineState(), {"energy_joules": 1.0}, load_preset("cpu-default"))
    assert event is None and state.mode is Mode.NORMAL


# --- observe_loop ----------------------------------------------------------

def test_disabled_flag_gives_no_transitions():
    events, machine = run([10, 10, 16, 16, 7, 50, 1, 100], enabled=False)
    assert events == [] and machine.mode is Mode.NORMAL


def test_disabled_machine_never_evaluates():
    with mock.patch.object(adaptation, "evaluate", side_effect=AssertionError("evaluated")):
        events, _ = run([10, 30, 5, 90], enabled=False)
    assert events == []


def test_constant_metrics_no_transitions():
    assert run([12.0] * 50)[0] == []
    assert run([45.0] * 50, preset="cpu-default", trace=cpu_trace)[0] == []


def test_alternating_trace_respects_cooldown():
    events, _ = run([90, 10] * 10, preset="cpu-default", trace=cpu_trace)
    times = [e.t_ms for e in events]
    assert len(events) >= 2
    assert all(b - a >= 2 * 2000 for a, b in zip(times, times[1:]))


def test_gap_snapshot_is_ignored():
    machine = Machine(load_preset("cpu-default"))
    assert machine.observe(Snapshot(2000, None)) is None
    assert machine.state.period == -1


def test_listeners_receive_events():
    got = []
    machine = Machine(load_preset("cpu-default"))
    machine.subscribe(got.append)
    list(observe_loop(cpu_trace([60]), machine))
    assert [e.rule_id for e in got] == ["cpu-high"]


@given(st.lists(st.floats(0, 100), max_size=60))
def test_determinism_and_one_transition_per_period(values):
    first, _ = run(values, preset="cpu-default", trace=cpu_trace)
    second, _ = run(values, preset="cpu-default", trace=cpu_trace)
    assert first == second
    times = [e.t_ms for e in first]
    assert len(times) == len(set(times))


@given(st.lists(st.floats(0.1, 1000), max_size=60))
def test_energy_preset_properties(values):
    events, machine = run(values)
    again, _ = run(values)
    assert events == again
    modes = [Mode.NORMAL] + [e.to_mode for e in events]
    assert all(a is not b for a, b in zip(modes, modes[1:]))
    assert all(e.from_mode is m for e, m in zip(events, modes))


@given(st.lists(st.floats(0, 100), max_size=40))
def test_disabled_mode_constant(values):
    _, machine = run(values, preset="cpu-default", trace=cpu_trace, enabled=False)
    assert machine.mode is Mode.NORMAL


# --- presets ---------------------------------------------------------------

def test_presets_available():
    assert {"cpu-default", "energy-adapt", "energy-adapt-hp"} <= set(preset_names())
    with pytest.raises(AdaptationError):
        load_preset("nope")


def test_rules_from_file_with_thresholds_pair(tmp_path):
    path = tmp_path / "rules.json"
    path.write_text(json.dumps([{"rule_id": "band", "metric": "cpu_percent", "operator": "BetweenTwoBounds",
                                 "thresholds": [20, 40], "from_modes": ["Normal"], "to_mode": "LowPower",
                                 "cooldown_periods": 0}]))
    (rule,) = load_rules(path)
    assert (rule.condition.threshold, rule.condition.upper, rule.cooldown_periods) == (20, 40, 0)
    assert rule.from_modes == frozenset({Mode.NORMAL})
