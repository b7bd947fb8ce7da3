"""Rule-driven mode state machine.

Conditions are evaluated on periodic metric snapshots; the first rule (in
declared order) that applies to the current mode, is out of cooldown and whose
condition holds moves the machine to its target mode. At most one transition
happens per observation period.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

from .store import ModeChange

log = logging.getLogger(__name__)


class AdaptationError(ValueError):
    pass


class MissingReference(AdaptationError):
    pass


class Mode(str, enum.Enum):
    NORMAL = "Normal"
    HIGH_PERFORMANCE = "HighPerformance"
    LOW_POWER = "LowPower"


class Operator(str, enum.Enum):
    GREATER_THAN = "GreaterThan"
    LESS_THAN = "LessThan"
    BETWEEN_TWO_BOUNDS = "BetweenTwoBounds"
    RELATIVE_INCREASE_AT_LEAST = "RelativeIncreaseAtLeast"
    RELATIVE_DECREASE_AT_LEAST = "RelativeDecreaseAtLeast"


class Reference(str, enum.Enum):
    ABSOLUTE = "absolute"
    PREVIOUS_WINDOW = "previous_window"
    ESCALATION_REFERENCE = "escalation_reference"


METRICS = ("cpu_percent", "energy_joules", "normalized_energy")
_RELATIVE = (Operator.RELATIVE_INCREASE_AT_LEAST, Operator.RELATIVE_DECREASE_AT_LEAST)


@dataclass(frozen=True)
class Condition:
    metric: str
    operator: Operator
    threshold: float
    upper: float | None = None
    reference: Reference = Reference.ABSOLUTE

    def __post_init__(self):
        object.__setattr__(self, "operator", Operator(self.operator))
        object.__setattr__(self, "reference", Reference(self.reference))
        if self.metric not in METRICS:
            raise AdaptationError(f"unknown metric {self.metric!r}")
        if self.operator is Operator.BETWEEN_TWO_BOUNDS:
            if self.upper is None or not self.threshold < self.upper:
                raise AdaptationError("BetweenTwoBounds requires lower < upper")
        if self.operator in _RELATIVE and self.reference is Reference.ABSOLUTE:
            raise AdaptationError(f"{self.operator.value} needs a previous_window or escalation_reference")

    @property
    def is_relative(self) -> bool:
        return self.operator in _RELATIVE


def evaluate(condition: Condition, current: float, previous: float | None = None,
             reference: float | None = None) -> bool:
    """Pure predicate over the current metric value.

    ``previous`` is the value of the preceding period, ``reference`` the value
    recorded when the last escalating rule fired. Relative operators read
    whichever one ``condition.reference`` names.
    """
    op = condition.operator
    if op is Operator.GREATER_THAN:
        return current > condition.threshold
    if op is Operator.LESS_THAN:
        return current < condition.threshold
    if op is Operator.BETWEEN_TWO_BOUNDS:
        return condition.threshold < current < condition.upper
    base = previous if condition.reference is Reference.PREVIOUS_WINDOW else reference
    if base is None:
        raise MissingReference(f"{op.value} on {condition.metric} needs a {condition.reference.value} value")
    if op is Operator.RELATIVE_INCREASE_AT_LEAST:
        return current >= (1.0 + condition.threshold) * base
    return current <= (1.0 - condition.threshold) * base


@dataclass(frozen=True)
class AdaptationRule:
    rule_id: str
    condition: Condition
    from_modes: frozenset[Mode]
    to_mode: Mode
    cooldown_periods: int = 1
    # when set, firing this rule records the triggering value as the escalation reference
    escalates: bool = False

    def __post_init__(self):
        object.__setattr__(self, "from_modes", frozenset(Mode(m) for m in self.from_modes))
        object.__setattr__(self, "to_mode", Mode(self.to_mode))
        if self.to_mode in self.from_modes:
            raise AdaptationError(f"rule {self.rule_id}: to_mode is one of its from_modes")
        if self.cooldown_periods < 0:
            raise AdaptationError(f"rule {self.rule_id}: cooldown_periods must be >= 0")


@dataclass(frozen=True)
class TransitionEvent:
    t_ms: int
    from_mode: Mode
    to_mode: Mode
    rule_id: str
    triggering_value: float

    def __post_init__(self):
        if self.from_mode == self.to_mode:
            raise AdaptationError("a transition must change the mode")

    def to_log(self) -> ModeChange:
        return ModeChange(self.t_ms, self.from_mode.value, self.to_mode.value, self.rule_id)


@dataclass
class MachineState:
    mode: Mode = Mode.NORMAL
    period: int = -1
    last_transition_period: int | None = None
    escalation_reference: float | None = None
    previous: dict[str, float] = field(default_factory=dict)


def step(state: MachineState, snapshot: Mapping[str, float], rules: Sequence[AdaptationRule],
         t_ms: int = 0) -> tuple[MachineState, TransitionEvent | None]:
    """Advance one observation period. ``state`` is updated in place and returned."""
    state.period += 1
    event = None
    for rule in rules:
        if state.mode not in rule.from_modes:
            continue
        if state.last_transition_period is not None and \
                state.period - state.last_transition_period <= rule.cooldown_periods:
            continue
        metric = rule.condition.metric
        if metric not in snapshot:
            continue
        current = snapshot[metric]
        try:
            fired = evaluate(rule.condition, current, state.previous.get(metric), state.escalation_reference)
        except MissingReference:
            continue
        if fired:
            event = TransitionEvent(t_ms, state.mode, rule.to_mode, rule.rule_id, current)
            state.mode = rule.to_mode
            state.last_transition_period = state.period
            if rule.escalates:
                state.escalation_reference = current
            break
    state.previous.update(snapshot)
    return state, event


@dataclass(frozen=True)
class Snapshot:
    """One observation period's metrics. ``metrics`` is None for a monitoring gap."""

    t_ms: int
    metrics: Mapping[str, float] | None


class Machine:
    """Single-owner state machine with transition listeners."""

    def __init__(self, rules: Sequence[AdaptationRule], start_mode: Mode = Mode.NORMAL,
                 enabled: bool = True):
        self.rules = list(rules)
        self.state = MachineState(mode=Mode(start_mode))
        self.enabled = enabled
        self.listeners: list[Callable[[TransitionEvent], None]] = []
        self.history: list[Snapshot] = []

    @property
    def mode(self) -> Mode:
        return self.state.mode

    def subscribe(self, listener: Callable[[TransitionEvent], None]):
        self.listeners.append(listener)

    def observe(self, snapshot: Snapshot) -> TransitionEvent | None:
        self.history.append(snapshot)
        if snapshot.metrics is None or not self.enabled:
            return None
        _, event = step(self.state, snapshot.metrics, self.rules, snapshot.t_ms)
        if event is not None:
            for listener in self.listeners:
                listener(event)
        return event


def observe_loop(source: Iterable[Snapshot], machine: Machine) -> Iterator[TransitionEvent]:
    """Feed every snapshot to ``machine`` and yield the committed transitions in order."""
    for snapshot in source:
        event = machine.observe(snapshot)
        if event is not None:
            yield event


# --- presets --------------------------------------------------------------

def rule_from_dict(d: Mapping) -> AdaptationRule:
    if "thresholds" in d:
        lo, hi = d["thresholds"]
    else:
        lo, hi = d["threshold"], d.get("upper")
    condition = Condition(d["metric"], d["operator"], float(lo), None if hi is None else float(hi),
                          d.get("reference", Reference.ABSOLUTE.value))
    return AdaptationRule(
        rule_id=d["rule_id"],
        condition=condition,
        from_modes=frozenset(d["from_modes"]),
        to_mode=d["to_mode"],
        cooldown_periods=int(d.get("cooldown_periods", 1)),
        escalates=bool(d.get("escalates", False)),
    )


def load_rules(path: str | Path) -> list[AdaptationRule]:
    with open(path, encoding="utf-8") as fh:
        return [rule_from_dict(d) for d in json.load(fh)]


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("encoms.presets").iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> list[AdaptationRule]:
    ref = resources.files("encoms.presets") / f"{name}.json"
    if not ref.is_file():
        raise AdaptationError(f"unknown rule preset {name!r}; available: {', '.join(preset_names())}")
    return [rule_from_dict(d) for d in json.loads(ref.read_text(encoding="utf-8"))]
