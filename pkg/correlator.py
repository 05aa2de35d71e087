"""Correlation rules over the normalized event stream.

A rule counts matching events per group key inside a sliding window of event
time. When the count first reaches the threshold, one alarm is raised with
exactly those events and the group's window starts over.
"""
import logging
from collections import Counter, deque
from dataclasses import dataclass

from errors import InvalidRule
from events import Alarm, Condition, field_value, is_event_field
from helpers import slugify

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorrelationRule:
    rule_id: str
    event_type: str
    conditions: tuple = ()
    group_by: tuple = ()
    threshold: int = 1
    window: int = 60_000
    description: str = ''
    severity: int = 5

    def __post_init__(self):
        if self.threshold < 1:
            raise InvalidRule(f'{self.rule_id}: threshold must be >= 1')
        if self.window <= 0:
            raise InvalidRule(f'{self.rule_id}: window must be > 0 ms')
        if not 0 <= self.severity <= 10:
            raise InvalidRule(f'{self.rule_id}: severity must be in [0, 10]')
        for name in self.group_by:
            if not is_event_field(name):
                raise InvalidRule(f'{self.rule_id}: cannot group by {name!r}')

    def matches(self, event):
        return event.event_type == self.event_type and all(c.test(event) for c in self.conditions)

    def group_key(self, event):
        """Tuple of group-by values, or None when one is missing."""
        values = []
        for name in self.group_by:
            value = field_value(event, name)
            if value is None:
                return None
            values.append(str(value))
        return tuple(values)

    @classmethod
    def from_dict(cls, data):
        try:
            match = data['match']
            alarm = data.get('alarm', {})
            return cls(
                rule_id=data['id'],
                event_type=match['event_type'],
                conditions=tuple(Condition.from_dict(c) for c in match.get('where', [])),
                group_by=tuple(data.get('group_by', [])),
                threshold=int(data.get('threshold', 1)),
                window=int(data.get('window_ms', 60_000)),
                description=alarm.get('description', data['id']),
                severity=int(alarm.get('severity', 5)),
            )
        except (KeyError, TypeError) as e:
            raise InvalidRule(f'correlation rule is incomplete: {e}') from None


def load_rules(doc):
    rules = [CorrelationRule.from_dict(r) for r in doc.get('rules', [])]
    ids = [r.rule_id for r in rules]
    if len(ids) != len(set(ids)):
        raise InvalidRule('duplicate correlation rule ids')
    return rules


@dataclass
class CorrelationResult:
    alarms: list
    diagnostics: Counter


def correlate(events, rules):
    windows = {}
    fired = []
    diagnostics = Counter()
    for event in events:
        for rule in rules:
            if not rule.matches(event):
                continue
            key = rule.group_key(event)
            if key is None:
                diagnostics[rule.rule_id] += 1
                continue
            window = windows.setdefault((rule.rule_id, key), deque())
            window.append((event.timestamp, event.event_id))
            while event.timestamp - window[0][0] > rule.window:
                window.popleft()
            if len(window) >= rule.threshold:
                fired.append((event.timestamp, rule, key, [eid for _, eid in window]))
                window.clear()

    # stable: same (time, rule, key) keeps detection order
    fired.sort(key=lambda f: (f[0], f[1].rule_id, f[2]))
    alarms = []
    for n, (ts, rule, key, contributing) in enumerate(fired, start=1):
        alarm = Alarm(
            alarm_id=f'{slugify(rule.rule_id)}-{n:04d}',
            rule_id=rule.rule_id,
            timestamp=ts,
            contributing_events=contributing,
            description=_describe(rule, key),
            severity=rule.severity,
        )
        log.info('alarm %s: %s', alarm.alarm_id, alarm.description)
        alarms.append(alarm)
    for rule_id, count in sorted(diagnostics.items()):
        log.info('rule %s skipped %d events lacking group-by fields', rule_id, count)
    return CorrelationResult(alarms, diagnostics)


def _describe(rule, key):
    if not rule.group_by:
        return rule.description
    group = ', '.join(f'{name}={value}' for name, value in zip(rule.group_by, key))
    return f'{rule.description} ({group})'
