import random

import pytest

from correlator import CorrelationRule, correlate, load_rules
from errors import InvalidRule
from events import Endpoint, NormalizedEvent

BRUTE_FORCE = {
    'id': 'brute-force',
    'match': {'event_type': 'auth_failure'},
    'group_by': ['source.ip', 'destination.ip'],
    'threshold': 5,
    'window_ms': 60000,
    'alarm': {'description': 'repeated authentication failures', 'severity': 6},
}


def failure(n, ts, src='10.0.1.10', dst='10.0.1.20'):
    return NormalizedEvent(f'auth.log-{n:06d}', ts, 'logical_access', 'auth_failure',
                           source=Endpoint(src), destination=Endpoint(dst, 22), severity=3)


@pytest.fixture
def rules():
    return load_rules({'rules': [BRUTE_FORCE]})


def test_five_failures_raise_one_alarm(rules):
    events = [failure(n, 10_000 + n * 1000) for n in range(1, 6)]
    alarms = correlate(events, rules).alarms
    assert len(alarms) == 1
    alarm = alarms[0]
    assert alarm.alarm_id == 'brute-force-0001'
    assert alarm.timestamp == 15_000
    assert alarm.contributing_events == tuple(e.event_id for e in events)
    assert alarm.severity == 6
    assert alarm.description == 'repeated authentication failures (source.ip=10.0.1.10, destination.ip=10.0.1.20)'


def test_window_restarts_after_an_alarm(rules):
    events = [failure(n, n * 1000) for n in range(1, 10)]
    alarms = correlate(events, rules).alarms
    assert len(alarms) == 1
    events.append(failure(10, 10_000))
    assert [a.alarm_id for a in correlate(events, rules).alarms] == ['brute-force-0001', 'brute-force-0002']


def test_events_outside_the_window_do_not_count(rules):
    events = [failure(n, n * 20_000) for n in range(5)]
    assert correlate(events, rules).alarms == []


def test_groups_are_counted_separately(rules):
    events = [failure(n, n * 1000, src='10.0.1.10' if n % 2 else '10.0.1.11') for n in range(8)]
    assert correlate(events, rules).alarms == []


def test_missing_group_field_is_reported(rules):
    event = NormalizedEvent('x-000001', 0, 'logical_access', 'auth_failure')
    result = correlate([event], rules)
    assert result.alarms == []
    assert result.diagnostics['brute-force'] == 1


def test_where_conditions_filter_events():
    rule = CorrelationRule.from_dict({
        'id': 'turbine-emergency',
        'match': {'event_type': 'emergency', 'where': [{'field': 'severity', 'op': 'ge', 'value': 9}]},
        'threshold': 1,
        'alarm': {'description': 'turbine beyond limits', 'severity': 10},
    })
    mild = NormalizedEvent('dam-000001', 0, 'physical_sensor', 'emergency', severity=4)
    severe = NormalizedEvent('dam-000002', 1000, 'physical_sensor', 'emergency', severity=9)
    alarms = correlate([mild, severe], [rule]).alarms
    assert [a.contributing_events for a in alarms] == [('dam-000002',)]
    assert alarms[0].description == 'turbine beyond limits'


def test_alarms_are_ordered_by_time_then_rule():
    rules = load_rules({'rules': [
        {'id': 'zeta', 'match': {'event_type': 'ping'}, 'threshold': 1},
        {'id': 'alpha', 'match': {'event_type': 'ping'}, 'threshold': 1},
    ]})
    event = NormalizedEvent('net-000001', 0, 'network', 'ping')
    assert [a.alarm_id for a in correlate([event], rules).alarms] == ['alpha-0001', 'zeta-0002']


@pytest.mark.parametrize('change', [
    {'threshold': 0},
    {'window_ms': 0},
    {'group_by': ['nowhere']},
    {'alarm': {'severity': 11}},
])
def test_invalid_rules(change):
    with pytest.raises(InvalidRule):
        CorrelationRule.from_dict({**BRUTE_FORCE, **change})


def test_duplicate_rule_ids():
    with pytest.raises(InvalidRule):
        load_rules({'rules': [BRUTE_FORCE, BRUTE_FORCE]})
    with pytest.raises(InvalidRule):
        load_rules({'rules': [{'id': 'no-match'}]})


def test_distinct_sources_never_reach_the_threshold(rules):
    events = [failure(n, n * 1000, src=f'10.0.0.{n}', dst='192.168.0.1') for n in range(1, 6)]
    assert correlate(events, rules).alarms == []


def _oracle(events, rule):
    """Scan every group from its last reset for a window holding ``threshold`` events."""
    fired = []
    by_group = {}
    for index, event in enumerate(events):
        if rule.matches(event) and rule.group_key(event) is not None:
            by_group.setdefault(rule.group_key(event), []).append(index)
    for key, indices in by_group.items():
        reset = 0
        for pos, index in enumerate(indices):
            now = events[index].timestamp
            inside = [i for i in indices[reset:pos + 1] if now - events[i].timestamp <= rule.window]
            if len(inside) >= rule.threshold:
                fired.append((now, key, tuple(events[i].event_id for i in inside)))
                reset = pos + 1
    return sorted(fired)


@pytest.mark.parametrize('seed', range(25))
def test_matches_a_brute_force_scan(rules, seed):
    rng = random.Random(seed)
    ts, events = 0, []
    for n in range(rng.randint(0, 200)):
        ts += rng.randint(0, 15_000)
        events.append(failure(n, ts, src=rng.choice(['10.0.0.1', '10.0.0.2']), dst=rng.choice(['192.168.0.1', '192.168.0.2'])))
    alarms = correlate(events, rules).alarms
    by_id = {e.event_id: e for e in events}
    got = sorted((a.timestamp, rules[0].group_key(by_id[a.contributing_events[0]]), a.contributing_events)
                 for a in alarms)
    assert got == _oracle(events, rules[0])
    for alarm in alarms:
        stamps = [e.timestamp for e in events if e.event_id in alarm.contributing_events]
        assert max(stamps) - min(stamps) <= rules[0].window


def test_unrelated_events_do_not_change_alarms(rules):
    events = [failure(n, n * 1000) for n in range(1, 7)]
    noise = [NormalizedEvent(f'net-{n:06d}', n * 1000 + 500, 'network', 'port_scan') for n in range(1, 7)]
    mixed = sorted(events + noise, key=lambda e: e.timestamp)
    assert correlate(mixed, rules).alarms == correlate(events, rules).alarms
