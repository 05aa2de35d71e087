"""Common event format shared by every stage, plus alarm records.

Both records serialize to one canonical JSON line with a fixed key order, so
identical records always produce identical bytes.
"""
import ipaddress
import json
import logging
import operator
from dataclasses import dataclass, field
from enum import Enum

from errors import InvalidRule, MalformedEvent
from helpers import canonical_json

log = logging.getLogger(__name__)

EVENT_KEYS = ('event_id', 'timestamp', 'layer', 'event_type', 'source',
              'destination', 'severity', 'attributes')
ALARM_KEYS = ('alarm_id', 'rule_id', 'timestamp', 'contributing_events',
              'description', 'severity')


class Layer(str, Enum):
    PHYSICAL_SENSOR = 'physical_sensor'
    LOGICAL_ACCESS = 'logical_access'
    PHYSICAL_ACCESS = 'physical_access'
    NETWORK = 'network'
    APPLICATION = 'application'


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _check_severity(value):
    if not _is_int(value) or not 0 <= value <= 10:
        raise MalformedEvent(f'severity must be an integer in [0, 10], got {value!r}')


@dataclass(frozen=True)
class Endpoint:
    ip: str
    port: int | None = None

    def __post_init__(self):
        try:
            ipaddress.IPv4Address(self.ip)
        except (ipaddress.AddressValueError, ValueError):
            raise MalformedEvent(f'invalid IPv4 address {self.ip!r}') from None
        if self.port is not None and (not _is_int(self.port) or not 0 <= self.port <= 65535):
            raise MalformedEvent(f'invalid port {self.port!r}')

    def to_dict(self):
        return {'ip': self.ip, 'port': self.port}

    @classmethod
    def from_dict(cls, data):
        if data is None:
            return None
        if not isinstance(data, dict) or set(data) != {'ip', 'port'}:
            raise MalformedEvent(f'endpoint must be {{"ip", "port"}}, got {data!r}')
        if not isinstance(data['ip'], str):
            raise MalformedEvent('endpoint ip must be a string')
        return cls(data['ip'], data['port'])


@dataclass(frozen=True)
class NormalizedEvent:
    event_id: str
    timestamp: int
    layer: Layer
    event_type: str
    source: Endpoint | None = None
    destination: Endpoint | None = None
    severity: int = 0
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.event_id, str) or not self.event_id:
            raise MalformedEvent('event_id must be a non-empty string')
        if not _is_int(self.timestamp) or self.timestamp < 0:
            raise MalformedEvent(f'timestamp must be non-negative integer ms, got {self.timestamp!r}')
        try:
            object.__setattr__(self, 'layer', Layer(self.layer))
        except ValueError:
            raise MalformedEvent(f'unknown layer {self.layer!r}') from None
        if not isinstance(self.event_type, str) or not self.event_type:
            raise MalformedEvent('event_type must be a non-empty string')
        _check_severity(self.severity)
        if not isinstance(self.attributes, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in self.attributes.items()):
            raise MalformedEvent('attributes must map strings to strings')

    def to_dict(self):
        return {
            'event_id': self.event_id,
            'timestamp': self.timestamp,
            'layer': self.layer.value,
            'event_type': self.event_type,
            'source': self.source.to_dict() if self.source else None,
            'destination': self.destination.to_dict() if self.destination else None,
            'severity': self.severity,
            'attributes': dict(self.attributes),
        }


@dataclass(frozen=True)
class Alarm:
    alarm_id: str
    rule_id: str
    timestamp: int
    contributing_events: tuple
    description: str
    severity: int

    def __post_init__(self):
        object.__setattr__(self, 'contributing_events', tuple(self.contributing_events))
        if not self.contributing_events:
            raise MalformedEvent('an alarm needs at least one contributing event')
        if not all(isinstance(e, str) and e for e in self.contributing_events):
            raise MalformedEvent('contributing events must be event ids')
        if not isinstance(self.alarm_id, str) or not self.alarm_id:
            raise MalformedEvent('alarm_id must be a non-empty string')
        if not isinstance(self.rule_id, str) or not self.rule_id:
            raise MalformedEvent('rule_id must be a non-empty string')
        if not _is_int(self.timestamp) or self.timestamp < 0:
            raise MalformedEvent('timestamp must be non-negative integer ms')
        if not isinstance(self.description, str):
            raise MalformedEvent('description must be a string')
        _check_severity(self.severity)

    def to_dict(self):
        return {
            'alarm_id': self.alarm_id,
            'rule_id': self.rule_id,
            'timestamp': self.timestamp,
            'contributing_events': list(self.contributing_events),
            'description': self.description,
            'severity': self.severity,
        }


def serialize_event(event):
    return (canonical_json(event.to_dict()) + '\n').encode('utf-8')


def serialize_alarm(alarm):
    return (canonical_json(alarm.to_dict()) + '\n').encode('utf-8')


def _load_object(line, keys, kind):
    if isinstance(line, str):
        line = line.encode('utf-8')
    try:
        data = json.loads(line.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedEvent(f'{kind} line is not valid JSON: {e}') from None
    if not isinstance(data, dict):
        raise MalformedEvent(f'{kind} line must hold a JSON object')
    missing = [k for k in keys if k not in data]
    if missing:
        raise MalformedEvent(f'{kind} is missing {", ".join(missing)}')
    extra = sorted(set(data) - set(keys))
    if extra:
        raise MalformedEvent(f'{kind} has unexpected keys {", ".join(extra)}')
    return data


def deserialize_event(line):
    data = _load_object(line, EVENT_KEYS, 'event')
    return NormalizedEvent(
        event_id=data['event_id'],
        timestamp=data['timestamp'],
        layer=data['layer'],
        event_type=data['event_type'],
        source=Endpoint.from_dict(data['source']),
        destination=Endpoint.from_dict(data['destination']),
        severity=data['severity'],
        attributes=data['attributes'],
    )


def deserialize_alarm(line):
    data = _load_object(line, ALARM_KEYS, 'alarm')
    if not isinstance(data['contributing_events'], list):
        raise MalformedEvent('contributing_events must be a list')
    return Alarm(**data)


def field_value(event, path):
    """Look up a dotted field path (``source.ip``, ``attributes.Q``) on an event."""
    if path in ('event_id', 'timestamp', 'event_type', 'severity'):
        return getattr(event, path)
    if path == 'layer':
        return event.layer.value
    head, _, tail = path.partition('.')
    if head in ('source', 'destination'):
        endpoint = getattr(event, head)
        if endpoint is None or tail not in ('ip', 'port'):
            return None
        return getattr(endpoint, tail)
    if head == 'attributes':
        return event.attributes.get(tail)
    return None


EVENT_FIELDS = ('event_id', 'timestamp', 'layer', 'event_type', 'severity',
                'source.ip', 'source.port', 'destination.ip', 'destination.port')


def is_event_field(path):
    return path in EVENT_FIELDS or (path.startswith('attributes.') and len(path) > len('attributes.'))


COMPARATORS = {
    'eq': operator.eq, 'ne': operator.ne,
    'gt': operator.gt, 'ge': operator.ge,
    'lt': operator.lt, 'le': operator.le,
}


@dataclass(frozen=True)
class Condition:
    """``field op constant``; numeric constants compare numerically."""
    field: str
    op: str
    value: object

    def __post_init__(self):
        if not is_event_field(self.field):
            raise InvalidRule(f'unknown event field {self.field!r}')
        if self.op not in COMPARATORS:
            raise InvalidRule(f'unknown comparator {self.op!r}')
        if not self.numeric and self.op not in ('eq', 'ne'):
            raise InvalidRule(f'{self.op} needs a numeric constant, got {self.value!r}')

    @property
    def numeric(self):
        return isinstance(self.value, (int, float)) and not isinstance(self.value, bool)

    def test(self, event):
        actual = field_value(event, self.field)
        if actual is None:
            return False
        if self.numeric:
            try:
                actual = float(actual)
            except (TypeError, ValueError):
                return False
            return COMPARATORS[self.op](actual, float(self.value))
        return COMPARATORS[self.op](str(actual), str(self.value))

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(data['field'], data.get('op', 'eq'), data['value'])
        except KeyError as e:
            raise InvalidRule(f'condition is missing {e}') from None

    def to_dict(self):
        return {'field': self.field, 'op': self.op, 'value': self.value}


class Quarantine:
    """Lines that could not become events. Never silently dropped."""

    def __init__(self):
        self.entries = []

    def __len__(self):
        return len(self.entries)

    def add(self, stream, line_no, raw, reason):
        if isinstance(raw, bytes):
            raw = raw.decode('utf-8', errors='replace')
        self.entries.append({'stream': stream, 'line': line_no, 'reason': str(reason), 'raw': raw})
        log.warning('quarantined %s:%d: %s', stream, line_no, reason)

    def to_lines(self):
        return [(canonical_json(e) + '\n').encode('utf-8') for e in self.entries]


def read_events(lines, quarantine, stream='events'):
    events = []
    for line_no, line in enumerate(lines, start=1):
        try:
            events.append(deserialize_event(line))
        except MalformedEvent as e:
            quarantine.add(stream, line_no, line, e)
    return events


def read_alarms(lines, quarantine, stream='alarms'):
    alarms = []
    for line_no, line in enumerate(lines, start=1):
        try:
            alarms.append(deserialize_alarm(line))
        except MalformedEvent as e:
            quarantine.add(stream, line_no, line, e)
    return alarms
