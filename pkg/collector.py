"""Generic event translation: grammar-driven parsers and state-machine probes.

Grammars are declarative: an ordered list of regex token rules plus a line
rule naming the tokens in sequence. Tokens are whitespace-delimited and
matched greedily left to right; there is no backtracking.

Security probes are finite state machines over parsed events. A guard is a
conjunction of field comparisons with an optional rate-of-change condition
("field delta per second > threshold"). Probes are checked for determinism
when they are loaded.
"""
import logging
import math
import re
from dataclasses import dataclass, field

from errors import InvalidGrammar, InvalidRule, MalformedEvent, NondeterministicProbe, ParseReject
from events import (COMPARATORS, EVENT_FIELDS, Condition, Endpoint, Layer, NormalizedEvent,
                    Quarantine, field_value, is_event_field)
from helpers import iso_to_ms

log = logging.getLogger(__name__)

_WS = re.compile(r'\s*')
REPEAT_MARKERS = ('?', '*', '+')
BINDABLE = tuple(f for f in EVENT_FIELDS if f != 'event_id')


# ---------------------------------------------------------------------------
# Adaptable parsers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LineItem:
    token: str
    repeat: str = ''

    @classmethod
    def parse(cls, text):
        if text and text[-1] in REPEAT_MARKERS:
            return cls(text[:-1], text[-1])
        return cls(text)


@dataclass(frozen=True)
class Grammar:
    name: str
    token_rules: tuple
    line_rule: tuple
    field_bindings: dict = field(default_factory=dict)
    value_maps: dict = field(default_factory=dict)
    defaults: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [name for name, _ in self.token_rules]
        if len(names) != len(set(names)):
            raise InvalidGrammar(f'{self.name}: duplicate token names')
        compiled = {}
        for name, pattern in self.token_rules:
            try:
                compiled[name] = re.compile(pattern)
            except re.error as e:
                raise InvalidGrammar(f'{self.name}: token {name!r} has a bad pattern: {e}') from None
        object.__setattr__(self, '_compiled', compiled)
        for item in self.line_rule:
            if item.token not in compiled:
                raise InvalidGrammar(f'{self.name}: line rule references undeclared token {item.token!r}')
        for key, target in self.field_bindings.items():
            if not _bindable(target):
                raise InvalidGrammar(f'{self.name}: {key!r} binds to unknown field {target!r}')
        for key in self.value_maps:
            if key not in self.field_bindings:
                raise InvalidGrammar(f'{self.name}: value map for unbound key {key!r}')
        for target in self.defaults:
            if not _bindable(target):
                raise InvalidGrammar(f'{self.name}: default for unknown field {target!r}')

    def pattern(self, token):
        return self._compiled[token]

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                name=data['name'],
                token_rules=tuple((t['name'], t['pattern']) for t in data['tokens']),
                line_rule=tuple(LineItem.parse(t) for t in data.get('line', [])),
                field_bindings=dict(data.get('bindings', {})),
                value_maps={k: dict(v) for k, v in data.get('value_maps', {}).items()},
                defaults=dict(data.get('defaults', {})),
            )
        except (KeyError, TypeError) as e:
            raise InvalidGrammar(f'grammar definition is incomplete: {e}') from None


def _bindable(target):
    return target in BINDABLE or (target.startswith('attributes.') and is_event_field(target))


@dataclass(frozen=True)
class SourceContext:
    stream_id: str
    line_no: int
    layer: str | None = None
    timestamp: int | None = None


def _tokenize(grammar, text):
    """Yield (token_name, match) pairs in line order, or raise ParseReject."""
    if not grammar.line_rule:
        raise ParseReject(f'{grammar.name}: empty line rule matches nothing')
    pos, out = 0, []
    for item in grammar.line_rule:
        pattern = grammar.pattern(item.token)
        found = 0
        while True:
            start = _WS.match(text, pos).end()
            if pos and start == pos:
                break
            m = pattern.match(text, start)
            if m is None or m.end() == start or (m.end() < len(text) and not text[m.end()].isspace()):
                break
            out.append((item.token, m))
            pos = m.end()
            found += 1
            if item.repeat in ('', '?'):
                break
        if not found and item.repeat in ('', '+'):
            raise ParseReject(f'{grammar.name}: expected {item.token} at column {pos}')
    if text[pos:].strip():
        raise ParseReject(f'{grammar.name}: unexpected trailing input {text[pos:].strip()!r}')
    return out


def _assign(fields, attributes, target, value):
    if target.startswith('attributes.'):
        attributes[target[len('attributes.'):]] = value
    else:
        fields[target] = value


def parse_line(grammar, raw, context):
    if isinstance(raw, bytes):
        try:
            raw = raw.decode('utf-8')
        except UnicodeDecodeError:
            raise ParseReject('line is not valid UTF-8') from None
    text = raw.rstrip('\r\n')

    fields, attributes = {}, {}
    for target, value in grammar.defaults.items():
        _assign(fields, attributes, target, str(value))

    for token, m in _tokenize(grammar, text):
        groups = m.groupdict()
        if 'key' in groups and 'value' in groups:
            key, value = groups['key'], groups['value']
        else:
            key, value = token, m.group(0)
        target = grammar.field_bindings.get(key)
        if target is None:
            prior = attributes.get(key)
            attributes[key] = value if prior is None else f'{prior} {value}'
            continue
        value = grammar.value_maps.get(key, {}).get(value, value)
        _assign(fields, attributes, target, value)

    try:
        if 'timestamp' in fields:
            ts = fields['timestamp']
            timestamp = int(ts) if ts.isdigit() else iso_to_ms(ts)
        elif context.timestamp is not None:
            timestamp = context.timestamp
        else:
            raise ParseReject('no timestamp bound and none in context')
        layer = fields.get('layer', context.layer)
        if layer is None:
            raise ParseReject('no layer bound and none in context')
        if 'event_type' not in fields:
            raise ParseReject('no event_type bound')
        return NormalizedEvent(
            event_id=f'{context.stream_id}-{context.line_no:06d}',
            timestamp=timestamp,
            layer=layer,
            event_type=fields['event_type'],
            source=_endpoint(fields, 'source'),
            destination=_endpoint(fields, 'destination'),
            severity=int(fields.get('severity', 0)),
            attributes=attributes,
        )
    except (MalformedEvent, ValueError) as e:
        raise ParseReject(str(e)) from None


def _endpoint(fields, side):
    ip = fields.get(f'{side}.ip')
    if ip is None:
        return None
    port = fields.get(f'{side}.port')
    return Endpoint(ip, int(port) if port is not None else None)


# ---------------------------------------------------------------------------
# Security probes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateCondition:
    field: str
    op: str
    threshold: float

    def __post_init__(self):
        if not is_event_field(self.field):
            raise InvalidRule(f'unknown event field {self.field!r}')
        if self.op not in ('gt', 'ge', 'lt', 'le'):
            raise InvalidRule(f'rate guards compare with gt/ge/lt/le, got {self.op!r}')

    def rate(self, state, event):
        current = _number(field_value(event, self.field))
        previous = state.scratch.get(self.field)
        since = state.scratch.get(self.field + '@t')
        if current is None or previous is None or since is None or event.timestamp <= since:
            return None
        return (current - previous) / ((event.timestamp - since) / 1000)


@dataclass(frozen=True)
class Guard:
    conditions: tuple = ()
    rate: RateCondition | None = None

    def evaluate(self, state, event):
        """Return (enabled, observed rate)."""
        if not all(c.test(event) for c in self.conditions):
            return False, None
        if self.rate is None:
            return True, None
        rate = self.rate.rate(state, event)
        if rate is None:
            return False, None
        return COMPARATORS[self.rate.op](rate, self.rate.threshold), rate

    def constraints(self):
        out = {}
        for c in self.conditions:
            out.setdefault(c.field, []).append((c.op, c.value))
        if self.rate is not None:
            out.setdefault('rate:' + self.rate.field, []).append((self.rate.op, self.rate.threshold))
        return out


@dataclass(frozen=True)
class EventTemplate:
    event_type: str
    severity: int
    layer: str | None = None
    attributes: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Transition:
    source: str
    guard: Guard
    target: str
    emit: EventTemplate | None = None


@dataclass(frozen=True)
class SecurityProbe:
    probe_id: str
    states: frozenset
    initial: str
    accepting: frozenset
    transitions: tuple

    @property
    def rate_fields(self):
        return sorted({t.guard.rate.field for t in self.transitions if t.guard.rate is not None})


@dataclass(frozen=True)
class ProbeState:
    current_state: str
    scratch: dict = field(default_factory=dict)
    last_timestamp: int | None = None

    @classmethod
    def initial(cls, probe):
        return cls(probe.initial)


def _number(value):
    if value is None:
        return None
    try:
        number = float(value)
    except (TypeError, ValueError):
        return None
    return number if math.isfinite(number) else None


def _candidate_holds(op, candidate, constant):
    numeric = isinstance(constant, (int, float)) and not isinstance(constant, bool)
    if numeric:
        value = _number(candidate)
        return value is not None and COMPARATORS[op](value, float(constant))
    return COMPARATORS[op](str(candidate), str(constant))


def _satisfiable(constraints):
    eqs = [c for op, c in constraints if op == 'eq']
    if eqs:
        return any(all(_candidate_holds(op, cand, c) for op, c in constraints) for cand in eqs)
    lo, lo_strict, hi, hi_strict = -math.inf, False, math.inf, False
    excluded = set()
    for op, c in constraints:
        if op == 'ne':
            number = _number(c)
            if number is not None:
                excluded.add(number)
            continue
        c = float(c)
        if op in ('gt', 'ge'):
            if c > lo or (c == lo and op == 'gt'):
                lo, lo_strict = c, op == 'gt'
        elif c < hi or (c == hi and op == 'lt'):
            hi, hi_strict = c, op == 'lt'
    if lo > hi:
        return False
    if lo == hi:
        return not (lo_strict or hi_strict or lo in excluded)
    return True


def guards_overlap(a, b):
    """True when some event could enable both guards."""
    merged = a.constraints()
    for key, cons in b.constraints().items():
        merged[key] = merged.get(key, []) + cons
    return all(_satisfiable(cons) for cons in merged.values())


def validate_probe(probe):
    if probe.initial not in probe.states:
        raise InvalidRule(f'{probe.probe_id}: initial state {probe.initial!r} is not declared')
    if not probe.accepting or not probe.accepting <= probe.states:
        raise InvalidRule(f'{probe.probe_id}: needs at least one declared accepting state')
    for t in probe.transitions:
        if t.source not in probe.states or t.target not in probe.states:
            raise InvalidRule(f'{probe.probe_id}: transition {t.source}->{t.target} uses undeclared states')
        if t.emit is not None:
            if not 0 <= t.emit.severity <= 10 or not t.emit.event_type:
                raise InvalidRule(f'{probe.probe_id}: emitted template would be an invalid event')
            if t.emit.layer is not None and t.emit.layer not in {l.value for l in Layer}:
                raise InvalidRule(f'{probe.probe_id}: unknown layer {t.emit.layer!r}')
    for i, a in enumerate(probe.transitions):
        for b in probe.transitions[i + 1:]:
            if a.source == b.source and guards_overlap(a.guard, b.guard):
                raise NondeterministicProbe(
                    f'{probe.probe_id}: transitions {a.source}->{a.target} and '
                    f'{b.source}->{b.target} can both fire on one event')
    return probe


def probe_step(probe, state, event):
    enabled = []
    for t in probe.transitions:
        if t.source != state.current_state:
            continue
        ok, rate = t.guard.evaluate(state, event)
        if ok:
            enabled.append((t, rate))
    if len(enabled) > 1:
        raise NondeterministicProbe(f'{probe.probe_id}: {len(enabled)} transitions enabled in {state.current_state}')

    scratch = dict(state.scratch)
    for name in probe.rate_fields:
        value = _number(field_value(event, name))
        if value is not None:
            scratch[name] = value
            scratch[name + '@t'] = event.timestamp

    current, emitted = state.current_state, []
    if enabled:
        transition, rate = enabled[0]
        current = transition.target
        if transition.emit is not None:
            emitted.append(_instantiate(probe, transition, event, rate))
    return ProbeState(current, scratch, event.timestamp), emitted


def _instantiate(probe, transition, trigger, rate):
    template = transition.emit
    attributes = {'probe': probe.probe_id, 'trigger': trigger.event_id,
                  'transition': f'{transition.source}->{transition.target}'}
    if rate is not None:
        attributes['rate'] = f'{rate:.3f}'
    attributes.update({k: str(v) for k, v in template.attributes.items()})
    log.info('probe %s fired %s on %s', probe.probe_id, template.event_type, trigger.event_id)
    return NormalizedEvent(
        event_id=f'{trigger.event_id}.{probe.probe_id}',
        timestamp=trigger.timestamp,
        layer=template.layer or trigger.layer,
        event_type=template.event_type,
        source=trigger.source,
        destination=trigger.destination,
        severity=template.severity,
        attributes=attributes,
    )


def _guard_from_dict(data):
    conditions = []
    if 'event_type' in data:
        conditions.append(Condition('event_type', 'eq', data['event_type']))
    conditions.extend(Condition.from_dict(c) for c in data.get('where', []))
    rate = None
    if 'rate' in data:
        r = data['rate']
        rate = RateCondition(r['field'], r.get('op', 'gt'), float(r['threshold']))
    return Guard(tuple(conditions), rate)


def probe_from_dict(data):
    try:
        transitions = []
        for t in data['transitions']:
            emit = None
            if t.get('emit'):
                e = t['emit']
                emit = EventTemplate(e['event_type'], int(e.get('severity', 5)), e.get('layer'),
                                     dict(e.get('attributes', {})))
            transitions.append(Transition(t['from'], _guard_from_dict(t.get('when', {})), t['to'], emit))
        probe = SecurityProbe(
            probe_id=data['id'],
            states=frozenset(data['states']),
            initial=data['initial'],
            accepting=frozenset(data.get('accepting', [])),
            transitions=tuple(transitions),
        )
    except (KeyError, TypeError) as e:
        raise InvalidRule(f'probe definition is incomplete: {e}') from None
    return validate_probe(probe)


def load_grammars(doc):
    grammars = {}
    for data in doc.get('grammars', []):
        grammar = Grammar.from_dict(data)
        if grammar.name in grammars:
            raise InvalidGrammar(f'grammar {grammar.name!r} declared twice')
        grammars[grammar.name] = grammar
    return grammars


def load_probes(doc):
    return [probe_from_dict(p) for p in doc.get('probes', [])]


# ---------------------------------------------------------------------------
# Collector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RawStream:
    stream_id: str
    grammar: str
    lines: tuple
    layer: str | None = None


@dataclass
class CollectorResult:
    events: list
    quarantine: Quarantine
    lines_in: int = 0
    parsed: int = 0
    emitted: int = 0


def _collect_stream(grammar, probes, stream, quarantine):
    states = {p.probe_id: ProbeState.initial(p) for p in probes}
    out, parsed, emitted, last_ts = [], 0, 0, None
    for line_no, raw in enumerate(stream.lines, start=1):
        context = SourceContext(stream.stream_id, line_no, stream.layer)
        try:
            event = parse_line(grammar, raw, context)
        except ParseReject as e:
            quarantine.add(stream.stream_id, line_no, raw, e)
            continue
        if last_ts is not None and event.timestamp < last_ts:
            quarantine.add(stream.stream_id, line_no, raw, 'timestamp goes backwards')
            continue
        last_ts = event.timestamp
        parsed += 1
        out.append(event)
        for probe in probes:
            states[probe.probe_id], fired = probe_step(probe, states[probe.probe_id], event)
            emitted += len(fired)
            out.extend(fired)
    return out, parsed, emitted


def run_collector(grammars, probes, streams):
    quarantine = Quarantine()
    merged = []
    result = CollectorResult(events=merged, quarantine=quarantine)
    ids = [s.stream_id for s in streams]
    if len(ids) != len(set(ids)):
        raise InvalidGrammar(f'stream ids must be unique, got {sorted(ids)}')
    for stream in streams:
        if stream.grammar not in grammars:
            raise InvalidGrammar(f'stream {stream.stream_id!r} uses unknown grammar {stream.grammar!r}')
        out, parsed, emitted = _collect_stream(grammars[stream.grammar], probes, stream, quarantine)
        merged.extend(out)
        result.lines_in += len(stream.lines)
        result.parsed += parsed
        result.emitted += emitted
    # sorted() is stable: equal timestamps keep stream order, then arrival order
    merged.sort(key=lambda e: e.timestamp)
    log.info('collected %d events (%d parsed, %d emitted), %d lines quarantined',
             len(merged), result.parsed, result.emitted, len(quarantine))
    return result
