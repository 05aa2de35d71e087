"""Abstract reach policies, concrete filtering rules and the system description.

Policy scopes are decided by enumeration over the entities declared in the
system description: hosts and users are subjects, services are objects and
declared environments (time, location, network contexts) are environments.
"""
import ipaddress
import itertools
import logging
from dataclasses import dataclass, field, replace
from enum import Enum

from errors import InvalidPolicy, InvalidRule, InvalidSystemDescription, UnknownAttribute
from helpers import ip_key

log = logging.getLogger(__name__)

ELEMENT_ATTRIBUTES = {
    'subject': ('ID', 'Role', 'Organization'),
    'object': ('ID', 'Type', 'Owner'),
    'environment': ('Time', 'Location', 'Network'),
}
ELEMENTS = tuple(ELEMENT_ATTRIBUTES)
REACH = 'reach'
CAPABILITIES = ('filtering', 'routing', 'endpoint')


class Effect(str, Enum):
    PERMIT = 'permit'
    DENY = 'deny'


class Proto(str, Enum):
    TCP = 'TCP'
    UDP = 'UDP'
    ANY = 'ANY'


CONCRETE_PROTOS = (Proto.TCP, Proto.UDP)


# ---------------------------------------------------------------------------
# Abstract policies
# ---------------------------------------------------------------------------

def _clean(attrs, element):
    out = {}
    for key, value in (attrs or {}).items():
        if key not in ELEMENT_ATTRIBUTES[element]:
            raise UnknownAttribute(f'{element} has no attribute {key!r}')
        value = str(value).strip()
        if value:
            out[key] = value
    return {k: out[k] for k in ELEMENT_ATTRIBUTES[element] if k in out}


@dataclass(frozen=True)
class AbstractPolicy:
    policy_id: str
    subject: dict
    action: str
    object: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    effect: Effect = Effect.PERMIT

    def __post_init__(self):
        try:
            object.__setattr__(self, 'effect', Effect(self.effect))
        except ValueError:
            raise InvalidPolicy(f'{self.policy_id}: unknown effect {self.effect!r}') from None
        for element in ELEMENTS:
            object.__setattr__(self, element, _clean(getattr(self, element), element))
        object.__setattr__(self, 'action', str(self.action).strip().lower())
        if not self.subject:
            raise InvalidPolicy(f'{self.policy_id}: at least one subject attribute is required')
        if not self.action:
            raise InvalidPolicy(f'{self.policy_id}: action must not be empty')

    def attributes(self, element):
        return getattr(self, element)

    def contains(self, element, attribute):
        return attribute in self.attributes(element)

    def body(self):
        """Everything except the id; equal bodies mean equivalent policies."""
        return (tuple(self.subject.items()), self.action, tuple(self.object.items()),
                tuple(self.environment.items()), self.effect.value)

    def to_dict(self):
        return {'id': self.policy_id, 'subject': dict(self.subject), 'action': self.action,
                'object': dict(self.object), 'environment': dict(self.environment),
                'effect': self.effect.value}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(data['id'], data.get('subject', {}), data.get('action', REACH),
                       data.get('object', {}), data.get('environment', {}),
                       data.get('effect', 'permit'))
        except KeyError as e:
            raise InvalidPolicy(f'policy is missing {e}') from None


def normalize(policy):
    # construction already canonicalises; rebuilding is a no-op on normal form
    return AbstractPolicy.from_dict(policy.to_dict())


def load_policies(doc):
    policies = [AbstractPolicy.from_dict(p) for p in doc.get('policies', [])]
    ids = [p.policy_id for p in policies]
    if len(ids) != len(set(ids)):
        raise InvalidPolicy('duplicate policy ids')
    return policies


# ---------------------------------------------------------------------------
# Filtering rules
# ---------------------------------------------------------------------------

def parse_address(spec):
    """None for the wildcard, otherwise an IPv4Network (a host is a /32)."""
    spec = str(spec).strip()
    if spec in ('*', 'any', ''):
        return None
    try:
        return ipaddress.IPv4Network(spec, strict=True)
    except ValueError as e:
        raise InvalidRule(f'bad address {spec!r}: {e}') from None


def parse_ports(spec):
    """None for the wildcard, otherwise a tuple of inclusive (lo, hi) ranges."""
    if isinstance(spec, int):
        spec = str(spec)
    elif isinstance(spec, (list, tuple)):
        spec = ','.join(str(p) for p in spec)
    spec = str(spec).strip()
    if spec in ('*', 'any'):
        return None
    ranges = []
    for part in spec.split(','):
        part = part.strip()
        lo, sep, hi = part.partition('-')
        try:
            lo = int(lo)
            hi = int(hi) if sep else lo
        except ValueError:
            raise InvalidRule(f'bad port specification {spec!r}') from None
        if not 0 <= lo <= hi <= 65535:
            raise InvalidRule(f'port range {part!r} outside [0, 65535]')
        ranges.append((lo, hi))
    if not ranges:
        raise InvalidRule('empty port list')
    return tuple(ranges)


def format_ports(ranges):
    if ranges is None:
        return '*'
    return ','.join(str(lo) if lo == hi else f'{lo}-{hi}' for lo, hi in ranges)


def _in_ports(ranges, port):
    return ranges is None or any(lo <= port <= hi for lo, hi in ranges)


@dataclass(frozen=True)
class FilteringRule:
    src_ip: str = '*'
    src_port: str = '*'
    dst_ip: str = '*'
    dst_port: str = '*'
    proto: Proto = Proto.ANY
    action: Effect = Effect.PERMIT

    def __post_init__(self):
        src, dst = parse_address(self.src_ip), parse_address(self.dst_ip)
        sports, dports = parse_ports(self.src_port), parse_ports(self.dst_port)
        try:
            proto = self.proto if isinstance(self.proto, Proto) else Proto(str(self.proto).upper())
            action = self.action if isinstance(self.action, Effect) else Effect(str(self.action).lower())
        except ValueError:
            raise InvalidRule(f'bad protocol or action in {self.proto!r}/{self.action!r}') from None
        object.__setattr__(self, 'src_ip', '*' if src is None else _format_net(src))
        object.__setattr__(self, 'dst_ip', '*' if dst is None else _format_net(dst))
        object.__setattr__(self, 'src_port', format_ports(sports))
        object.__setattr__(self, 'dst_port', format_ports(dports))
        object.__setattr__(self, 'proto', proto)
        object.__setattr__(self, 'action', action)
        object.__setattr__(self, '_parsed', (src, sports, dst, dports))

    def matches(self, src_ip, src_port, dst_ip, dst_port, proto):
        src, sports, dst, dports = self._parsed
        if self.proto is not Proto.ANY and self.proto != proto:
            return False
        return ((src is None or ipaddress.IPv4Address(src_ip) in src) and _in_ports(sports, src_port)
                and (dst is None or ipaddress.IPv4Address(dst_ip) in dst) and _in_ports(dports, dst_port))

    def covers_src(self, ip, port):
        src, sports, _, _ = self._parsed
        return (src is None or ipaddress.IPv4Address(ip) in src) and _in_ports(sports, port)

    def covers_dst(self, ip, port, proto):
        _, _, dst, dports = self._parsed
        if self.proto is not Proto.ANY and self.proto != proto:
            return False
        return (dst is None or ipaddress.IPv4Address(ip) in dst) and _in_ports(dports, port)

    def sort_key(self):
        return (self.action.value, self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.proto.value)

    def label(self):
        return (f'{self.action.value} {self.src_ip}:{self.src_port} -> '
                f'{self.dst_ip}:{self.dst_port}/{self.proto.value}')

    def to_dict(self):
        return {'src_ip': self.src_ip, 'src_port': self.src_port, 'dst_ip': self.dst_ip,
                'dst_port': self.dst_port, 'proto': self.proto.value, 'action': self.action.value}

    @classmethod
    def from_dict(cls, data):
        return cls(data.get('src_ip', '*'), data.get('src_port', '*'), data.get('dst_ip', '*'),
                   data.get('dst_port', '*'), data.get('proto', 'ANY'), data.get('action', 'permit'))


def _format_net(net):
    return str(net.network_address) if net.prefixlen == 32 else str(net)


# ---------------------------------------------------------------------------
# System description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Host:
    host_id: str
    ips: tuple
    attributes: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Service:
    host_id: str
    name: str
    proto: Proto
    ports: tuple
    type: str = ''
    owner: str = ''

    @property
    def service_id(self):
        return f'{self.host_id}:{self.name}'


@dataclass(frozen=True)
class User:
    user_id: str
    host: str
    role: str = ''
    organization: str = ''


@dataclass(frozen=True)
class SystemDescription:
    hosts: tuple
    services: tuple = ()
    capabilities: dict = field(default_factory=dict)
    topology: tuple = ()
    firewalls: dict = field(default_factory=dict)
    users: tuple = ()
    environments: tuple = ()
    client_ports: tuple = (40000,)

    def __post_init__(self):
        host_ids = [h.host_id for h in self.hosts]
        if len(host_ids) != len(set(host_ids)):
            raise InvalidSystemDescription('duplicate host ids')
        seen_ips = {}
        for host in self.hosts:
            if not host.ips:
                raise InvalidSystemDescription(f'host {host.host_id} has no IP address')
            for ip in host.ips:
                try:
                    ipaddress.IPv4Address(ip)
                except ValueError:
                    raise InvalidSystemDescription(f'host {host.host_id}: bad IPv4 address {ip!r}') from None
                if seen_ips.setdefault(ip, host.host_id) != host.host_id:
                    raise InvalidSystemDescription(f'address {ip} is bound to two hosts')
        declared = set(host_ids)
        for service in self.services:
            if service.host_id not in declared:
                raise InvalidSystemDescription(f'service {service.name} references undeclared host {service.host_id}')
            if service.proto is Proto.ANY:
                raise InvalidSystemDescription(f'service {service.service_id} needs a concrete protocol')
        for user in self.users:
            if user.host not in declared:
                raise InvalidSystemDescription(f'user {user.user_id} sits on undeclared host {user.host}')
        for node, caps in self.capabilities.items():
            unknown = set(caps) - set(CAPABILITIES)
            if unknown:
                raise InvalidSystemDescription(f'{node}: unknown capabilities {sorted(unknown)}')
        for fw in self.firewalls:
            if 'filtering' not in self.capabilities.get(fw, ()):
                raise InvalidSystemDescription(f'firewall {fw} lacks the filtering capability')
        for port in self.client_ports:
            if not 0 <= port <= 65535:
                raise InvalidSystemDescription(f'client port {port} outside [0, 65535]')

    @property
    def nodes(self):
        return sorted(set(self.capabilities) | {h.host_id for h in self.hosts})

    def host(self, host_id):
        for h in self.hosts:
            if h.host_id == host_id:
                return h
        return None

    def host_of_ip(self, ip):
        for h in self.hosts:
            if ip in h.ips:
                return h.host_id
        return None

    def source_points(self):
        """Every (ip, port) a packet can originate from, in matrix order."""
        ips = sorted({ip for h in self.hosts for ip in h.ips}, key=ip_key)
        return [(ip, port) for ip in ips for port in sorted(set(self.client_ports))]

    def destination_points(self):
        """Every declared (ip, port, proto) service endpoint, in matrix order."""
        points = set()
        for service in self.services:
            for ip in self.host(service.host_id).ips:
                for port in service.ports:
                    points.add((ip, port, service.proto.value))
        return sorted(points, key=lambda p: (ip_key(p[0]), p[1], p[2]))

    def with_firewall_rules(self, fw, rules):
        firewalls = dict(self.firewalls)
        firewalls[fw] = tuple(rules)
        return replace(self, firewalls=firewalls)

    def with_filtering(self, node):
        capabilities = dict(self.capabilities)
        capabilities[node] = frozenset(capabilities.get(node, frozenset()) | {'filtering'})
        firewalls = dict(self.firewalls)
        firewalls.setdefault(node, ())
        return replace(self, capabilities=capabilities, firewalls=firewalls)

    def to_dict(self):
        host_ids = {h.host_id for h in self.hosts}
        return {
            'hosts': [{'id': h.host_id, 'ips': list(h.ips), 'attributes': dict(h.attributes),
                       'capabilities': sorted(self.capabilities.get(h.host_id, ()))} for h in self.hosts],
            'devices': [{'id': n, 'capabilities': sorted(self.capabilities[n])}
                        for n in sorted(self.capabilities) if n not in host_ids],
            'services': [{'host': s.host_id, 'name': s.name, 'proto': s.proto.value, 'ports': list(s.ports),
                          'type': s.type, 'owner': s.owner} for s in self.services],
            'users': [{'ID': u.user_id, 'Role': u.role, 'Organization': u.organization, 'host': u.host}
                      for u in self.users],
            'environments': [dict(e) for e in self.environments],
            'topology': [list(edge) for edge in self.topology],
            'firewalls': {fw: [r.to_dict() for r in rules] for fw, rules in sorted(self.firewalls.items())},
            'client_ports': list(self.client_ports),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            hosts, capabilities = [], {}
            for h in data['hosts']:
                hosts.append(Host(h['id'], tuple(h['ips']), dict(h.get('attributes', {}))))
                capabilities[h['id']] = frozenset(h.get('capabilities', ['endpoint']))
            for d in data.get('devices', []):
                if d['id'] in capabilities:
                    raise InvalidSystemDescription(f'node {d["id"]} declared twice')
                capabilities[d['id']] = frozenset(d.get('capabilities', ['routing']))
            services = tuple(
                Service(s['host'], s['name'], Proto(s.get('proto', 'TCP').upper()),
                        tuple(int(p) for p in s['ports']), s.get('type', s['name']), s.get('owner', ''))
                for s in data.get('services', []))
            users = tuple(User(u['ID'], u['host'], u.get('Role', ''), u.get('Organization', ''))
                          for u in data.get('users', []))
            firewalls = {fw: tuple(FilteringRule.from_dict(r) for r in rules)
                         for fw, rules in data.get('firewalls', {}).items()}
            return cls(
                hosts=tuple(hosts),
                services=services,
                capabilities=capabilities,
                topology=tuple(tuple(edge) for edge in data.get('topology', [])),
                firewalls=firewalls,
                users=users,
                environments=tuple(dict(e) for e in data.get('environments', [])),
                client_ports=tuple(int(p) for p in data.get('client_ports', [40000])),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidSystemDescription(f'system description is malformed: {e}') from None
        except InvalidRule as e:
            raise InvalidSystemDescription(f'deployed rule is malformed: {e}') from None


# ---------------------------------------------------------------------------
# Scope enumeration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Entity:
    name: str
    attributes: dict        # attribute -> frozenset of values it answers to
    host: str | None = None
    service: Service | None = None

    def satisfies(self, conditions):
        return all(value in self.attributes.get(attr, ()) for attr, value in conditions.items())


class AttributeUniverse:
    """Declared subjects, objects and environments of one system description."""

    def __init__(self, sd, policies=()):
        self.subjects = [
            Entity(h.host_id, {'ID': frozenset({h.host_id}),
                               'Role': frozenset({h.attributes['Role']}) if h.attributes.get('Role') else frozenset(),
                               'Organization': frozenset({h.attributes['Organization']})
                               if h.attributes.get('Organization') else frozenset()},
                   host=h.host_id)
            for h in sd.hosts
        ] + [
            Entity(u.user_id, {'ID': frozenset({u.user_id}), 'Role': frozenset({u.role}),
                               'Organization': frozenset({u.organization})}, host=u.host)
            for u in sd.users
        ]
        self.objects = [
            Entity(s.service_id, {'ID': frozenset({s.host_id, s.service_id}), 'Type': frozenset({s.type}),
                                  'Owner': frozenset({s.owner or sd.host(s.host_id).attributes.get('Owner', '')})},
                   host=s.host_id, service=s)
            for s in sd.services
        ]
        if sd.environments:
            envs = [{k: frozenset({str(v)}) for k, v in e.items()} for e in sd.environments]
        else:
            envs = self._derived_environments(policies)
        self.environments = [Entity(f'env-{i}', e) for i, e in enumerate(envs)]

    @staticmethod
    def _derived_environments(policies):
        # every combination of the values policies mention, plus "unspecified"
        axes = []
        for attr in ELEMENT_ATTRIBUTES['environment']:
            values = sorted({p.environment[attr] for p in policies if attr in p.environment})
            axes.append([(attr, v) for v in values] + [(attr, None)])
        return [{attr: frozenset({v}) if v is not None else frozenset() for attr, v in combo}
                for combo in itertools.product(*axes)]

    def matching(self, element, conditions):
        pool = {'subject': self.subjects, 'object': self.objects, 'environment': self.environments}[element]
        return frozenset(i for i, e in enumerate(pool) if e.satisfies(conditions))

    def scope(self, policy):
        return tuple(self.matching(element, policy.attributes(element)) for element in ELEMENTS)

    def reach_pairs(self, policy):
        """Sorted (subject host, service) pairs a reach policy talks about."""
        subjects, objects, environments = self.scope(policy)
        if not environments:
            return []
        pairs = {(self.subjects[i].host, self.objects[j].service) for i in subjects for j in objects}
        return sorted(pairs, key=lambda p: (p[0], p[1].service_id))


@dataclass(frozen=True, order=True)
class PolicyAnomaly:
    kind: str
    policy_ids: tuple

    def to_dict(self):
        return {'kind': self.kind, 'policies': list(self.policy_ids)}


@dataclass(frozen=True, order=True)
class PolicyConflict:
    first: str
    second: str

    def to_dict(self):
        return {'policies': [self.first, self.second]}


def _attr_subsumes(broad, narrow):
    """True when every condition of ``broad`` also appears in ``narrow``."""
    return all(set(broad.attributes(e).items()) <= set(narrow.attributes(e).items()) for e in ELEMENTS)


def _scope_subset(inner, outer):
    return all(a and a <= b for a, b in zip(inner, outer))


def detect_policy_anomalies(policies, universe=None):
    policies = [normalize(p) for p in policies]
    scopes = {p.policy_id: universe.scope(p) for p in policies} if universe is not None else {}
    found = set()
    for a, b in itertools.combinations(policies, 2):
        if a.body() == b.body():
            found.add(PolicyAnomaly('equivalence', tuple(sorted((a.policy_id, b.policy_id)))))
            continue
        if a.action != b.action or a.effect != b.effect:
            continue
        for broad, narrow in ((a, b), (b, a)):
            redundant = _attr_subsumes(broad, narrow)
            if not redundant and universe is not None:
                inner, outer = scopes[narrow.policy_id], scopes[broad.policy_id]
                redundant = _scope_subset(inner, outer) and inner != outer
            if redundant:
                found.add(PolicyAnomaly('redundancy', (narrow.policy_id, broad.policy_id)))
    anomalies = sorted(found)
    for anomaly in anomalies:
        log.info('policy %s: %s', anomaly.kind, ' / '.join(anomaly.policy_ids))
    return anomalies


def detect_conflicts(policies, universe):
    scopes = {p.policy_id: universe.scope(p) for p in policies}
    found = set()
    for a, b in itertools.combinations(policies, 2):
        if a.action != b.action or a.effect == b.effect:
            continue
        if all(x & y for x, y in zip(scopes[a.policy_id], scopes[b.policy_id])):
            found.add(PolicyConflict(*sorted((a.policy_id, b.policy_id))))
    conflicts = sorted(found)
    for conflict in conflicts:
        log.info('policy conflict: %s vs %s', conflict.first, conflict.second)
    return conflicts
