"""Reachability analysis of deployed firewall rules against reach policies.

Policies are refined into permit rules for every firewall on a
subject-object path. Both the generated and the deployed rule sets are
expanded over the declared universe of the system description (source
points are host IPs times client ports, destinations are declared service
endpoints), composed into 0/1 reachability matrices and compared cell by
cell.

Deployed rule lists are first-match with an implicit trailing deny-all.
"""
import logging
from dataclasses import dataclass, field
from itertools import chain

import networkx as nx
import numpy as np
import pandas as pd

from errors import (DimensionMismatch, InvalidSystemDescription, PathLimitExceeded, StaleRemediation,
                    UnknownEndpoint)
from policies import Effect, FilteringRule, Proto
from helpers import ip_key

log = logging.getLogger(__name__)

DEFAULT_PATH_LIMIT = 64

ANOMALY = 'anomaly'
SECURITY_ISSUE = 'security_issue'
NOT_ENFORCEABLE = 'not_enforceable'


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

def build_topology(sd):
    graph = nx.Graph()
    for node in sd.nodes:
        host = sd.host(node)
        graph.add_node(node, capabilities=tuple(sorted(sd.capabilities.get(node, ()))),
                       ips=host.ips if host else (), firewall=node in sd.firewalls)
    for edge in sorted(tuple(sorted(e)) for e in sd.topology):
        if len(edge) != 2:
            raise InvalidSystemDescription(f'topology edge {edge!r} must join two nodes')
        a, b = edge
        for end in (a, b):
            if end not in graph:
                raise InvalidSystemDescription(f'topology edge {a}-{b} references undeclared node {end}')
        graph.add_edge(a, b)
    if len(graph) > 1 and not nx.is_connected(graph):
        raise InvalidSystemDescription('topology is not connected')
    return graph


def simple_paths(graph, source, target, limit=DEFAULT_PATH_LIMIT):
    paths = []
    for path in nx.all_simple_paths(graph, source, target):
        if len(paths) == limit:
            raise PathLimitExceeded(f'more than {limit} simple paths from {source} to {target}')
        paths.append(tuple(path))
    return sorted(paths, key=lambda p: (len(p), p))


def firewalls_on(path, sd):
    return [node for node in path if node in sd.firewalls]


# ---------------------------------------------------------------------------
# Findings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Finding:
    kind: str
    firewall_id: str | None = None
    source: tuple | None = None       # (ip, port), or subject host for not_enforceable
    destination: tuple | None = None  # (ip, port, proto), or service id for not_enforceable
    policy_id: str | None = None
    detail: str = ''
    paths: tuple = ()

    def to_dict(self):
        out = {'kind': self.kind}
        if self.kind == NOT_ENFORCEABLE:
            out.update(policy=self.policy_id, subject=self.source, object=self.destination,
                       uncovered_paths=[list(p) for p in self.paths])
        else:
            ip, port = self.source
            dip, dport, proto = self.destination
            out.update(firewall=self.firewall_id, source=f'{ip}:{port}', destination=f'{dip}:{dport}/{proto}')
        out['detail'] = self.detail
        return out


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

def _check_endpoints(policy, universe):
    subject_id = policy.subject.get('ID')
    if subject_id is not None and not any(subject_id in e.attributes['ID'] for e in universe.subjects):
        raise UnknownEndpoint(f'{policy.policy_id}: subject {subject_id!r} is not declared')
    object_id = policy.object.get('ID')
    if object_id is not None and not any(object_id in e.attributes['ID'] for e in universe.objects):
        raise UnknownEndpoint(f'{policy.policy_id}: object {object_id!r} is not declared')


def _suppressed_pairs(policies, universe, resolutions):
    """Pairs a permit loses to a deny policy that won their conflict."""
    by_id = {p.policy_id: p for p in policies}
    suppressed = {}
    for r in resolutions:
        winner = by_id.get(r.chosen)
        loser = by_id.get(r.second if r.chosen == r.first else r.first)
        if winner is None or loser is None:
            continue
        if winner.effect is Effect.DENY and loser.effect is Effect.PERMIT:
            suppressed.setdefault(loser.policy_id, set()).update(
                (host, service.service_id) for host, service in universe.reach_pairs(winner))
    return suppressed


def refine(policies, graph, sd, universe, resolutions=(), path_limit=DEFAULT_PATH_LIMIT):
    """Return ({firewall: generated rules}, [not_enforceable findings])."""
    generated = {fw: set() for fw in sd.firewalls}
    findings = []
    suppressed = _suppressed_pairs(policies, universe, resolutions)
    for policy in sorted(policies, key=lambda p: p.policy_id):
        _check_endpoints(policy, universe)
        if policy.effect is not Effect.PERMIT:
            continue
        lost = suppressed.get(policy.policy_id, set())
        for host_id, service in universe.reach_pairs(policy):
            if (host_id, service.service_id) in lost or host_id == service.host_id:
                continue
            paths = simple_paths(graph, host_id, service.host_id, path_limit)
            uncovered = [p for p in paths if not firewalls_on(p, sd)]
            rules = [FilteringRule(sip, '*', dip, list(service.ports), service.proto, Effect.PERMIT)
                     for sip in sd.host(host_id).ips for dip in sd.host(service.host_id).ips]
            for path in paths:
                for fw in firewalls_on(path, sd):
                    generated[fw].update(rules)
            if uncovered:
                finding = Finding(NOT_ENFORCEABLE, source=host_id, destination=service.service_id,
                                  policy_id=policy.policy_id, paths=tuple(uncovered),
                                  detail=f'{len(uncovered)} of {len(paths)} paths cross no firewall')
                log.warning('policy %s not enforceable for %s -> %s', policy.policy_id, host_id, service.service_id)
                findings.append(finding)
    return {fw: tuple(sorted(rules, key=FilteringRule.sort_key)) for fw, rules in sorted(generated.items())}, findings


# ---------------------------------------------------------------------------
# Expansion, composition, analysis
# ---------------------------------------------------------------------------

def expand(rules, sd):
    """Concrete single-valued rules over the declared universe, order kept."""
    sources = sd.source_points()
    destinations = sd.destination_points()
    out = []
    for rule in rules:
        srcs = [s for s in sources if rule.covers_src(*s)]
        if not srcs:
            continue
        dsts = [d for d in destinations if rule.covers_dst(d[0], d[1], Proto(d[2]))]
        for sip, sport in srcs:
            for dip, dport, proto in dsts:
                out.append(FilteringRule(sip, sport, dip, dport, proto, rule.action))
    return out


def packet_of(rule):
    return rule.src_ip, int(rule.src_port), rule.dst_ip, int(rule.dst_port), rule.proto.value


def decisions(expanded):
    """First-match verdicts of concrete rules: packet -> permitted."""
    verdict = {}
    for rule in expanded:
        verdict.setdefault(packet_of(rule), rule.action is Effect.PERMIT)
    return verdict


def first_match_permits(expanded):
    """Equivalent permit-only rule set of a first-match concrete list."""
    verdict = decisions(expanded)
    seen, out = set(), []
    for rule in expanded:
        packet = packet_of(rule)
        if verdict[packet] and packet not in seen:
            seen.add(packet)
            out.append(FilteringRule(*packet, action=Effect.PERMIT))
    return out


def _source_key(point):
    return ip_key(point[0]), point[1]


def _destination_key(point):
    return ip_key(point[0]), point[1], point[2]


@dataclass
class ReachabilityMatrix:
    firewall_id: str
    rows: tuple
    columns: tuple
    cells: np.ndarray = field(repr=False)

    def to_frame(self):
        return pd.DataFrame(self.cells,
                            index=[f'{ip}:{port}' for ip, port in self.rows],
                            columns=[f'{ip}:{port}/{proto}' for ip, port, proto in self.columns])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index_label='source', lineterminator='\n')


def compose(generated, deployed, firewall_id):
    g_verdict, d_verdict = decisions(generated), decisions(deployed)
    packets = set(g_verdict) | set(d_verdict)
    rows = tuple(sorted({p[:2] for p in packets}, key=_source_key))
    columns = tuple(sorted({p[2:] for p in packets}, key=_destination_key))

    def matrix(verdict):
        cells = np.zeros((len(rows), len(columns)), dtype=np.int8)
        for i, s in enumerate(rows):
            for j, d in enumerate(columns):
                if verdict.get(s + d, False):
                    cells[i, j] = 1
        return ReachabilityMatrix(firewall_id, rows, columns, cells)

    return matrix(g_verdict), matrix(d_verdict)


def analyze(m_g, m_d):
    if m_g.rows != m_d.rows or m_g.columns != m_d.columns or m_g.cells.shape != m_d.cells.shape:
        raise DimensionMismatch(f'{m_g.firewall_id}: generated and deployed matrices are not aligned')
    delta = ReachabilityMatrix(m_g.firewall_id, m_g.rows, m_g.columns,
                               m_g.cells.astype(np.int8) - m_d.cells.astype(np.int8))
    findings = []
    for i, j in zip(*np.nonzero(delta.cells)):
        source, destination = m_g.rows[i], m_g.columns[j]
        if delta.cells[i, j] > 0:
            kind, detail = ANOMALY, 'policy traffic is dropped by the deployed rules'
        else:
            kind, detail = SECURITY_ISSUE, 'deployed rules permit traffic no policy allows'
        finding = Finding(kind, m_g.firewall_id, source, destination, detail=detail)
        log.warning('%s on %s: %s:%d -> %s:%d/%s', kind, m_g.firewall_id, *source, *destination)
        findings.append(finding)
    return delta, findings


@dataclass
class ReachabilityReport:
    generated: dict
    matrices: dict          # firewall -> (generated, deployed, delta)
    findings: list
    open_flows: list = field(default_factory=list)

    @property
    def counts(self):
        out = {ANOMALY: 0, SECURITY_ISSUE: 0, NOT_ENFORCEABLE: 0}
        for f in self.findings:
            out[f.kind] += 1
        return out

    def to_dict(self):
        return {
            'semantics': {'deployed_rules': 'first-match, implicit deny-all',
                          'enforceable_when': 'every simple subject-object path crosses a firewall'},
            'counts': self.counts,
            'generated_rules': {fw: [r.to_dict() for r in rules] for fw, rules in self.generated.items()},
            'findings': [f.to_dict() for f in self.findings],
            'open_flows': list(self.open_flows),
        }


def analyze_system(policies, sd, universe, resolutions=(), path_limit=DEFAULT_PATH_LIMIT):
    graph = build_topology(sd)
    generated, findings = refine(policies, graph, sd, universe, resolutions, path_limit)
    matrices = {}
    for fw in sorted(sd.firewalls):
        g_expanded = expand(generated.get(fw, ()), sd)
        d_expanded = first_match_permits(expand(sd.firewalls[fw], sd))
        m_g, m_d = compose(g_expanded, d_expanded, fw)
        delta, fw_findings = analyze(m_g, m_d)
        matrices[fw] = (m_g, m_d, delta)
        findings.extend(fw_findings)
    log.info('reachability: %d finding(s) over %d firewall(s)', len(findings), len(matrices))
    return ReachabilityReport(generated, matrices, findings)


# ---------------------------------------------------------------------------
# Remediation and reaction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Suggestion:
    action: str                 # add_rule / remove_rule / install_filtering
    target: str                 # firewall or node id
    rule: FilteringRule | None = None
    index: int | None = None
    rules: tuple = ()
    reason: str = ''

    def to_dict(self):
        out = {'action': self.action, 'target': self.target}
        if self.rule is not None:
            out['rule'] = self.rule.to_dict()
        if self.index is not None:
            out['index'] = self.index
        if self.action == 'install_filtering':
            out['rules'] = [r.to_dict() for r in self.rules]
        out['reason'] = self.reason
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(data['action'], data['target'],
                   FilteringRule.from_dict(data['rule']) if 'rule' in data else None,
                   data.get('index'),
                   tuple(FilteringRule.from_dict(r) for r in data.get('rules', [])),
                   data.get('reason', ''))


@dataclass(frozen=True)
class Remediation:
    suggestions: tuple = ()

    def __len__(self):
        return len(self.suggestions)

    def to_dict(self):
        return {'suggestions': [s.to_dict() for s in self.suggestions]}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(Suggestion.from_dict(s) for s in data.get('suggestions', [])))


def _first_match_index(rules, packet):
    for i, rule in enumerate(rules):
        if rule.matches(packet[0], packet[1], packet[2], packet[3], Proto(packet[4])):
            return i
    return None


def _install_node(finding, graph):
    """Interior node shared by every uncovered path, nearest the object; else the object host."""
    paths = finding.paths
    common = set(paths[0][1:-1]).intersection(*(set(p[1:-1]) for p in paths[1:]))
    object_host = paths[0][-1]
    if not common:
        return object_host
    lengths = nx.single_source_shortest_path_length(graph, object_host)
    return min(common, key=lambda n: (lengths.get(n, len(graph)), n))


def remediate(findings, sd, generated, refiner=None):
    """Ordered suggestions whose application removes every finding.

    ``refiner(sd)`` regenerates rule sets for a candidate description; it is
    needed to deploy rules on newly installed filtering nodes.
    """
    suggestions = []
    graph = build_topology(sd) if any(f.kind == NOT_ENFORCEABLE for f in findings) else None
    install = sorted({_install_node(f, graph) for f in findings if f.kind == NOT_ENFORCEABLE})
    if install:
        candidate = sd
        for node in install:
            candidate = candidate.with_filtering(node)
        regenerated = refiner(candidate)[0] if refiner is not None else {}
        for node in install:
            suggestions.append(Suggestion('install_filtering', node, rules=tuple(regenerated.get(node, ())),
                                          reason='policy traffic crosses no filtering device'))

    by_firewall = {}
    for f in findings:
        if f.kind != NOT_ENFORCEABLE:
            by_firewall.setdefault(f.firewall_id, []).append(f)
    for fw in sorted(by_firewall):
        deployed = list(sd.firewalls[fw])
        wanted = decisions(expand(generated.get(fw, ()), sd))
        adds, removals = [], {}
        for f in by_firewall[fw]:
            packet = f.source + f.destination
            if f.kind == ANOMALY:
                adds.append(Suggestion('add_rule', fw, FilteringRule(*packet, action=Effect.PERMIT),
                                       reason='restore traffic a policy requires'))
            else:
                removals.setdefault(_first_match_index(deployed, packet), []).append(packet)
        kept = list(range(len(deployed)))
        for index in sorted(removals):
            trial = [i for i in kept if i != index]
            before = decisions(expand([deployed[i] for i in kept], sd))
            after = decisions(expand([deployed[i] for i in trial], sd))
            changed = {p for p in set(before) | set(after) if before.get(p, False) != after.get(p, False)}
            # earlier accepted removals stay applied while judging this one
            if (all(after.get(p, False) == wanted.get(p, False) for p in changed)
                    and not any(after.get(p, False) for p in removals[index])):
                kept = trial
                suggestions.append(Suggestion('remove_rule', fw, deployed[index], index,
                                              reason='rule only admits traffic no policy allows'))
            else:
                for packet in removals[index]:
                    adds.append(Suggestion('add_rule', fw, FilteringRule(*packet, action=Effect.DENY),
                                           reason=f'rule {index} also carries permitted traffic'))
        suggestions.extend(adds)
    for s in suggestions:
        log.info('remediation: %s on %s%s', s.action, s.target, f' ({s.rule.label()})' if s.rule else '')
    return Remediation(tuple(suggestions))


def react(sd, remediation):
    """Apply a remediation to a copy of the system description."""
    for s in remediation.suggestions:
        if s.action == 'install_filtering':
            if s.target in sd.firewalls:
                raise StaleRemediation(f'{s.target} already filters traffic')
            sd = sd.with_filtering(s.target).with_firewall_rules(s.target, s.rules)

    removals, adds = {}, {}
    for s in remediation.suggestions:
        if s.action == 'remove_rule':
            removals.setdefault(s.target, []).append(s)
        elif s.action == 'add_rule':
            adds.setdefault(s.target, []).append(s.rule)
        elif s.action != 'install_filtering':
            raise StaleRemediation(f'unknown remediation action {s.action!r}')

    for fw in sorted(set(removals) | set(adds)):
        if fw not in sd.firewalls:
            raise StaleRemediation(f'remediation targets unknown firewall {fw}')
        rules = list(sd.firewalls[fw])
        for s in sorted(removals.get(fw, []), key=lambda s: s.index, reverse=True):
            if s.index is None or not 0 <= s.index < len(rules) or rules[s.index] != s.rule:
                raise StaleRemediation(f'{fw}: rule {s.index} is no longer {s.rule.label()}')
            del rules[s.index]
        sd = sd.with_firewall_rules(fw, adds.get(fw, []) + rules)
    return sd


# ---------------------------------------------------------------------------
# Equivalent firewall
# ---------------------------------------------------------------------------

def _path_permits(sd, path, packet):
    for fw in firewalls_on(path, sd):
        index = _first_match_index(sd.firewalls[fw], packet)
        if index is None or sd.firewalls[fw][index].action is not Effect.PERMIT:
            return False
    return True


def open_flows(sd, graph=None, path_limit=DEFAULT_PATH_LIMIT):
    """End-to-end flows some path delivers through every firewall on it."""
    graph = graph if graph is not None else build_topology(sd)
    destinations = sd.destination_points()
    flows = []
    for host in sorted(sd.hosts, key=lambda h: h.host_id):
        for sip, sport in (s for s in sd.source_points() if s[0] in host.ips):
            for dip, dport, proto in destinations:
                target = sd.host_of_ip(dip)
                if target == host.host_id:
                    continue
                packet = (sip, sport, dip, dport, proto)
                if any(_path_permits(sd, p, packet) for p in simple_paths(graph, host.host_id, target, path_limit)):
                    flows.append({'host': host.host_id, 'source': f'{sip}:{sport}',
                                  'destination': f'{dip}:{dport}/{proto}'})
    return flows


def data_path_open(sd, src_host, dst_ip, port, proto, graph=None, path_limit=DEFAULT_PATH_LIMIT):
    graph = graph if graph is not None else build_topology(sd)
    host = sd.host(src_host)
    target = sd.host_of_ip(dst_ip)
    if host is None or target is None:
        raise UnknownEndpoint(f'unknown flow endpoint {src_host} -> {dst_ip}')
    paths = simple_paths(graph, src_host, target, path_limit)
    return any(_path_permits(sd, path, (sip, sport, dst_ip, port, proto))
               for sip in host.ips for sport in sorted(set(sd.client_ports)) for path in paths)


def flatten_matrices(matrices):
    """Iterate (firewall, label, matrix) for report writers."""
    return chain.from_iterable(
        ((fw, 'generated', g), (fw, 'deployed', d), (fw, 'delta', delta))
        for fw, (g, d, delta) in sorted(matrices.items()))
