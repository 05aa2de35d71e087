import ipaddress
import random

import networkx as nx
import numpy as np
import pytest

from ahp import Resolution
from dam import POLICIES, SYSTEM
from errors import (DimensionMismatch, InvalidSystemDescription, PathLimitExceeded, StaleRemediation,
                    UnknownEndpoint)
from policies import AttributeUniverse, Effect, FilteringRule, SystemDescription, load_policies
from reachability import (ANOMALY, NOT_ENFORCEABLE, SECURITY_ISSUE, Remediation, Suggestion, analyze,
                          analyze_system, build_topology, compose, data_path_open, decisions, expand,
                          first_match_permits, open_flows, react, refine, remediate, simple_paths)

DAM_RESOLUTION = Resolution('viewer-deny-field', 'vis-telemetry', 'vis-telemetry', (0.42, 0.58))


@pytest.fixture
def sd():
    return SystemDescription.from_dict(SYSTEM)


@pytest.fixture
def policies():
    return load_policies({'policies': POLICIES})


def refiner_for(policies, resolutions=()):
    def regenerate(candidate):
        universe = AttributeUniverse(candidate, policies)
        return refine(policies, build_topology(candidate), candidate, universe, resolutions)
    return regenerate


def test_topology_checks(sd):
    graph = build_topology(sd)
    assert graph.number_of_nodes() == 7
    assert simple_paths(graph, 'vis-station', 'sensor-1') == [
        ('vis-station', 'lan-switch', 'fw1', 'field-switch', 'sensor-1')]
    doc = sd.to_dict()
    doc['topology'].append(['fw1', 'ghost'])
    with pytest.raises(InvalidSystemDescription):
        build_topology(SystemDescription.from_dict(doc))
    doc = sd.to_dict()
    doc['topology'] = [edge for edge in doc['topology'] if 'sensor-2' not in edge]
    with pytest.raises(InvalidSystemDescription):
        build_topology(SystemDescription.from_dict(doc))


def test_path_limit(sd):
    doc = sd.to_dict()
    doc['topology'].append(['lan-switch', 'field-switch'])
    graph = build_topology(SystemDescription.from_dict(doc))
    assert len(simple_paths(graph, 'vis-station', 'sensor-1')) == 2
    with pytest.raises(PathLimitExceeded):
        simple_paths(graph, 'vis-station', 'sensor-1', limit=1)


def test_refinement_generates_policy_permits(sd, policies):
    universe = AttributeUniverse(sd, policies)
    generated, findings = refine(policies, build_topology(sd), sd, universe, [DAM_RESOLUTION])
    assert findings == []
    labels = [r.label() for r in generated['fw1']]
    assert len(labels) == 6
    assert 'permit 10.0.1.10:* -> 10.0.2.11:502/TCP' in labels
    assert 'permit 10.0.1.20:* -> 10.0.2.12:8443/TCP' in labels
    assert not any(label.startswith('permit 10.0.1.10:* -> 10.0.2.11:8443') for label in labels)


def test_winning_deny_suppresses_the_permit(sd, policies):
    universe = AttributeUniverse(sd, policies)
    deny_wins = Resolution('viewer-deny-field', 'vis-telemetry', 'viewer-deny-field', (0.7, 0.3))
    generated, _ = refine(policies, build_topology(sd), sd, universe, [deny_wins])
    assert all(r.src_ip != '10.0.1.10' for r in generated['fw1'])
    report = analyze_system(policies, sd, universe, [deny_wins])
    assert report.counts == {ANOMALY: 0, SECURITY_ISSUE: 3, NOT_ENFORCEABLE: 0}


def test_unknown_subject_id(sd, policies):
    policies = policies + load_policies({'policies': [{'id': 'ghost', 'subject': {'ID': 'nobody'}}]})
    universe = AttributeUniverse(sd, policies)
    with pytest.raises(UnknownEndpoint):
        refine(policies, build_topology(sd), sd, universe)


def test_expansion_keeps_rule_order(sd):
    rules = [FilteringRule('10.0.1.10', '*', '10.0.2.11', '8443', 'TCP', 'deny'),
             FilteringRule('10.0.1.10', '*', '10.0.2.0/24', '*', 'TCP', 'permit')]
    expanded = expand(rules, sd)
    assert [(r.dst_ip, r.dst_port, r.action.value) for r in expanded] == [
        ('10.0.2.11', '8443', 'deny'),
        ('10.0.2.11', '502', 'permit'), ('10.0.2.11', '8443', 'permit'),
        ('10.0.2.12', '502', 'permit'), ('10.0.2.12', '8443', 'permit'),
    ]
    verdict = decisions(expanded)
    assert verdict[('10.0.1.10', 40000, '10.0.2.11', 8443, 'TCP')] is False
    assert len(first_match_permits(expanded)) == 3


def test_dam_firewall_has_one_security_issue(sd, policies):
    report = analyze_system(policies, sd, AttributeUniverse(sd, policies), [DAM_RESOLUTION])
    assert report.counts == {ANOMALY: 0, SECURITY_ISSUE: 1, NOT_ENFORCEABLE: 0}
    [finding] = report.findings
    assert finding.firewall_id == 'fw1'
    assert finding.source == ('10.0.1.10', 40000)
    assert finding.destination == ('10.0.2.11', 8443, 'TCP')
    m_g, m_d, delta = report.matrices['fw1']
    assert m_g.rows == (('10.0.1.10', 40000), ('10.0.1.20', 40000))
    assert delta.cells.tolist() == [[0, -1, 0, 0], [0, 0, 0, 0]]
    assert m_d.cells.sum() == 7
    frame = delta.to_frame()
    assert frame.loc['10.0.1.10:40000', '10.0.2.11:8443/TCP'] == -1


def test_missing_permit_is_an_anomaly(sd, policies):
    rules = list(sd.firewalls['fw1'])
    sd = sd.with_firewall_rules('fw1', rules[:1])
    report = analyze_system(policies, sd, AttributeUniverse(sd, policies), [DAM_RESOLUTION])
    assert report.counts[ANOMALY] == 4
    remediation = remediate(report.findings, sd, report.generated)
    assert [s.action for s in remediation.suggestions] == ['add_rule'] * 4
    fixed = react(sd, remediation)
    assert analyze_system(policies, fixed, AttributeUniverse(fixed, policies), [DAM_RESOLUTION]).findings == []


def _permit(dport):
    return FilteringRule('10.0.0.1', 40000, '10.0.0.2', dport, 'TCP', Effect.PERMIT)


def test_compose_lines_up_generated_and_deployed():
    m_g, m_d = compose([_permit(80), _permit(443)], [_permit(80)], 'fw1')
    assert m_g.rows == m_d.rows == (('10.0.0.1', 40000),)
    assert m_g.columns == (('10.0.0.2', 80, 'TCP'), ('10.0.0.2', 443, 'TCP'))
    assert m_g.cells.tolist() == [[1, 1]]
    assert m_d.cells.tolist() == [[1, 0]]
    delta, findings = analyze(m_g, m_d)
    assert delta.cells.tolist() == [[0, 1]]
    assert [(f.kind, f.destination) for f in findings] == [(ANOMALY, ('10.0.0.2', 443, 'TCP'))]


def test_identical_rule_sets_have_no_findings():
    m_g, m_d = compose([_permit(80)], [_permit(80)], 'fw1')
    assert m_g.cells.tolist() == m_d.cells.tolist() == [[1]]
    assert analyze(m_g, m_d)[1] == []
    empty_g, empty_d = compose([], [], 'fw1')
    assert empty_g.cells.shape == (0, 0)
    assert analyze(empty_g, empty_d)[1] == []


def test_dimension_mismatch(sd):
    a, _ = compose(expand([FilteringRule('10.0.1.10', '*', '*', '*', 'TCP', 'permit')], sd), [], 'fw1')
    b, _ = compose(expand([FilteringRule('10.0.1.20', '*', '*', '*', 'TCP', 'permit')], sd), [], 'fw1')
    with pytest.raises(DimensionMismatch):
        analyze(a, b)


def test_remediation_removes_the_misconfigured_rule(sd, policies):
    report = analyze_system(policies, sd, AttributeUniverse(sd, policies), [DAM_RESOLUTION])
    remediation = remediate(report.findings, sd, report.generated)
    [suggestion] = remediation.suggestions
    assert suggestion.action == 'remove_rule'
    assert suggestion.index == 2
    assert Remediation.from_dict(remediation.to_dict()) == remediation

    assert data_path_open(sd, 'vis-station', '10.0.2.11', 8443, 'TCP')
    reacted = react(sd, remediation)
    assert len(reacted.firewalls['fw1']) == 2
    assert not data_path_open(reacted, 'vis-station', '10.0.2.11', 8443, 'TCP')
    assert data_path_open(reacted, 'vis-station', '10.0.2.11', 502, 'TCP')
    post = analyze_system(policies, reacted, AttributeUniverse(reacted, policies), [DAM_RESOLUTION])
    assert post.findings == []
    assert len(sd.firewalls['fw1']) == 3


def test_shared_rule_gets_a_prepended_deny(sd, policies):
    rules = [FilteringRule('10.0.1.10', '*', '10.0.2.0/24', '502,8443', 'TCP', 'permit'),
             FilteringRule('10.0.1.20', '*', '10.0.2.0/24', '502,8443', 'TCP', 'permit')]
    sd = sd.with_firewall_rules('fw1', rules)
    report = analyze_system(policies, sd, AttributeUniverse(sd, policies), [DAM_RESOLUTION])
    assert report.counts[SECURITY_ISSUE] == 2
    remediation = remediate(report.findings, sd, report.generated)
    assert [(s.action, s.rule.action) for s in remediation.suggestions] == [('add_rule', Effect.DENY)] * 2
    reacted = react(sd, remediation)
    assert reacted.firewalls['fw1'][2:] == tuple(rules)
    assert analyze_system(policies, reacted, AttributeUniverse(reacted, policies), [DAM_RESOLUTION]).findings == []


def test_stale_remediation_is_refused(sd):
    stale = Remediation((Suggestion('remove_rule', 'fw1', FilteringRule('10.0.9.9'), 0),))
    with pytest.raises(StaleRemediation):
        react(sd, stale)
    with pytest.raises(StaleRemediation):
        react(sd, Remediation((Suggestion('add_rule', 'nowhere', FilteringRule()),)))


BYPASS = {
    'hosts': [
        {'id': 'a', 'ips': ['10.1.0.1']},
        {'id': 'b', 'ips': ['10.1.0.2']},
    ],
    'devices': [
        {'id': 'sw', 'capabilities': ['routing']},
        {'id': 'fw', 'capabilities': ['filtering', 'routing']},
    ],
    'services': [{'host': 'b', 'name': 'web', 'proto': 'TCP', 'ports': [80]}],
    'topology': [['a', 'sw'], ['sw', 'b'], ['sw', 'fw']],
    'firewalls': {'fw': []},
}


def test_unfiltered_path_gets_a_filtering_node():
    sd = SystemDescription.from_dict(BYPASS)
    policies = load_policies({'policies': [{'id': 'a-web', 'subject': {'ID': 'a'}, 'object': {'Type': 'web'}}]})
    report = analyze_system(policies, sd, AttributeUniverse(sd, policies))
    [finding] = report.findings
    assert finding.kind == NOT_ENFORCEABLE
    assert finding.paths == (('a', 'sw', 'b'),)
    assert finding.to_dict()['uncovered_paths'] == [['a', 'sw', 'b']]

    remediation = remediate(report.findings, sd, report.generated, refiner_for(policies))
    [install] = remediation.suggestions
    assert install.action == 'install_filtering'
    assert install.target == 'sw'
    assert [r.label() for r in install.rules] == ['permit 10.1.0.1:* -> 10.1.0.2:80/TCP']

    reacted = react(sd, remediation)
    assert 'filtering' in reacted.capabilities['sw']
    assert analyze_system(policies, reacted, AttributeUniverse(reacted, policies)).findings == []
    with pytest.raises(StaleRemediation):
        react(reacted, remediation)


def test_open_flows_match_the_first_match_semantics(sd):
    flows = open_flows(sd)
    assert {'host': 'vis-station', 'source': '10.0.1.10:40000', 'destination': '10.0.2.11:8443/TCP'} in flows
    assert len([f for f in flows if f['host'] == 'vis-station']) == 3
    # the field switch joins both sensors without a firewall in between
    assert {'host': 'sensor-1', 'source': '10.0.2.11:40000', 'destination': '10.0.2.12:502/TCP'} in flows
    assert len(flows) == 11


def test_matrix_csv(tmp_path, sd, policies):
    report = analyze_system(policies, sd, AttributeUniverse(sd, policies), [DAM_RESOLUTION])
    m_g, _, _ = report.matrices['fw1']
    path = tmp_path / 'fw1.generated.csv'
    m_g.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == 'source,10.0.2.11:502/TCP,10.0.2.11:8443/TCP,10.0.2.12:502/TCP,10.0.2.12:8443/TCP'
    assert lines[1] == '10.0.1.10:40000,1,0,1,0'
    assert m_g.cells.dtype == np.int8


def oracle_permits(rules, packet):
    """Brute-force first-match verdict straight from the rule text."""
    sip, sport, dip, dport, proto = packet

    def address_ok(spec, ip):
        return spec == '*' or ipaddress.ip_address(ip) in ipaddress.ip_network(spec)

    def port_ok(spec, port):
        if spec == '*':
            return True
        for part in spec.split(','):
            lo, _, hi = part.partition('-')
            if int(lo) <= port <= int(hi or lo):
                return True
        return False

    for rule in rules:
        d = rule.to_dict()
        if d['proto'] not in ('ANY', proto):
            continue
        if (address_ok(d['src_ip'], sip) and port_ok(d['src_port'], sport)
                and address_ok(d['dst_ip'], dip) and port_ok(d['dst_port'], dport)):
            return d['action'] == 'permit'
    return False


def random_rules(rng):
    return [FilteringRule(rng.choice(['*', '10.0.1.10', '10.0.1.20', '10.0.1.0/24', '10.0.2.11']),
                          '*',
                          rng.choice(['*', '10.0.2.11', '10.0.2.12', '10.0.2.0/24', '10.0.1.20']),
                          rng.choice(['*', '502', '8443', '502,8443', '500-600']),
                          rng.choice(['TCP', 'UDP', 'ANY']),
                          rng.choice(['permit', 'deny']))
            for _ in range(rng.randint(0, 6))]


@pytest.mark.parametrize('seed', range(20))
def test_expansion_agrees_with_packet_oracle(sd, seed):
    rules = random_rules(random.Random(seed))
    verdict = decisions(expand(rules, sd))
    for sip, sport in sd.source_points():
        for dip, dport, proto in sd.destination_points():
            packet = (sip, sport, dip, dport, proto)
            assert verdict.get(packet, False) == oracle_permits(rules, packet), packet


@pytest.mark.parametrize('seed', range(20))
def test_reaction_closes_every_finding(sd, policies, seed):
    sd = sd.with_firewall_rules('fw1', random_rules(random.Random(1000 + seed)))
    report = analyze_system(policies, sd, AttributeUniverse(sd, policies), [DAM_RESOLUTION])
    remediation = remediate(report.findings, sd, report.generated)
    reacted = react(sd, remediation)
    post = analyze_system(policies, reacted, AttributeUniverse(reacted, policies), [DAM_RESOLUTION])
    assert post.findings == []
    assert len(remediation) <= len(report.findings)


PORT_CHOICES = [22, 80, 443, 502]
ROLE_CHOICES = ['Operator', 'Viewer']
TYPE_CHOICES = ['telemetry', 'management', 'web']


def random_network(rng):
    """Firewalls and switches joined as a random tree plus a few extra links, hosts hanging off them."""
    firewalls = [f'fw{n}' for n in range(1, rng.randint(1, 3) + 1)]
    switches = [f'sw{n}' for n in range(1, rng.randint(0, 2) + 1)]
    devices = firewalls + switches
    rng.shuffle(devices)
    edges = {tuple(sorted((node, rng.choice(devices[:i])))) for i, node in enumerate(devices) if i}
    for _ in range(rng.randint(0, 3)):
        a, b = rng.sample(devices, 2) if len(devices) > 1 else (devices[0], devices[0])
        if a != b:
            edges.add(tuple(sorted((a, b))))

    hosts, services = [], []
    for n in range(1, rng.randint(2, 8) + 1):
        host_id = f'h{n}'
        ips = [f'10.0.{n}.{k}' for k in range(1, rng.randint(1, 2) + 1)]
        hosts.append({'id': host_id, 'ips': ips, 'capabilities': ['endpoint'],
                      'attributes': {'Role': rng.choice(ROLE_CHOICES)}})
        edges.add((host_id, rng.choice(devices)))
        for k in range(rng.randint(0, 2)):
            services.append({'host': host_id, 'name': f'svc{k}', 'proto': rng.choice(['TCP', 'UDP']),
                             'ports': sorted(rng.sample(PORT_CHOICES, rng.randint(1, 2))),
                             'type': rng.choice(TYPE_CHOICES)})

    sd = SystemDescription.from_dict({
        'hosts': hosts,
        'devices': [{'id': fw, 'capabilities': ['filtering', 'routing']} for fw in firewalls]
                   + [{'id': sw, 'capabilities': ['routing']} for sw in switches],
        'services': services,
        'topology': [list(edge) for edge in sorted(edges)],
        'firewalls': {fw: [] for fw in firewalls},
        'client_ports': sorted(rng.sample([40000, 50000], rng.randint(1, 2))),
    })

    addresses = [ip for h in hosts for ip in h['ips']]
    nets = sorted({ip.rsplit('.', 1)[0] + '.0/24' for ip in addresses})
    for fw in firewalls:
        rules = [FilteringRule(rng.choice(['*'] + addresses + nets), '*',
                               rng.choice(['*'] + addresses + nets),
                               rng.choice(['*', '22', '80,443', '400-600', '502']),
                               rng.choice(['TCP', 'UDP', 'ANY']),
                               rng.choice(['permit', 'deny']))
                 for _ in range(rng.randint(0, 6))]
        sd = sd.with_firewall_rules(fw, rules)

    policies = []
    served = sorted({s['host'] for s in services})
    for n in range(rng.randint(1, 4)):
        subject = ({'ID': rng.choice(hosts)['id']} if rng.random() < 0.5
                   else {'Role': rng.choice(ROLE_CHOICES)})
        obj = ({'ID': rng.choice(served)} if served and rng.random() < 0.3
               else {'Type': rng.choice(TYPE_CHOICES)})
        policies.append({'id': f'p{n}', 'subject': subject, 'object': obj, 'effect': 'permit'})
    return sd, load_policies({'policies': policies})


def oracle_generated(sd, policies):
    """Packets each firewall must pass: policy traffic on any simple path through it."""
    graph = nx.Graph()
    graph.add_edges_from(sd.topology)
    permitted = {fw: set() for fw in sd.firewalls}
    for policy in policies:
        for host in sd.hosts:
            if not all(host.host_id == v if k == 'ID' else host.attributes.get(k) == v
                       for k, v in policy.subject.items()):
                continue
            for service in sd.services:
                wanted = policy.object
                if 'ID' in wanted and wanted['ID'] not in (service.host_id, service.service_id):
                    continue
                if 'Type' in wanted and wanted['Type'] != service.type:
                    continue
                if service.host_id == host.host_id:
                    continue
                packets = {(sip, sport, dip, dport, service.proto.value)
                           for sip in host.ips for sport in sd.client_ports
                           for dip in sd.host(service.host_id).ips for dport in service.ports}
                for path in nx.all_simple_paths(graph, host.host_id, service.host_id):
                    for node in path:
                        if node in permitted:
                            permitted[node] |= packets
    return permitted


@pytest.mark.parametrize('seed', range(40))
def test_random_networks_match_the_packet_oracle(seed):
    sd, policies = random_network(random.Random(seed))
    report = analyze_system(policies, sd, AttributeUniverse(sd, policies))
    expected = oracle_generated(sd, policies)
    for fw, (m_g, m_d, delta) in report.matrices.items():
        disagreements = set()
        for sip, sport in sd.source_points():
            for dip, dport, proto in sd.destination_points():
                packet = (sip, sport, dip, dport, proto)
                gap = int(packet in expected[fw]) - int(oracle_permits(sd.firewalls[fw], packet))
                if gap:
                    disagreements.add((packet, gap))
        cells = {(m_g.rows[i] + m_g.columns[j], int(delta.cells[i, j])) for i, j in zip(*np.nonzero(delta.cells))}
        assert cells == disagreements, fw
        kinds = {(f.source + f.destination, f.kind) for f in report.findings if f.firewall_id == fw}
        assert kinds == {(p, ANOMALY if gap > 0 else SECURITY_ISSUE) for p, gap in disagreements}


@pytest.mark.parametrize('seed', range(40))
def test_random_networks_are_clean_after_reaction(seed):
    sd, policies = random_network(random.Random(seed))
    report = analyze_system(policies, sd, AttributeUniverse(sd, policies))
    remediation = remediate(report.findings, sd, report.generated, refiner_for(policies))
    reacted = react(sd, remediation)
    post = analyze_system(policies, reacted, AttributeUniverse(reacted, policies))
    assert post.findings == []
    assert len(remediation) <= len(report.findings)
