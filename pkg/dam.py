"""Hydroelectric dam model and the firmware-rewrite misuse case.

The turbine produces P = rho * eta * g * delta_h * Q with a constant head;
rotations grow linearly with power. Crossing either limit destroys the
turbine: the state latches and later readings are flagged post-failure.
"""
import logging
import os
import shutil
from dataclasses import dataclass, replace

from errors import InvalidParams
from events import Endpoint, NormalizedEvent
from helpers import ms_to_iso, write_json, write_lines
from policies import AbstractPolicy, SystemDescription

log = logging.getLogger(__name__)

BASE_TIME = 1704067200000       # 2024-01-01T00:00:00Z
STEP_MS = 1000
DURATION_MS = 30_000
SENSOR_IP = '10.0.2.11'
DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data')


@dataclass(frozen=True)
class DamState:
    delta_h: float = 100.0
    Q: float = 50.0
    eta: float = 0.9
    rho: float = 1000.0
    g: float = 10.0
    rpm: float = 300.0
    rpm_limit: float = 600.0
    power_limit: float = 100e6
    rpm_per_watt: float = 300 / 45e6
    ramp_rate: float = 70.0         # m3/s per second
    target_Q: float = 50.0
    destroyed: bool = False
    time: int = 0                   # ms since scenario start

    def __post_init__(self):
        for name in ('delta_h', 'Q', 'eta', 'rho', 'g', 'rpm', 'rpm_limit', 'power_limit',
                     'rpm_per_watt', 'ramp_rate', 'target_Q'):
            if getattr(self, name) < 0:
                raise InvalidParams(f'{name} must be non-negative')
        if not 0 < self.eta <= 1:
            raise InvalidParams('turbine efficiency must lie in (0, 1]')


def power(state):
    return state.rho * state.eta * state.g * state.delta_h * state.Q


def critical_flow(state):
    """Flow rate above which one of the two limits is exceeded."""
    per_unit = state.rho * state.eta * state.g * state.delta_h
    return min(state.power_limit / per_unit, state.rpm_limit / (state.rpm_per_watt * per_unit))


def _reading(state, event_type, severity, seq):
    attributes = {'Q': f'{state.Q:.3f}', 'P': f'{power(state):.1f}', 'rpm': f'{state.rpm:.1f}'}
    if state.destroyed and event_type != 'emergency':
        attributes['phase'] = 'post-failure'
    return NormalizedEvent(
        event_id=f'dam-{seq:06d}',
        timestamp=BASE_TIME + state.time,
        layer='physical_sensor',
        event_type=event_type,
        source=Endpoint(SENSOR_IP),
        severity=severity,
        attributes=attributes,
    )


def step(state, command=None, dt=STEP_MS, seq=0):
    """Advance the plant by ``dt`` ms; return the new state and its sensor events."""
    if dt <= 0:
        raise InvalidParams('step size must be positive')
    if state.destroyed:
        state = replace(state, time=state.time + dt)
        return state, [_reading(state, 'flow_rate_reading', 1, seq)]

    if command is not None and command.get('command') == 'set_Q':
        state = replace(state, target_Q=float(command['value']))
    delta = state.ramp_rate * dt / 1000
    q = state.Q
    if q < state.target_Q:
        q = min(state.target_Q, q + delta)
    elif q > state.target_Q:
        q = max(state.target_Q, q - delta)
    state = replace(state, Q=q, time=state.time + dt)
    state = replace(state, rpm=state.rpm_per_watt * power(state))

    events = [_reading(state, 'flow_rate_reading', 1, seq)]
    if state.rpm > state.rpm_limit or power(state) > state.power_limit:
        state = replace(state, destroyed=True)
        log.warning('turbine destroyed at t=%dms (Q=%.1f, P=%.0fW, rpm=%.0f)',
                    state.time, state.Q, power(state), state.rpm)
        events.append(_reading(state, 'emergency', 9, seq + 1))
    return state, events


def simulate(script, state=None, duration=DURATION_MS, dt=STEP_MS):
    """Run the plant over the physical commands of a script."""
    state = state or DamState()
    commands = [c for c in script if c['command'] == 'set_Q']
    events, seq = [], 1
    while state.time < duration:
        window = (state.time, state.time + dt)
        due = [c for c in commands if window[0] < c['at'] <= window[1]]
        if due and state.destroyed:
            log.info('command %s ignored after turbine failure', due[-1]['command'])
        state, out = step(state, due[-1] if due else None, dt, seq)
        events.extend(out)
        seq += len(out)
    return state, events


# ---------------------------------------------------------------------------
# Misuse case
# ---------------------------------------------------------------------------

SYSTEM = {
    'hosts': [
        {'id': 'vis-station', 'ips': ['10.0.1.10'], 'capabilities': ['endpoint'],
         'attributes': {'Role': 'Viewer', 'Organization': 'dam-operator'}},
        {'id': 'ctrl-station', 'ips': ['10.0.1.20'], 'capabilities': ['endpoint'],
         'attributes': {'Role': 'Operator', 'Organization': 'dam-operator'}},
        {'id': 'sensor-1', 'ips': ['10.0.2.11'], 'capabilities': ['endpoint'],
         'attributes': {'Role': 'Sensor', 'Organization': 'field-ops'}},
        {'id': 'sensor-2', 'ips': ['10.0.2.12'], 'capabilities': ['endpoint'],
         'attributes': {'Role': 'Sensor', 'Organization': 'field-ops'}},
    ],
    'devices': [
        {'id': 'lan-switch', 'capabilities': ['routing']},
        {'id': 'fw1', 'capabilities': ['filtering', 'routing']},
        {'id': 'field-switch', 'capabilities': ['routing']},
    ],
    'services': [
        {'host': 'sensor-1', 'name': 'telemetry', 'proto': 'TCP', 'ports': [502], 'type': 'telemetry', 'owner': 'field-ops'},
        {'host': 'sensor-1', 'name': 'mgmt', 'proto': 'TCP', 'ports': [8443], 'type': 'management', 'owner': 'field-ops'},
        {'host': 'sensor-2', 'name': 'telemetry', 'proto': 'TCP', 'ports': [502], 'type': 'telemetry', 'owner': 'field-ops'},
        {'host': 'sensor-2', 'name': 'mgmt', 'proto': 'TCP', 'ports': [8443], 'type': 'management', 'owner': 'field-ops'},
    ],
    'users': [
        {'ID': 'analyst', 'Role': 'Viewer', 'Organization': 'dam-operator', 'host': 'vis-station'},
    ],
    'topology': [
        ['vis-station', 'lan-switch'], ['ctrl-station', 'lan-switch'], ['lan-switch', 'fw1'],
        ['fw1', 'field-switch'], ['field-switch', 'sensor-1'], ['field-switch', 'sensor-2'],
    ],
    'firewalls': {
        'fw1': [
            {'src_ip': '10.0.1.10', 'dst_ip': '10.0.2.0/24', 'dst_port': '502', 'proto': 'TCP', 'action': 'permit'},
            {'src_ip': '10.0.1.20', 'dst_ip': '10.0.2.0/24', 'dst_port': '502,8443', 'proto': 'TCP', 'action': 'permit'},
            # misconfiguration: lets the visualization station reach sensor management
            {'src_ip': '10.0.1.10', 'dst_ip': '10.0.2.11', 'dst_port': '8443', 'proto': 'TCP', 'action': 'permit'},
        ],
    },
    'client_ports': [40000],
}

POLICIES = [
    {'id': 'vis-telemetry', 'subject': {'ID': 'vis-station'}, 'object': {'Type': 'telemetry'}, 'effect': 'permit'},
    {'id': 'ctrl-mgmt', 'subject': {'ID': 'ctrl-station'}, 'object': {'Type': 'management'}, 'effect': 'permit'},
    {'id': 'ctrl-telemetry', 'subject': {'ID': 'ctrl-station'}, 'object': {'Type': 'telemetry'}, 'effect': 'permit'},
    {'id': 'viewer-deny-field', 'subject': {'Role': 'Viewer'}, 'object': {'Owner': 'field-ops'}, 'effect': 'deny'},
]

SCRIPT = (
    [{'at': at, 'command': 'login', 'host': 'vis-station', 'target': 'ctrl-station', 'user': 'operator',
      'result': 'failure'} for at in range(10_000, 15_000, 1000)]
    + [{'at': 20_000, 'command': 'firmware_write', 'host': 'vis-station', 'target': 'sensor-1'},
       {'at': 21_000, 'command': 'set_Q', 'value': 190}]
)

FIRMWARE_PATH = ('vis-station', '10.0.2.11', 8443, 'TCP')
DEFINITIONS = ('grammars.json', 'probes.json', 'rules.json', 'hierarchy.json')


def _host_ip(host_id):
    return next(h['ips'][0] for h in SYSTEM['hosts'] if h['id'] == host_id)


def _service_port(host_id, name):
    return next(s['ports'][0] for s in SYSTEM['services'] if s['host'] == host_id and s['name'] == name)


def validate_script(script):
    times = [c['at'] for c in script]
    if times != sorted(times):
        raise InvalidParams('scenario commands must be in time order')
    return script


def sensor_line(event):
    attrs = ' '.join(f'{k}={v}' for k, v in event.attributes.items())
    return (f'{ms_to_iso(event.timestamp)} dam-sensor {event.event_type} src={event.source.ip} '
            f'{attrs} sev={event.severity}').encode('utf-8')


def it_lines(script):
    """Render login and firmware commands as auth and application log lines."""
    auth, app = [], []
    for c in script:
        ts = ms_to_iso(BASE_TIME + c['at'])
        src = _host_ip(c['host'])
        if c['command'] == 'login':
            auth.append(f'{ts} sshd auth_{c["result"]} src={src} dst={_host_ip(c["target"])} dport=22 '
                        f'user={c["user"]} sev=3'.encode('utf-8'))
        elif c['command'] == 'firmware_write':
            port = _service_port(c['target'], 'mgmt')
            app.append(f'{ts} scada-hmi firmware_write src={src} dst={_host_ip(c["target"])} dport={port} '
                       f'target={c["target"]} sev=8'.encode('utf-8'))
    return auth, app


def misuse_case():
    """Return (system description, policies, script, raw log corpus)."""
    sd = SystemDescription.from_dict(SYSTEM)
    policies = [AbstractPolicy.from_dict(p) for p in POLICIES]
    script = validate_script([dict(c) for c in SCRIPT])
    _, readings = simulate(script)
    auth, app = it_lines(script)
    corpus = {
        'auth.log': auth,
        'sensor.log': [sensor_line(e) for e in readings],
        'app.log': app,
    }
    return sd, policies, script, corpus


def pipeline_document(seed=7):
    return {
        'seed': seed,
        'grammars': 'grammars.json',
        'probes': 'probes.json',
        'rules': 'rules.json',
        'hierarchy': 'hierarchy.json',
        'policies': 'policies.json',
        'system': 'system.json',
        'streams': [
            {'id': 'auth.log', 'grammar': 'auth', 'path': 'logs/auth.log'},
            {'id': 'sensor.log', 'grammar': 'sensor', 'path': 'logs/sensor.log'},
            {'id': 'app.log', 'grammar': 'app', 'path': 'logs/app.log'},
        ],
        'res': {'n': 4, 'k': 3, 'faults': {'2': 'corrupt'}},
        'watch': {'host': FIRMWARE_PATH[0], 'ip': FIRMWARE_PATH[1], 'port': FIRMWARE_PATH[2],
                  'proto': FIRMWARE_PATH[3]},
        'out': 'out',
    }


def write_bundle(out_dir, seed=7):
    """Write the scenario as files the pipeline can consume on its own."""
    sd, policies, script, corpus = misuse_case()
    write_json(os.path.join(out_dir, 'system.json'), sd.to_dict())
    write_json(os.path.join(out_dir, 'policies.json'), {'policies': [p.to_dict() for p in policies]})
    write_json(os.path.join(out_dir, 'script.json'), {'commands': script})
    for stream, lines in corpus.items():
        write_lines(os.path.join(out_dir, 'logs', stream), lines)
    for name in DEFINITIONS:
        shutil.copyfile(os.path.join(DATA_DIR, name), os.path.join(out_dir, name))
    path = os.path.join(out_dir, 'pipeline.json')
    write_json(path, pipeline_document(seed))
    log.info('scenario bundle written to %s', out_dir)
    return path
