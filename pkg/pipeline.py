"""Closed-loop run: collect, correlate, sign, resolve, analyse, react.

Every stage reads and writes the artifacts of one output directory, so the
subcommands can be run one at a time or all together.
"""
import logging
import os
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

from ahp import Resolution, default_hierarchy, hierarchy_from_dict, resolve_conflicts
from collector import RawStream, load_grammars, load_probes, run_collector
from correlator import correlate, load_rules
from errors import ConfigurationError, SiemError
from events import Quarantine, read_alarms, read_events, serialize_alarm, serialize_event
from helpers import read_json, read_lines, resolve_path, write_json, write_lines
from policies import (AttributeUniverse, SystemDescription, detect_conflicts, detect_policy_anomalies,
                      load_policies)
from reachability import (DEFAULT_PATH_LIMIT, Remediation, analyze_system, build_topology, data_path_open,
                          flatten_matrices, open_flows, react, refine, remediate)
from storage import ResilientStore, ThresholdParams, VerificationKey, audit, build_nodes, dealer_keygen, sign_alarms

log = logging.getLogger(__name__)

ARTIFACTS = {
    'events': 'events.jsonl',
    'quarantine': 'quarantine.jsonl',
    'alarms': 'alarms.jsonl',
    'resolutions': 'resolutions.json',
    'findings_pre': 'findings_pre.json',
    'findings_post': 'findings_post.json',
    'remediation': 'remediation.json',
    'reacted': 'system.reacted.json',
    'store': 'res_store.bin',
    'key': 'res_key.json',
    'pem': 'res_key.pem',
    'dead_letter': 'dead_letter.jsonl',
    'audit': 'res_audit.json',
    'summary': 'summary.json',
    'error': 'error.json',
}

DEFAULTS = {
    'seed': 7,
    'key_bits': 512,
    'path_limit': DEFAULT_PATH_LIMIT,
    'out': 'out',
}


@dataclass
class PipelineConfig:
    base_dir: str
    out_dir: str
    seed: int | None
    grammars: str | None = None
    probes: str | None = None
    rules: str | None = None
    hierarchy: str | None = None
    policies: str | None = None
    system: str | None = None
    streams: list = field(default_factory=list)
    res: ThresholdParams = field(default_factory=lambda: ThresholdParams(4, 3))
    key_bits: int = 512
    faults: dict = field(default_factory=dict)
    path_limit: int = DEFAULT_PATH_LIMIT
    client_ports: tuple | None = None
    watch: dict | None = None
    source: str | None = None

    def artifact(self, name):
        return os.path.join(self.out_dir, ARTIFACTS[name])

    def load_grammars(self):
        return load_grammars(read_json(self.grammars))

    def load_probes(self):
        return load_probes(read_json(self.probes)) if self.probes else []

    def load_rules(self):
        return load_rules(read_json(self.rules))

    def load_hierarchy(self):
        return hierarchy_from_dict(read_json(self.hierarchy)) if self.hierarchy else default_hierarchy()

    def load_policies(self):
        return load_policies(read_json(self.policies))

    def load_system(self):
        sd = SystemDescription.from_dict(read_json(self.system))
        if self.client_ports:
            sd = replace(sd, client_ports=tuple(self.client_ports))
        return sd


def _pick(name, overrides, doc, settings, setting_key):
    if overrides.get(name) is not None:
        return overrides[name]
    if doc.get(name) is not None:
        return doc[name]
    if settings.get(setting_key) is not None:
        return settings[setting_key]
    return DEFAULTS.get(name)


def load_config(path, overrides=None, settings=None):
    """Build a PipelineConfig: CLI flag, then JSON document, then app settings, then default."""
    overrides, settings = overrides or {}, settings or {}
    if path is not None and not os.path.exists(path):
        raise ConfigurationError(f'config file {path} does not exist')
    doc = read_json(path) if path else {}
    if not isinstance(doc, dict):
        raise ConfigurationError('config must be a JSON object')
    base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()

    res = doc.get('res', {})
    try:
        params = ThresholdParams(int(overrides.get('n') or res.get('n', 4)), int(overrides.get('k') or res.get('k', 3)))
        seed = _pick('seed', overrides, doc, settings, 'SIEM_SEED')
        if overrides.get('system_entropy'):
            seed = None
        key_bits = int(overrides.get('key_bits') or res.get('key_bits') or settings.get('SIEM_KEY_BITS')
                       or DEFAULTS['key_bits'])
        path_limit = int(_pick('path_limit', overrides, doc, settings, 'SIEM_PATH_LIMIT'))
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f'bad numeric setting: {e}') from None
    client_ports = doc.get('client_ports') or settings.get('SIEM_CLIENT_PORTS')

    def file_setting(name):
        if overrides.get(name):
            value = os.path.abspath(overrides[name])
        else:
            value = resolve_path(base, doc.get(name))
        if value is not None and not os.path.exists(value):
            raise ConfigurationError(f'{name} file {value} does not exist')
        return value

    streams = []
    for s in doc.get('streams', []):
        try:
            stream_path = resolve_path(base, s['path'])
            streams.append({'id': s.get('id', os.path.basename(s['path'])), 'grammar': s['grammar'],
                            'path': stream_path, 'layer': s.get('layer')})
        except (KeyError, TypeError) as e:
            raise ConfigurationError(f'stream entry is incomplete: {e}') from None
        if not os.path.exists(stream_path):
            raise ConfigurationError(f'log stream {stream_path} does not exist')
    ids = [s['id'] for s in streams]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise ConfigurationError(f'stream ids {duplicates} are used twice; give each stream an explicit id')

    out = overrides.get('out') or doc.get('out') or settings.get('SIEM_OUT_DIR') or DEFAULTS['out']
    cfg = PipelineConfig(
        base_dir=base,
        out_dir=os.path.abspath(out) if overrides.get('out') else resolve_path(base, out),
        seed=int(seed) if seed is not None else None,
        grammars=file_setting('grammars'),
        probes=file_setting('probes'),
        rules=file_setting('rules'),
        hierarchy=file_setting('hierarchy'),
        policies=file_setting('policies'),
        system=file_setting('system'),
        streams=streams,
        res=params,
        key_bits=key_bits,
        faults=dict(res.get('faults', {})),
        path_limit=path_limit,
        client_ports=tuple(int(p) for p in client_ports) if client_ports else None,
        watch=doc.get('watch'),
        source=path,
    )
    if streams and cfg.grammars is None:
        raise ConfigurationError('log streams are configured but no grammars file is given')
    return cfg


def require(cfg, *names):
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise ConfigurationError(f'config lacks {", ".join(missing)}')


@contextmanager
def stage(name):
    """Tag any pipeline error raised inside with the stage it came from."""
    try:
        yield
    except SiemError as e:
        if not hasattr(e, 'stage'):
            e.stage = name
        raise


def error_report(cfg_or_dir, error):
    out_dir = cfg_or_dir.out_dir if isinstance(cfg_or_dir, PipelineConfig) else cfg_or_dir
    report = {'stage': getattr(error, 'stage', 'config'), 'error': type(error).__name__,
              'message': str(error), 'exit_code': error.exit_code}
    write_json(os.path.join(out_dir, ARTIFACTS['error']), report)
    return report


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def collect_stage(cfg):
    with stage('collect'):
        grammars = cfg.load_grammars() if cfg.grammars else {}
        probes = cfg.load_probes()
        streams = [RawStream(s['id'], s['grammar'], tuple(read_lines(s['path'])), s['layer']) for s in cfg.streams]
        result = run_collector(grammars, probes, streams)
        write_lines(cfg.artifact('events'), [serialize_event(e) for e in result.events])
        write_lines(cfg.artifact('quarantine'), result.quarantine.to_lines())
        return result


def correlate_stage(cfg, events=None):
    with stage('correlate'):
        require(cfg, 'rules')
        if events is None:
            quarantine = Quarantine()
            events = read_events(read_lines(cfg.artifact('events')), quarantine, ARTIFACTS['events'])
        result = correlate(events, cfg.load_rules())
        write_lines(cfg.artifact('alarms'), [serialize_alarm(a) for a in result.alarms])
        return result


def resolve_stage(cfg):
    with stage('resolve-conflicts'):
        require(cfg, 'policies', 'system')
        policies, sd, hierarchy = cfg.load_policies(), cfg.load_system(), cfg.load_hierarchy()
        universe = AttributeUniverse(sd, policies)
        anomalies = detect_policy_anomalies(policies, universe)
        conflicts = detect_conflicts(policies, universe)
        resolutions = resolve_conflicts(conflicts, policies, hierarchy)
        write_json(cfg.artifact('resolutions'), {
            'hierarchy': hierarchy.to_dict(),
            'anomalies': [a.to_dict() for a in anomalies],
            'conflicts': [c.to_dict() for c in conflicts],
            'resolutions': [r.to_dict() for r in resolutions],
        })
        return anomalies, conflicts, resolutions


def load_resolutions(cfg):
    path = cfg.artifact('resolutions')
    if not os.path.exists(path):
        return []
    return [Resolution.from_dict(r) for r in read_json(path).get('resolutions', [])]


def _refiner(cfg, policies, resolutions):
    def regenerate(candidate):
        universe = AttributeUniverse(candidate, policies)
        return refine(policies, build_topology(candidate), candidate, universe, resolutions, cfg.path_limit)
    return regenerate


def _watched(cfg, sd):
    if not cfg.watch:
        return None
    w = cfg.watch
    return data_path_open(sd, w['host'], w['ip'], int(w['port']), w.get('proto', 'TCP'),
                          path_limit=cfg.path_limit)


def reachability_stage(cfg, sd=None, resolutions=None, phase='pre'):
    with stage('reachability'):
        require(cfg, 'policies', 'system')
        policies = cfg.load_policies()
        sd = sd if sd is not None else cfg.load_system()
        resolutions = resolutions if resolutions is not None else load_resolutions(cfg)
        report = analyze_system(policies, sd, AttributeUniverse(sd, policies), resolutions, cfg.path_limit)
        report.open_flows = open_flows(sd, path_limit=cfg.path_limit)
        doc = report.to_dict()
        watched = _watched(cfg, sd)
        if watched is not None:
            doc['watched_path_open'] = watched
        write_json(cfg.artifact(f'findings_{phase}'), doc)
        matrix_dir = os.path.join(cfg.out_dir, 'matrices', phase)
        os.makedirs(matrix_dir, exist_ok=True)
        for fw, label, matrix in flatten_matrices(report.matrices):
            matrix.to_csv(os.path.join(matrix_dir, f'{fw}.{label}.csv'))
        if phase == 'pre':
            remediation = remediate(report.findings, sd, report.generated, _refiner(cfg, policies, resolutions))
            write_json(cfg.artifact('remediation'), remediation.to_dict())
        return report


def react_stage(cfg, sd=None, remediation=None, resolutions=None):
    with stage('react'):
        require(cfg, 'system')
        sd = sd if sd is not None else cfg.load_system()
        if remediation is None:
            remediation = Remediation.from_dict(read_json(cfg.artifact('remediation')))
        reacted = react(sd, remediation)
        write_json(cfg.artifact('reacted'), reacted.to_dict())
    post = reachability_stage(cfg, reacted, resolutions, phase='post')
    return reacted, post


def res_sign_stage(cfg, alarms=None):
    with stage('res-sign'):
        if alarms is None:
            alarms = read_alarms(read_lines(cfg.artifact('alarms')), Quarantine(), ARTIFACTS['alarms'])
        material = dealer_keygen(cfg.res, cfg.key_bits, seed=cfg.seed)
        public = material.public
        write_json(cfg.artifact('key'), public.to_dict())
        with open(cfg.artifact('pem'), 'w', encoding='ascii', newline='\n') as f:
            f.write(public.to_pem() + '\n')
        if os.path.exists(cfg.artifact('store')):
            os.remove(cfg.artifact('store'))
        store = ResilientStore(cfg.artifact('store'), public)
        nodes = build_nodes(material, cfg.faults)
        stored, parked = sign_alarms(alarms, nodes, public, store, cfg.artifact('dead_letter'))
        return public, stored, parked


def res_audit_stage(cfg):
    with stage('res-audit'):
        public = VerificationKey.from_dict(read_json(cfg.artifact('key')))
        report = audit(cfg.artifact('store'), public)
        write_json(cfg.artifact('audit'), report)
        return report


# ---------------------------------------------------------------------------
# End-to-end
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    exit_code: int
    summary: dict
    alarms: list = field(default_factory=list)
    stored: list = field(default_factory=list)
    parked: list = field(default_factory=list)
    findings: dict = field(default_factory=dict)
    resolutions: list = field(default_factory=list)
    error: dict | None = None


def run_pipeline(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    error_path = cfg.artifact('error')
    if os.path.exists(error_path):
        os.remove(error_path)
    try:
        collected = collect_stage(cfg)
        correlated = correlate_stage(cfg, collected.events)
        alarms = correlated.alarms
        public, stored, parked = res_sign_stage(cfg, alarms)
        audit_report = res_audit_stage(cfg)
        anomalies, conflicts, resolutions = resolve_stage(cfg)
        sd = cfg.load_system()
        pre = reachability_stage(cfg, sd, resolutions, phase='pre')
        remediation = Remediation.from_dict(read_json(cfg.artifact('remediation')))
        reacted, post = react_stage(cfg, sd, remediation, resolutions)
    except SiemError as e:
        report = error_report(cfg, e)
        log.error('pipeline failed in %s: %s', report['stage'], e)
        return PipelineResult(e.exit_code, {}, error=report)

    corrupted = sorted({n for r in stored for n in r.corrupted_nodes} | {n for p in parked for n in p['corrupted_nodes']})
    exit_code = 0 if not post.findings and audit_report['clean'] else 1
    summary = {
        'seed': cfg.seed,
        'events': {'lines': collected.lines_in, 'parsed': collected.parsed, 'emitted': collected.emitted,
                   'quarantined': len(collected.quarantine), 'total': len(collected.events)},
        'alarms': {'total': len(alarms), 'by_rule': dict(sorted(Counter(a.rule_id for a in alarms).items()))},
        'policies': {
            'anomalies': len(anomalies),
            'conflicts': len(conflicts),
            'resolutions': [{'policies': [r.first, r.second], 'chosen': r.chosen, 'tied': r.tied}
                            for r in resolutions],
        },
        'findings_pre': pre.counts,
        'remediation': len(remediation),
        'findings_post': post.counts,
        'open_flows': {'before': len(pre.open_flows), 'after': len(post.open_flows)},
        'res': {'key_id': public.key_id, 'stored': len(stored), 'dead_lettered': len(parked),
                'corrupted_nodes': corrupted, 'audit_clean': audit_report['clean']},
        'exit_code': exit_code,
    }
    if cfg.watch:
        summary['watched_path_open'] = {'before': _watched(cfg, sd), 'after': _watched(cfg, reacted)}
    write_json(cfg.artifact('summary'), summary)
    log.info('pipeline finished with exit code %d', exit_code)
    return PipelineResult(exit_code, summary, alarms, stored, parked,
                          {'pre': pre.findings, 'post': post.findings}, resolutions)
