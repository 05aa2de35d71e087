import json
import os

import pytest

from errors import ConfigurationError
from models import AlarmRecord, FindingRecord, PipelineRun
from pipeline import load_config, run_pipeline


def read(path):
    with open(path, encoding='utf-8') as f:
        return json.load(f)


def test_load_config_precedence(bundle, tmp_path):
    cfg = load_config(bundle, {'k': 2, 'out': str(tmp_path / 'elsewhere')}, {'SIEM_SEED': 99, 'SIEM_KEY_BITS': 400})
    assert cfg.res.n == 4 and cfg.res.k == 2
    assert cfg.seed == 7
    assert cfg.key_bits == 400
    assert cfg.out_dir == str(tmp_path / 'elsewhere')
    assert cfg.system == os.path.join(os.path.dirname(bundle), 'system.json')
    assert cfg.faults == {'2': 'corrupt'}
    assert load_config(bundle, {'system_entropy': True}).seed is None


def test_app_carries_no_session_secret(app):
    assert app.config['SECRET_KEY'] is None


def test_load_config_errors(bundle, tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(str(tmp_path / 'missing.json'))
    with pytest.raises(ConfigurationError):
        load_config(bundle, {'n': 2, 'k': 3})
    with pytest.raises(ConfigurationError):
        load_config(bundle, {'policies': str(tmp_path / 'nope.json')})


def test_streams_sharing_a_file_name_need_ids(bundle):
    root = os.path.dirname(bundle)
    os.makedirs(os.path.join(root, 'mirror'))
    with open(os.path.join(root, 'mirror', 'auth.log'), 'wb') as f:
        f.write(b'2024-01-01T00:00:00Z sshd auth_failure src=10.0.0.5 dst=192.168.0.1 sev=3\n')
    doc = read(bundle)
    doc['streams'] = [{'grammar': 'auth', 'path': 'logs/auth.log'}, {'grammar': 'auth', 'path': 'mirror/auth.log'}]
    with open(bundle, 'w', encoding='utf-8') as f:
        json.dump(doc, f)
    with pytest.raises(ConfigurationError, match='auth.log'):
        load_config(bundle)

    doc['streams'][1]['id'] = 'mirror-auth.log'
    with open(bundle, 'w', encoding='utf-8') as f:
        json.dump(doc, f)
    assert [s['id'] for s in load_config(bundle).streams] == ['auth.log', 'mirror-auth.log']


def test_misuse_case_end_to_end(app, bundle, fast_keys):
    with app.app_context():
        result = run_pipeline(load_config(bundle, settings=app.config))
    assert result.exit_code == 0
    s = result.summary
    assert s['events'] == {'lines': 37, 'parsed': 37, 'emitted': 1, 'quarantined': 0, 'total': 38}
    assert s['alarms'] == {'total': 4, 'by_rule': {'brute-force': 1, 'firmware-write': 1, 'flow-anomaly': 1,
                                                   'turbine-emergency': 1}}
    assert s['policies']['conflicts'] == 1
    assert s['policies']['resolutions'] == [{'policies': ['viewer-deny-field', 'vis-telemetry'],
                                             'chosen': 'vis-telemetry', 'tied': False}]
    assert s['findings_pre'] == {'anomaly': 0, 'security_issue': 1, 'not_enforceable': 0}
    assert s['remediation'] == 1
    assert s['findings_post'] == {'anomaly': 0, 'security_issue': 0, 'not_enforceable': 0}
    assert s['res']['stored'] == 4
    assert s['res']['dead_lettered'] == 0
    assert s['res']['corrupted_nodes'] == [2]
    assert s['res']['audit_clean']
    assert s['watched_path_open'] == {'before': True, 'after': False}

    out = os.path.join(os.path.dirname(bundle), 'out')
    assert read(os.path.join(out, 'summary.json')) == s
    firmware_flow = {'host': 'vis-station', 'source': '10.0.1.10:40000', 'destination': '10.0.2.11:8443/TCP'}
    assert s['open_flows'] == {'before': 11, 'after': 10}
    assert firmware_flow in read(os.path.join(out, 'findings_pre.json'))['open_flows']
    assert firmware_flow not in read(os.path.join(out, 'findings_post.json'))['open_flows']
    remediation = read(os.path.join(out, 'remediation.json'))
    assert [(x['action'], x['index']) for x in remediation['suggestions']] == [('remove_rule', 2)]
    assert os.path.exists(os.path.join(out, 'matrices', 'pre', 'fw1.delta.csv'))
    assert not os.path.exists(os.path.join(out, 'error.json'))
    with open(os.path.join(out, 'alarms.jsonl'), 'rb') as f:
        ids = [json.loads(line)['alarm_id'] for line in f]
    assert ids == ['brute-force-0001', 'firmware-write-0002', 'flow-anomaly-0003', 'turbine-emergency-0004']


def test_cli_run_is_recorded_and_reproducible(app, runner, bundle, fast_keys, tmp_path):
    outputs = [str(tmp_path / 'run1'), str(tmp_path / 'run2')]
    for out in outputs:
        result = runner.invoke(args=['run-pipeline', '--config', bundle, '--out', out])
        assert result.exit_code == 0, result.output
        assert 'audit clean' in result.output

    for name in ('events.jsonl', 'alarms.jsonl', 'resolutions.json', 'findings_pre.json', 'findings_post.json',
                 'remediation.json', 'res_store.bin', 'res_key.json', 'summary.json'):
        with open(os.path.join(outputs[0], name), 'rb') as a, open(os.path.join(outputs[1], name), 'rb') as b:
            assert a.read() == b.read(), name

    with app.app_context():
        assert PipelineRun.query.count() == 2
        run = PipelineRun.query.first()
        assert run.exit_code == 0
        assert run.counts() == {'alarms': 4, 'findings_pre': 1, 'findings_post': 0, 'resolutions': 1}
        assert AlarmRecord.query.filter_by(rule_id='brute-force').first().corrupted_nodes == [2]
        assert FindingRecord.query.filter_by(phase='pre').first().destination == '10.0.2.11:8443/TCP'

    history = runner.invoke(args=['history'])
    assert history.exit_code == 0
    assert history.output.count('exit=0') == 2


def test_threshold_above_node_count_is_a_config_error(runner, bundle, tmp_path):
    out = tmp_path / 'bad'
    result = runner.invoke(args=['run-pipeline', '--config', bundle, '--k', '5', '--out', str(out)])
    assert result.exit_code == 2
    report = read(out / 'error.json')
    assert report['error'] == 'InvalidParams'
    assert report['exit_code'] == 2


def test_stage_failure_writes_an_error_report(app, runner, bundle, fast_keys):
    root = os.path.dirname(bundle)
    doc = read(os.path.join(root, 'policies.json'))
    doc['policies'].append({'id': 'ghost', 'subject': {'ID': 'nobody'}, 'object': {}, 'environment': {},
                            'action': 'reach', 'effect': 'permit'})
    with open(os.path.join(root, 'policies.json'), 'w') as f:
        json.dump(doc, f)
    result = runner.invoke(args=['run-pipeline', '--config', bundle])
    assert result.exit_code == 3
    report = read(os.path.join(root, 'out', 'error.json'))
    assert report['stage'] == 'reachability'
    assert report['error'] == 'UnknownEndpoint'
    with app.app_context():
        assert PipelineRun.query.one().exit_code == 3


def test_empty_corpus(app, bundle, fast_keys):
    root = os.path.dirname(bundle)
    for name in ('auth.log', 'sensor.log', 'app.log'):
        open(os.path.join(root, 'logs', name), 'wb').close()
    with app.app_context():
        result = run_pipeline(load_config(bundle, settings=app.config))
    assert result.exit_code == 0
    assert result.summary['events']['total'] == 0
    assert result.summary['alarms'] == {'total': 0, 'by_rule': {}}
    assert result.summary['res']['stored'] == 0
    assert result.summary['res']['audit_clean']


def test_stage_commands_one_at_a_time(runner, bundle, fast_keys, tmp_path):
    out = str(tmp_path / 'stages')
    for command in ('collect', 'correlate', 'res-sign', 'res-audit', 'resolve-conflicts', 'reachability'):
        result = runner.invoke(args=[command, '--config', bundle, '--out', out])
        assert result.exit_code == 0, (command, result.output)
    react = runner.invoke(args=['react', '--config', bundle, '--out', out])
    assert react.exit_code == 0, react.output
    assert '0 finding(s) after reaction' in react.output

    audit = runner.invoke(args=['res-audit', '--store', os.path.join(out, 'res_store.bin'),
                                '--key', os.path.join(out, 'res_key.json')])
    assert audit.exit_code == 0
    assert '4 record(s) audited: clean' in audit.output

    full = str(tmp_path / 'full')
    assert runner.invoke(args=['run-pipeline', '--config', bundle, '--out', full]).exit_code == 0
    for name in ('events.jsonl', 'alarms.jsonl', 'resolutions.json', 'findings_pre.json', 'remediation.json',
                 'findings_post.json', 'res_store.bin', 'res_key.json'):
        with open(os.path.join(out, name), 'rb') as staged, open(os.path.join(full, name), 'rb') as whole:
            assert staged.read() == whole.read(), name


def test_dam_sim_writes_a_bundle(runner, tmp_path):
    out = tmp_path / 'scenario'
    result = runner.invoke(args=['dam-sim', '--out', str(out), '--seed', '5'])
    assert result.exit_code == 0
    assert read(out / 'pipeline.json')['seed'] == 5
