import json
from datetime import datetime, timezone

from extensions import db


def _utcnow():
    return datetime.now(timezone.utc)


class PipelineRun(db.Model):
    __tablename__ = 'pipeline_runs'
    id = db.Column(db.Integer, primary_key=True)
    seed = db.Column(db.Integer)
    config_path = db.Column(db.String(500))
    out_dir = db.Column(db.String(500))
    exit_code = db.Column(db.Integer, nullable=False)
    error = db.Column(db.Text)
    created_at = db.Column(db.DateTime, default=_utcnow)

    alarms = db.relationship('AlarmRecord', backref='run', lazy='dynamic', cascade='all, delete-orphan')
    findings = db.relationship('FindingRecord', backref='run', lazy='dynamic', cascade='all, delete-orphan')
    resolutions = db.relationship('ResolutionRecord', backref='run', lazy='dynamic', cascade='all, delete-orphan')

    def counts(self):
        return {
            'alarms': self.alarms.count(),
            'findings_pre': self.findings.filter_by(phase='pre').count(),
            'findings_post': self.findings.filter_by(phase='post').count(),
            'resolutions': self.resolutions.count(),
        }


class AlarmRecord(db.Model):
    __tablename__ = 'alarms'
    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('pipeline_runs.id'), nullable=False)
    alarm_id = db.Column(db.String(120), nullable=False)
    rule_id = db.Column(db.String(120), nullable=False)
    timestamp = db.Column(db.BigInteger, nullable=False)
    severity = db.Column(db.Integer, nullable=False)
    description = db.Column(db.Text)
    _contributing = db.Column('contributing_events', db.Text, default='[]')
    store_sequence = db.Column(db.Integer)  # null when the alarm was dead-lettered
    _corrupted = db.Column('corrupted_nodes', db.Text, default='[]')
    dead_lettered = db.Column(db.Boolean, default=False)

    @property
    def contributing_events(self):
        try:
            return json.loads(self._contributing) if self._contributing else []
        except (json.JSONDecodeError, TypeError):
            return []

    @contributing_events.setter
    def contributing_events(self, value):
        self._contributing = json.dumps(list(value)) if value else '[]'

    @property
    def corrupted_nodes(self):
        try:
            return json.loads(self._corrupted) if self._corrupted else []
        except (json.JSONDecodeError, TypeError):
            return []

    @corrupted_nodes.setter
    def corrupted_nodes(self, value):
        self._corrupted = json.dumps(list(value)) if value else '[]'


class FindingRecord(db.Model):
    __tablename__ = 'findings'
    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('pipeline_runs.id'), nullable=False)
    phase = db.Column(db.String(10), nullable=False)  # pre, post
    kind = db.Column(db.String(30), nullable=False)  # anomaly, security_issue, not_enforceable
    firewall_id = db.Column(db.String(120))
    source = db.Column(db.String(120))
    destination = db.Column(db.String(120))
    policy_id = db.Column(db.String(120))
    detail = db.Column(db.Text)


class ResolutionRecord(db.Model):
    __tablename__ = 'resolutions'
    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('pipeline_runs.id'), nullable=False)
    first_policy = db.Column(db.String(120), nullable=False)
    second_policy = db.Column(db.String(120), nullable=False)
    chosen_policy = db.Column(db.String(120), nullable=False)
    tied = db.Column(db.Boolean, default=False)
    first_priority = db.Column(db.Float)
    second_priority = db.Column(db.Float)


def record_run(result, cfg=None, config_path=None):
    """Persist one pipeline result in the internal models repository."""
    run = PipelineRun(
        seed=cfg.seed if cfg else None,
        config_path=config_path or (cfg.source if cfg else None),
        out_dir=cfg.out_dir if cfg else None,
        exit_code=result.exit_code,
        error=json.dumps(result.error) if result.error else None,
    )
    db.session.add(run)

    signed = {r.alarm.alarm_id: r for r in result.stored}
    parked = {p['alarm']['alarm_id']: p for p in result.parked}
    for alarm in result.alarms:
        record = signed.get(alarm.alarm_id)
        row = AlarmRecord(run=run, alarm_id=alarm.alarm_id, rule_id=alarm.rule_id, timestamp=alarm.timestamp,
                          severity=alarm.severity, description=alarm.description,
                          store_sequence=record.sequence if record else None,
                          dead_lettered=alarm.alarm_id in parked)
        row.contributing_events = alarm.contributing_events
        if record:
            row.corrupted_nodes = record.corrupted_nodes
        elif alarm.alarm_id in parked:
            row.corrupted_nodes = parked[alarm.alarm_id]['corrupted_nodes']
        db.session.add(row)

    for phase, findings in result.findings.items():
        for f in findings:
            db.session.add(FindingRecord(
                run=run, phase=phase, kind=f.kind, firewall_id=f.firewall_id,
                source=f.source if isinstance(f.source, str) else (f'{f.source[0]}:{f.source[1]}' if f.source else None),
                destination=(f.destination if isinstance(f.destination, str)
                             else (f'{f.destination[0]}:{f.destination[1]}/{f.destination[2]}' if f.destination else None)),
                policy_id=f.policy_id, detail=f.detail))

    for r in result.resolutions:
        db.session.add(ResolutionRecord(run=run, first_policy=r.first, second_policy=r.second,
                                        chosen_policy=r.chosen, tied=r.tied,
                                        first_priority=r.global_priorities[0],
                                        second_priority=r.global_priorities[1]))
    db.session.commit()
    return run
