import click
from flask import Blueprint

from commands import config_options, run_stage
from events import Quarantine, read_events
from helpers import read_lines
from pipeline import collect_stage, correlate_stage

collection_bp = Blueprint('collection', __name__, cli_group=None)


@collection_bp.cli.command('collect')
@config_options
def collect(config_path, out, seed):
    """Parse raw log streams into normalized events."""
    def action(cfg):
        result = collect_stage(cfg)
        click.echo(f'{len(result.events)} events ({result.parsed} parsed, {result.emitted} from probes), '
                   f'{len(result.quarantine)} line(s) quarantined -> {cfg.artifact("events")}')
    run_stage(config_path, {'out': out, 'seed': seed}, action)


@collection_bp.cli.command('correlate')
@config_options
@click.option('--events', 'events_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Events file to read instead of the one in the output directory.')
@click.option('--rules', default=None, help='Correlation rules file.')
def correlate(config_path, out, seed, events_path, rules):
    """Raise alarms from the normalized event stream."""
    def action(cfg):
        events = None
        if events_path:
            quarantine = Quarantine()
            events = read_events(read_lines(events_path), quarantine, events_path)
        result = correlate_stage(cfg, events)
        for alarm in result.alarms:
            click.echo(f'{alarm.alarm_id}  {alarm.description}')
        click.echo(f'{len(result.alarms)} alarm(s) -> {cfg.artifact("alarms")}')
    run_stage(config_path, {'out': out, 'seed': seed, 'rules': rules}, action)
