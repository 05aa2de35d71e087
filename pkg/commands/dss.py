import click
from flask import Blueprint

from commands import config_options, run_stage
from pipeline import react_stage, reachability_stage, resolve_stage

dss_bp = Blueprint('dss', __name__, cli_group=None)


def _inputs(out, seed, policies=None, system=None, hierarchy=None):
    return {'out': out, 'seed': seed, 'policies': policies, 'system': system, 'hierarchy': hierarchy}


@dss_bp.cli.command('resolve-conflicts')
@config_options
@click.option('--policies', default=None, help='Policies file.')
@click.option('--system', default=None, help='System description file.')
@click.option('--hierarchy', default=None, help='AHP hierarchy file.')
def resolve_conflicts(config_path, out, seed, policies, system, hierarchy):
    """Detect policy anomalies and conflicts and resolve conflicts with AHP."""
    def action(cfg):
        anomalies, conflicts, resolutions = resolve_stage(cfg)
        for a in anomalies:
            click.echo(f'{a.kind}: {" / ".join(a.policy_ids)}')
        for r in resolutions:
            flag = ' (tied)' if r.tied else ''
            click.echo(f'{r.first} vs {r.second}: keep {r.chosen}{flag}')
        click.echo(f'{len(conflicts)} conflict(s) -> {cfg.artifact("resolutions")}')
    run_stage(config_path, _inputs(out, seed, policies, system, hierarchy), action)


def _echo_findings(findings):
    for f in findings:
        d = f.to_dict()
        where = d.get('firewall') or d.get('policy')
        click.echo(f'{f.kind:16} {where}: {d.get("source", d.get("subject"))} -> '
                   f'{d.get("destination", d.get("object"))}')


@dss_bp.cli.command('reachability')
@config_options
@click.option('--policies', default=None, help='Policies file.')
@click.option('--system', default=None, help='System description file.')
def reachability(config_path, out, seed, policies, system):
    """Compare deployed firewall rules against the reach policies."""
    def action(cfg):
        report = reachability_stage(cfg)
        _echo_findings(report.findings)
        counts = ', '.join(f'{v} {k}' for k, v in report.counts.items())
        click.echo(f'{counts} -> {cfg.artifact("findings_pre")}')
    run_stage(config_path, _inputs(out, seed, policies, system), action)


@dss_bp.cli.command('react')
@config_options
@click.option('--system', default=None, help='System description file.')
def react(config_path, out, seed, system):
    """Apply the remediation and analyse the reacted configuration again."""
    def action(cfg):
        _, post = react_stage(cfg)
        _echo_findings(post.findings)
        click.echo(f'{len(post.findings)} finding(s) after reaction -> {cfg.artifact("reacted")}')
        if post.findings:
            click.get_current_context().exit(1)
    run_stage(config_path, _inputs(out, seed, system=system), action)
