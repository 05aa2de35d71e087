import click
from flask import Blueprint, current_app

from commands import config_options, run_stage
from extensions import db
from models import PipelineRun, record_run
from pipeline import run_pipeline as run_all

runs_bp = Blueprint('runs', __name__, cli_group=None)


@runs_bp.cli.command('run-pipeline')
@config_options
@click.option('--n', type=int, default=None, help='Number of signer nodes.')
@click.option('--k', type=int, default=None, help='Signing threshold.')
@click.option('--key-bits', type=int, default=None, help='RSA modulus size.')
@click.option('--system-entropy', is_flag=True, help='Draw key material from the OS instead of the seed.')
def run_pipeline(config_path, out, seed, n, k, key_bits, system_entropy):
    """Run every stage end to end; exit 0 only when nothing is left to fix."""
    ctx = click.get_current_context()
    holder = {}

    def action(cfg):
        holder['cfg'] = cfg
        return run_all(cfg)

    result = run_stage(config_path, {'out': out, 'seed': seed, 'n': n, 'k': k, 'key_bits': key_bits,
                                     'system_entropy': system_entropy}, action)
    run = record_run(result, holder.get('cfg'))
    if result.error:
        click.echo(f'{result.error["stage"]} failed: {result.error["error"]}: {result.error["message"]}', err=True)
        ctx.exit(result.exit_code)

    s = result.summary
    click.echo(f'run {run.id}: {s["events"]["total"]} events, {s["alarms"]["total"]} alarm(s) '
               f'{s["alarms"]["by_rule"]}')
    click.echo(f'conflicts {s["policies"]["conflicts"]}, findings before reaction {s["findings_pre"]}, '
               f'after {s["findings_post"]}')
    click.echo(f'resilient store: {s["res"]["stored"]} signed, {s["res"]["dead_lettered"]} dead-lettered, '
               f'corrupted nodes {s["res"]["corrupted_nodes"]}, audit '
               f'{"clean" if s["res"]["audit_clean"] else "FAILED"}')
    if 'watched_path_open' in s:
        w = s['watched_path_open']
        click.echo(f'watched path open before/after reaction: {w["before"]}/{w["after"]}')
    current_app.logger.info('run %d finished with exit code %d', run.id, result.exit_code)
    ctx.exit(result.exit_code)


@runs_bp.cli.command('history')
@click.option('--limit', type=int, default=10, help='Number of runs to list.')
def history(limit):
    """List recorded pipeline runs."""
    runs = db.session.query(PipelineRun).order_by(PipelineRun.id.desc()).limit(limit).all()
    if not runs:
        click.echo('no runs recorded')
        return
    for run in runs:
        c = run.counts()
        click.echo(f'{run.id:4}  exit={run.exit_code}  seed={run.seed}  alarms={c["alarms"]}  '
                   f'findings={c["findings_pre"]}->{c["findings_post"]}  {run.config_path or "-"}')
