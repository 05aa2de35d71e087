import click
from flask import Blueprint, current_app

from dam import write_bundle

scenario_bp = Blueprint('scenario', __name__, cli_group=None)


@scenario_bp.cli.command('dam-sim')
@click.option('--out', default=None, help='Directory for the scenario bundle.')
@click.option('--seed', type=int, default=None, help='Seed written into the pipeline document.')
def dam_sim(out, seed):
    """Simulate the dam misuse case and write a pipeline-ready bundle."""
    out = out or current_app.config['SCENARIO_DIR']
    seed = seed if seed is not None else current_app.config['SIEM_SEED']
    path = write_bundle(out, seed)
    click.echo(f'scenario bundle written; run it with: flask --app app run-pipeline --config {path}')
