import os

import click
from flask import current_app

from errors import SiemError
from pipeline import error_report, load_config


def config_options(func):
    """--config / --out / --seed, shared by every pipeline stage command."""
    func = click.option('--seed', type=int, default=None,
                        help='Seed for key generation and fault injection.')(func)
    func = click.option('--out', default=None, help='Output directory (overrides the document).')(func)
    func = click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                        help='Pipeline JSON document.')(func)
    return func


def run_stage(config_path, overrides, action):
    """Load the config, run one action and turn pipeline errors into exit codes."""
    ctx = click.get_current_context()
    try:
        cfg = load_config(config_path, overrides, current_app.config)
    except SiemError as e:
        current_app.logger.error('configuration error: %s', e)
        if overrides.get('out'):
            error_report(os.path.abspath(overrides['out']), e)
        click.echo(f'configuration error: {e}', err=True)
        ctx.exit(e.exit_code)
    os.makedirs(cfg.out_dir, exist_ok=True)
    try:
        return action(cfg)
    except SiemError as e:
        report = error_report(cfg, e)
        current_app.logger.error('%s failed: %s', report['stage'], e)
        click.echo(f'{report["stage"]} failed: {report["error"]}: {e}', err=True)
        ctx.exit(e.exit_code)
