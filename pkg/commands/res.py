import os

import click
from flask import Blueprint, current_app

from commands import config_options, run_stage
from errors import SiemError
from helpers import read_json, write_json
from pipeline import res_audit_stage, res_sign_stage
from storage import VerificationKey, audit

res_bp = Blueprint('res', __name__, cli_group=None)


@res_bp.cli.command('res-sign')
@config_options
@click.option('--n', type=int, default=None, help='Number of signer nodes.')
@click.option('--k', type=int, default=None, help='Signing threshold.')
@click.option('--key-bits', type=int, default=None, help='RSA modulus size.')
@click.option('--system-entropy', is_flag=True, help='Draw key material from the OS instead of the seed.')
def res_sign(config_path, out, seed, n, k, key_bits, system_entropy):
    """Threshold-sign every alarm into the resilient store."""
    def action(cfg):
        public, stored, parked = res_sign_stage(cfg)
        for record in stored:
            flagged = f' corrupted={list(record.corrupted_nodes)}' if record.corrupted_nodes else ''
            click.echo(f'#{record.sequence} {record.alarm.alarm_id}{flagged}')
        click.echo(f'{len(stored)} stored, {len(parked)} dead-lettered (key {public.key_id})')
    run_stage(config_path, {'out': out, 'seed': seed, 'n': n, 'k': k, 'key_bits': key_bits,
                            'system_entropy': system_entropy}, action)


def _print_audit(report):
    for failure in report['failures']:
        label = failure['sequence'] if failure['sequence'] is not None else f'#{failure["position"]}'
        click.echo(f'record {label}: {failure["reason"]}')
    status = 'clean' if report['clean'] else f'{len(report["failures"])} failure(s)'
    click.echo(f'{report["records"]} record(s) audited: {status}')


@res_bp.cli.command('res-audit')
@config_options
@click.option('--store', type=click.Path(exists=True, dir_okay=False), default=None, help='Store file.')
@click.option('--key', type=click.Path(exists=True, dir_okay=False), default=None, help='Verification key JSON.')
def res_audit(config_path, out, seed, store, key):
    """Re-verify every stored record; exits 1 when any record fails."""
    ctx = click.get_current_context()
    if store and key:
        try:
            report = audit(store, VerificationKey.from_dict(read_json(key)))
        except SiemError as e:
            click.echo(f'res-audit failed: {e}', err=True)
            ctx.exit(e.exit_code)
        if out:
            write_json(os.path.join(out, 'res_audit.json'), report)
    else:
        report = run_stage(config_path, {'out': out, 'seed': seed}, res_audit_stage)
    _print_audit(report)
    if not report['clean']:
        current_app.logger.warning('resilient store failed its audit')
        ctx.exit(1)
