import random

import pytest

import storage
from app import create_app
from dam import write_bundle


@pytest.fixture
def app():
    app = create_app({
        'TESTING': True,
        'SQLALCHEMY_DATABASE_URI': 'sqlite://',
        'SIEM_KEY_BITS': 384,
        'SIEM_OUT_DIR': None,
        'LOG_LEVEL': 'WARNING',
    })
    yield app


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture(scope='session')
def safe_primes():
    """One pair of 192-bit safe primes for the whole session."""
    rng = random.Random(20240101)
    return storage.generate_safe_primes(384, rng.randbytes)


@pytest.fixture
def fast_keys(monkeypatch, safe_primes):
    monkeypatch.setattr(storage, 'generate_safe_primes', lambda bits, randfunc: safe_primes)
    return safe_primes


@pytest.fixture
def bundle(tmp_path):
    """Path of a freshly written misuse-case pipeline document."""
    return write_bundle(str(tmp_path / 'scenario'))
