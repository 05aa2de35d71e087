import os
from dotenv import load_dotenv

load_dotenv()

BASE_DIR = os.path.abspath(os.path.dirname(__file__))


def _ports(value):
    return tuple(int(p) for p in value.split(',') if p.strip()) if value else None


class Config:
    SQLALCHEMY_DATABASE_URI = os.getenv('DATABASE_URL', f'sqlite:///{os.path.join(BASE_DIR, "siem.db")}')
    SQLALCHEMY_TRACK_MODIFICATIONS = False
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    SIEM_SEED = int(os.getenv('SIEM_SEED', '7'))
    SIEM_OUT_DIR = os.getenv('SIEM_OUT_DIR')
    SIEM_KEY_BITS = int(os.getenv('SIEM_KEY_BITS', '512'))
    SIEM_PATH_LIMIT = int(os.getenv('SIEM_PATH_LIMIT', '64'))
    SIEM_CLIENT_PORTS = _ports(os.getenv('SIEM_CLIENT_PORTS'))
    SCENARIO_DIR = os.path.join(BASE_DIR, 'scenario')
