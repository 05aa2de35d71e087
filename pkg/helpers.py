import ipaddress
import json
import os
import re
from datetime import datetime, timezone


def slugify(text):
    text = text.lower().strip()
    text = re.sub(r'[^\w\s-]', '', text)
    text = re.sub(r'[\s_]+', '-', text)
    return re.sub(r'-+', '-', text)


def canonical_json(obj):
    """Compact JSON that keeps the caller's key order."""
    return json.dumps(obj, separators=(',', ':'), ensure_ascii=False, allow_nan=False)


def ip_key(ip):
    return int(ipaddress.IPv4Address(ip))


def iso_to_ms(text):
    """Parse an ISO-8601 UTC timestamp ("...Z" or with offset) into epoch ms."""
    dt = datetime.fromisoformat(text.replace('Z', '+00:00'))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp() * 1000))


def ms_to_iso(ms):
    dt = datetime.fromtimestamp(ms / 1000, tz=timezone.utc)
    if ms % 1000:
        return dt.strftime('%Y-%m-%dT%H:%M:%S.') + f'{ms % 1000:03d}Z'
    return dt.strftime('%Y-%m-%dT%H:%M:%SZ')


def resolve_path(base_dir, path):
    if path is None:
        return None
    if os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(base_dir, path))


def read_json(path):
    with open(path, encoding='utf-8') as f:
        return json.load(f)


def write_json(path, obj):
    """Write a report file; stable indentation so bundles diff cleanly."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(obj, f, indent=2, ensure_ascii=False, allow_nan=False)
        f.write('\n')


def read_lines(path):
    with open(path, 'rb') as f:
        return f.read().splitlines()


def write_lines(path, lines):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        for line in lines:
            f.write(line if line.endswith(b'\n') else line + b'\n')
