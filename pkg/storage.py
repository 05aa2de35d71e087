"""Resilient event storage: (k, n) threshold RSA signatures over alarms.

A dealer splits the RSA signing exponent into n shares and then forgets it.
Each signer node returns a signature share with a proof of correctness; the
combiner assembles any k shares into an ordinary RSA signature on the alarm
digest. When a combination does not verify, every share is checked on its
own, bad senders are flagged and the combiner waits for more shares.

Signed records are appended to a length-prefixed file and can be audited
with the public verification key alone.
"""
import hashlib
import json
import logging
import math
import os
import random
import struct
import threading
from dataclasses import dataclass, field
from fractions import Fraction

from Crypto.Math.Primality import generate_probable_safe_prime
from Crypto.PublicKey import RSA

from errors import (CombineFailure, InsufficientShares, InvalidParams, MalformedEvent, MaterialMismatch,
                    QuorumUnreachable)
from events import Alarm, serialize_alarm
from helpers import canonical_json

log = logging.getLogger(__name__)

PUBLIC_EXPONENT = 65537
MIN_KEY_BITS = 322          # two safe primes of at least 161 bits
NONCE_EXTRA_BITS = 512
FAULTS = ('honest', 'corrupt', 'silent', 'delayed')
_LENGTH = struct.Struct('>I')


@dataclass(frozen=True)
class ThresholdParams:
    n: int
    k: int

    def __post_init__(self):
        if not isinstance(self.n, int) or not isinstance(self.k, int):
            raise InvalidParams('n and k must be integers')
        if self.n < 1:
            raise InvalidParams(f'need at least one signer node, got n={self.n}')
        if not 1 <= self.k <= self.n:
            raise InvalidParams(f'threshold k={self.k} must lie in [1, n={self.n}]')
        if PUBLIC_EXPONENT <= self.n:
            raise InvalidParams('public exponent must exceed the number of nodes')

    @property
    def delta(self):
        return math.factorial(self.n)


def _nbytes(n):
    return (n.bit_length() + 7) // 8


def _hex(value, n):
    return value.to_bytes(_nbytes(n), 'big').hex()


@dataclass(frozen=True)
class VerificationKey:
    n: int
    e: int
    v: int
    verification_shares: tuple      # v_i for node ids 1..parties
    k: int

    @property
    def parties(self):
        return len(self.verification_shares)

    @property
    def delta(self):
        return math.factorial(self.parties)

    @property
    def key_id(self):
        data = canonical_json({'n': hex(self.n), 'e': self.e, 'v': hex(self.v)})
        return hashlib.sha256(data.encode('ascii')).hexdigest()[:16]

    def to_dict(self):
        return {
            'key_id': self.key_id,
            'parties': self.parties,
            'threshold': self.k,
            'n': _hex(self.n, self.n),
            'e': self.e,
            'v': _hex(self.v, self.n),
            'verification_shares': {str(i): _hex(vi, self.n)
                                    for i, vi in enumerate(self.verification_shares, start=1)},
        }

    @classmethod
    def from_dict(cls, data):
        try:
            n = int(data['n'], 16)
            shares = data['verification_shares']
            return cls(n, int(data['e']), int(data['v'], 16),
                       tuple(int(shares[str(i)], 16) for i in range(1, int(data['parties']) + 1)),
                       int(data['threshold']))
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidParams(f'verification key is malformed: {e}') from None

    def to_pem(self):
        return RSA.construct((self.n, self.e)).export_key(format='PEM').decode('ascii')


@dataclass(frozen=True)
class KeyShare:
    node_id: int
    secret: int = field(repr=False)
    public: VerificationKey = field(repr=False)


@dataclass(frozen=True)
class ThresholdKeyMaterial:
    public: VerificationKey
    shares: tuple

    @property
    def verification_key(self):
        return self.public


def generate_safe_primes(bits, randfunc):
    half = bits // 2
    p = int(generate_probable_safe_prime(exact_bits=half, randfunc=randfunc))
    q = p
    while q == p:
        q = int(generate_probable_safe_prime(exact_bits=bits - half, randfunc=randfunc))
    return p, q


def dealer_keygen(params, bits=512, seed=None, primes=None):
    """Deal key shares; only the shares and the public key leave this function."""
    if bits < MIN_KEY_BITS:
        raise InvalidParams(f'key size must be at least {MIN_KEY_BITS} bits')
    rng = random.Random(seed) if seed is not None else random.SystemRandom()
    randfunc = rng.randbytes if seed is not None else os.urandom
    p, q = primes if primes is not None else generate_safe_primes(bits, randfunc)
    n = p * q
    m = ((p - 1) // 2) * ((q - 1) // 2)
    if math.gcd(PUBLIC_EXPONENT, m) != 1:
        raise InvalidParams('public exponent is not invertible for these primes')
    d = pow(PUBLIC_EXPONENT, -1, m)

    coefficients = [d] + [rng.randrange(m) for _ in range(params.k - 1)]
    secrets = [sum(a * pow(i, j, m) for j, a in enumerate(coefficients)) % m for i in range(1, params.n + 1)]

    while True:
        r = rng.randrange(2, n - 1)
        if math.gcd(r, n) == 1:
            break
    v = pow(r, 2, n)
    public = VerificationKey(n, PUBLIC_EXPONENT, v, tuple(pow(v, s, n) for s in secrets), params.k)
    shares = tuple(KeyShare(i, s, public) for i, s in enumerate(secrets, start=1))
    log.info('dealt %d key shares (threshold %d, key %s)', params.n, params.k, public.key_id)
    return ThresholdKeyMaterial(public, shares)


# ---------------------------------------------------------------------------
# Shares
# ---------------------------------------------------------------------------

def alarm_digest(alarm):
    return hashlib.sha256(serialize_alarm(alarm)).digest()


def digest_to_int(digest, public):
    return int.from_bytes(digest, 'big') % public.n


@dataclass(frozen=True)
class SignatureShare:
    node_id: int
    key_id: str
    digest: str
    value: int
    proof: tuple        # (z, c)

    def flipped(self):
        """The same share with its lowest bit inverted."""
        return SignatureShare(self.node_id, self.key_id, self.digest, self.value ^ 1, self.proof)


def _challenge(public, *values):
    width = _nbytes(public.n)
    h = hashlib.sha256()
    for value in values:
        h.update(value.to_bytes(width, 'big'))
    return int.from_bytes(h.digest(), 'big')


def node_sign(key_share, alarm):
    public = key_share.public
    n = public.n
    digest = alarm_digest(alarm)
    x = digest_to_int(digest, public)
    value = pow(x, 2 * public.delta * key_share.secret, n)

    x_tilde = pow(x, 4 * public.delta, n)
    nonce_bits = n.bit_length() + NONCE_EXTRA_BITS
    seed = key_share.secret.to_bytes(_nbytes(n), 'big') + digest
    r = int.from_bytes(hashlib.shake_256(seed).digest((nonce_bits + 7) // 8), 'big') % (1 << nonce_bits)
    vi = public.verification_shares[key_share.node_id - 1]
    c = _challenge(public, public.v, x_tilde, vi, pow(value, 2, n), pow(public.v, r, n), pow(x_tilde, r, n))
    z = key_share.secret * c + r
    return SignatureShare(key_share.node_id, public.key_id, digest.hex(), value, (z, c))


def verify_share(public, share, alarm):
    if share.key_id != public.key_id:
        raise MaterialMismatch(f'share from node {share.node_id} belongs to key {share.key_id}, not {public.key_id}')
    if not 1 <= share.node_id <= public.parties:
        return False
    n = public.n
    digest = alarm_digest(alarm)
    if share.digest != digest.hex() or not 0 < share.value < n or math.gcd(share.value, n) != 1:
        return False
    x = digest_to_int(digest, public)
    z, c = share.proof
    x_tilde = pow(x, 4 * public.delta, n)
    vi = public.verification_shares[share.node_id - 1]
    v_commit = pow(public.v, z, n) * pow(vi, -c, n) % n
    x_commit = pow(x_tilde, z, n) * pow(share.value, -2 * c, n) % n
    return c == _challenge(public, public.v, x_tilde, vi, pow(share.value, 2, n), v_commit, x_commit)


def _lagrange_at_zero(ids, i, delta):
    coefficient = Fraction(delta)
    for j in ids:
        if j != i:
            coefficient *= Fraction(j, j - i)
    # delta clears every denominator for ids in 1..parties
    assert coefficient.denominator == 1
    return coefficient.numerator


def combine(shares, alarm, public):
    distinct = {}
    for share in shares:
        distinct.setdefault(share.node_id, share)
    if len(distinct) < public.k:
        raise InsufficientShares(f'{len(distinct)} share(s) for threshold {public.k}')
    chosen = [distinct[i] for i in sorted(distinct)[:public.k]]
    ids = [s.node_id for s in chosen]
    digest = alarm_digest(alarm)
    if any(s.digest != digest.hex() for s in chosen):
        raise CombineFailure('shares sign different digests', ids)
    n, e = public.n, public.e
    x = digest_to_int(digest, public)
    w = 1
    try:
        for share in chosen:
            w = w * pow(share.value, 2 * _lagrange_at_zero(ids, share.node_id, public.delta), n) % n
    except ValueError:
        raise CombineFailure('a share is not invertible modulo n', ids) from None
    e_prime = 4 * public.delta ** 2
    a = pow(e_prime, -1, e)
    b = (1 - a * e_prime) // e
    y = pow(w, a, n) * pow(x, b, n) % n
    if pow(y, e, n) != x:
        raise CombineFailure(f'combined signature from nodes {ids} does not verify', ids)
    return y


def verify_complete(public, signature, alarm):
    return pow(signature, public.e, public.n) == digest_to_int(alarm_digest(alarm), public)


# ---------------------------------------------------------------------------
# Nodes and combiner
# ---------------------------------------------------------------------------

class SignerNode:
    """In-process signer with an injectable fault."""

    def __init__(self, key_share, fault='honest'):
        if fault not in FAULTS:
            raise InvalidParams(f'unknown node fault {fault!r}')
        self.key_share = key_share
        self.fault = fault

    @property
    def node_id(self):
        return self.key_share.node_id

    def sign(self, alarm):
        if self.fault == 'silent':
            return None
        share = node_sign(self.key_share, alarm)
        return share.flipped() if self.fault == 'corrupt' else share


def arrival_order(nodes, alarm):
    """Shares in the order the combiner sees them: prompt nodes first, delayed ones last."""
    prompt = [n for n in nodes if n.fault != 'delayed']
    late = [n for n in nodes if n.fault == 'delayed']
    for node in sorted(prompt, key=lambda n: n.node_id) + sorted(late, key=lambda n: n.node_id):
        share = node.sign(alarm)
        if share is not None:
            yield share


@dataclass
class _AlarmState:
    alarm: Alarm
    validated: dict = field(default_factory=dict)
    unverified: dict = field(default_factory=dict)
    corrupted: set = field(default_factory=set)
    signature: int | None = None


class Combiner:
    def __init__(self, public):
        self.public = public
        self._lock = threading.Lock()
        self._alarms = {}

    def submit(self, alarm, share):
        """Add one share; return the signature once the alarm is complete."""
        with self._lock:
            state = self._alarms.setdefault(alarm.alarm_id, _AlarmState(alarm))
            if state.signature is not None:
                return state.signature
            node = share.node_id
            if node in state.corrupted or node in state.validated or node in state.unverified:
                return None
            state.unverified[node] = share
            if len(state.validated) + len(state.unverified) < self.public.k:
                return None
            try:
                state.signature = combine([*state.validated.values(), *state.unverified.values()],
                                          alarm, self.public)
            except CombineFailure as e:
                log.warning('alarm %s: %s; checking shares one by one', alarm.alarm_id, e)
                self._sort_out(state)
                if len(state.validated) >= self.public.k:
                    state.signature = combine(state.validated.values(), alarm, self.public)
            return state.signature

    def _sort_out(self, state):
        for node, share in sorted(state.unverified.items()):
            if verify_share(self.public, share, state.alarm):
                state.validated[node] = share
            else:
                state.corrupted.add(node)
                log.warning('alarm %s: node %d sent a corrupted share', state.alarm.alarm_id, node)
        state.unverified.clear()

    def corrupted(self, alarm):
        with self._lock:
            state = self._alarms.get(alarm.alarm_id)
            return tuple(sorted(state.corrupted)) if state else ()

    def forget(self, alarm):
        with self._lock:
            self._alarms.pop(alarm.alarm_id, None)


def process_alarm(alarm, shares, combiner):
    """Drive the combiner from an arrival-ordered share stream.

    Returns (signature, corrupted node ids) or raises QuorumUnreachable.
    """
    try:
        for share in shares:
            signature = combiner.submit(alarm, share)
            if signature is not None:
                return signature, combiner.corrupted(alarm)
        corrupted = combiner.corrupted(alarm)
        raise QuorumUnreachable(f'alarm {alarm.alarm_id}: fewer than {combiner.public.k} honest shares arrived',
                                corrupted)
    finally:
        combiner.forget(alarm)


# ---------------------------------------------------------------------------
# Append-only store
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SignedRecord:
    sequence: int
    alarm: Alarm
    digest: str
    signature: int
    corrupted_nodes: tuple
    key_id: str

    def encode(self, public):
        body = {
            'sequence': self.sequence,
            'alarm': self.alarm.to_dict(),
            'digest': self.digest,
            'signature': _hex(self.signature, public.n),
            'corrupted_nodes': list(self.corrupted_nodes),
            'key_id': self.key_id,
        }
        body['checksum'] = _checksum(body)
        return canonical_json(body).encode('utf-8')

    @classmethod
    def decode(cls, payload):
        data = json.loads(payload.decode('utf-8'))
        checksum = data.pop('checksum')
        if checksum != _checksum(data):
            raise ValueError('record checksum mismatch')
        return cls(int(data['sequence']), Alarm(**data['alarm']), data['digest'], int(data['signature'], 16),
                   tuple(data['corrupted_nodes']), data['key_id'])


def _checksum(body):
    # covers the unsigned fields (sequence, corrupted nodes) as well as alarm and signature
    return hashlib.sha256(canonical_json(body).encode('utf-8')).hexdigest()


class ResilientStore:
    """Append-only file of signed records, each prefixed by a 4-byte length."""

    def __init__(self, path, public):
        self.path = path
        self.public = public
        self._lock = threading.Lock()
        self._sequence = len(read_payloads(path)) if os.path.exists(path) else 0

    def append(self, alarm, signature, corrupted=()):
        with self._lock:
            self._sequence += 1
            record = SignedRecord(self._sequence, alarm, alarm_digest(alarm).hex(), signature,
                                  tuple(sorted(corrupted)), self.public.key_id)
            payload = record.encode(self.public)
            os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
            with open(self.path, 'ab') as f:
                f.write(_LENGTH.pack(len(payload)) + payload)
            return record


def read_payloads(path):
    """Split the store file into raw record payloads; a trailing partial record is kept as-is."""
    with open(path, 'rb') as f:
        data = f.read()
    payloads, pos = [], 0
    while pos < len(data):
        if pos + _LENGTH.size > len(data):
            payloads.append(data[pos:])
            break
        (length,) = _LENGTH.unpack_from(data, pos)
        payloads.append(data[pos + _LENGTH.size:pos + _LENGTH.size + length])
        pos += _LENGTH.size + length
    return payloads


def audit(path, public):
    failures, last_sequence = [], 0
    payloads = read_payloads(path) if os.path.exists(path) else []
    for position, payload in enumerate(payloads, start=1):
        try:
            record = SignedRecord.decode(payload)
        except (UnicodeDecodeError, json.JSONDecodeError, AttributeError, KeyError, TypeError, ValueError,
                MalformedEvent) as e:
            failures.append({'position': position, 'sequence': None, 'reason': f'unreadable record: {e}'})
            continue
        reason = None
        if record.key_id != public.key_id:
            reason = f'signed under key {record.key_id}'
        elif record.digest != alarm_digest(record.alarm).hex():
            reason = 'digest does not match the alarm'
        elif not verify_complete(public, record.signature, record.alarm):
            reason = 'signature does not verify'
        elif record.sequence <= last_sequence:
            reason = f'sequence {record.sequence} does not increase'
        if reason:
            failures.append({'position': position, 'sequence': record.sequence, 'reason': reason})
        last_sequence = max(last_sequence, record.sequence)
    for failure in failures:
        log.warning('audit: record %s failed: %s', failure['sequence'] or f'#{failure["position"]}',
                    failure['reason'])
    return {'key_id': public.key_id, 'records': len(payloads), 'failures': failures, 'clean': not failures}


# ---------------------------------------------------------------------------
# Signing every alarm of a run
# ---------------------------------------------------------------------------

def build_nodes(material, faults=None):
    faults = {int(k): v for k, v in (faults or {}).items()}
    unknown = set(faults) - {s.node_id for s in material.shares}
    if unknown:
        raise InvalidParams(f'faults name unknown nodes {sorted(unknown)}')
    return [SignerNode(share, faults.get(share.node_id, 'honest')) for share in material.shares]


def sign_alarms(alarms, nodes, public, store, dead_letter_path=None):
    combiner = Combiner(public)
    stored, parked = [], []
    for alarm in alarms:
        try:
            signature, corrupted = process_alarm(alarm, arrival_order(nodes, alarm), combiner)
        except QuorumUnreachable as e:
            log.error('%s; alarm parked in the dead-letter log', e)
            parked.append({'alarm': alarm.to_dict(), 'reason': str(e), 'corrupted_nodes': list(e.corrupted)})
            continue
        stored.append(store.append(alarm, signature, corrupted))
    if dead_letter_path is not None:
        with open(dead_letter_path, 'wb') as f:
            for entry in parked:
                f.write((canonical_json(entry) + '\n').encode('utf-8'))
    return stored, parked
