import base64, hmac, secrets
from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union

from Crypto.Cipher import AES, ChaCha20, PKCS1_OAEP
from Crypto.Hash import HMAC, SHA256
from Crypto.Protocol.KDF import HKDF
from Crypto.PublicKey import RSA
from Crypto.Signature import pkcs1_15

import params
from cmn.errors import EncodingError, GenerationError, IntegrityError, ParseError, UnexportableKeyError, UnwrapError

CONTEXTS = frozenset({'url', 'username', 'password', 'mailbox'})
NONCE_BYTES, MAC_BYTES, MODULUS_BYTES = 16, 32, 256

PairingToken = bytes
Fingerprint = bytes


def b64e(data: bytes) -> str: return base64.urlsafe_b64encode(data).rstrip(b'=').decode('ascii')

def b64d(text: str) -> bytes:
    try: return base64.b64decode(text + '=' * (-len(text) % 4), altchars=b'-_', validate=True)
    except (ValueError, TypeError) as e: raise EncodingError(f'invalid base64url: {e}') from None


class Rng:
    """
    Random source injected into every actor. Without a seed it reads the OS CSPRNG;
    with a seed it is a ChaCha20 keystream keyed by SHA-256(seed, label), so runs are reproducible.
    """
    def __init__(self, seed: int = None, label: bytes = b''):
        self.seed, self.label = seed, label
        self._stream = None
        if seed is not None:
            key = SHA256.new(b'rostam-rng' + int(seed).to_bytes(8, 'big') + label).digest()
            self._stream = ChaCha20.new(key=key, nonce=bytes(8))

    def read(self, n: int) -> bytes:
        try: out = secrets.token_bytes(n) if self._stream is None else self._stream.encrypt(bytes(n))
        except (ValueError, OverflowError, OSError) as e: raise GenerationError(f'random source failed: {e}') from e
        if len(out) != n: raise GenerationError(f'random source returned {len(out)} of {n} bytes')
        return out

    def fork(self, label: str) -> 'Rng': return Rng(self.seed, self.label + b'/' + label.encode())


class MasterKey:
    """256-bit credential root key. Once imported into a key store (exportable=False) its bytes never leave this module."""
    __slots__ = ('_material', 'exportable')

    def __init__(self, material: bytes, exportable: bool = True):
        if len(material) != params.settings['crypto']['master_key_bytes']: raise EncodingError(f'MasterKey must be {params.settings["crypto"]["master_key_bytes"]} bytes')
        self._material, self.exportable = bytes(material), exportable

    def export(self) -> bytes:
        if not self.exportable: raise UnexportableKeyError('MasterKey is held by a key store')
        return self._material

    def imported(self) -> 'MasterKey': return MasterKey(self._material, exportable=False)

    def matches(self, other: 'MasterKey') -> bool: return hmac.compare_digest(self._material, other._material)

    def __reduce__(self):
        if not self.exportable: raise UnexportableKeyError('MasterKey is held by a key store')
        return MasterKey, (self._material, True)

    def __repr__(self): return f'MasterKey(exportable={self.exportable})'


def export_for_test(mk: MasterKey) -> bytes:
    """Test-only export hook; refuses unless params.settings['test_hooks'] is on."""
    if not params.settings['test_hooks']: raise UnexportableKeyError('test hooks are disabled')
    return mk._material

def private_parts_for_test(key: RSA.RsaKey) -> Tuple[bytes, bytes, bytes]:
    """d, p, q as big-endian bytes, for scanning dumps; same gate as export_for_test."""
    if not params.settings['test_hooks']: raise UnexportableKeyError('test hooks are disabled')
    return tuple(int(x).to_bytes((int(x).bit_length() + 7) // 8, 'big') for x in (key.d, key.p, key.q))


@dataclass(frozen=True, repr=False)
class DeviceKeyPair:
    public: RSA.RsaKey
    private: RSA.RsaKey
    device_id: str

    @property
    def encoded(self) -> bytes: return encode_public_key(self.public)

    def __repr__(self): return f'DeviceKeyPair(device_id={self.device_id!r})'


@dataclass(frozen=True, repr=False)
class SigningKeyPair:
    public: RSA.RsaKey
    private: RSA.RsaKey

    @property
    def encoded(self) -> bytes: return encode_public_key(self.public)

    def __repr__(self): return 'SigningKeyPair()'


@dataclass(frozen=True)
class EncryptedBlob:
    nonce: bytes
    ciphertext: bytes
    mac: bytes

    def to_bytes(self) -> bytes: return self.nonce + self.ciphertext + self.mac

    @classmethod
    def from_bytes(cls, data: bytes) -> 'EncryptedBlob':
        if len(data) < NONCE_BYTES + MAC_BYTES: raise EncodingError(f'blob too short: {len(data)} bytes')
        return cls(bytes(data[:NONCE_BYTES]), bytes(data[NONCE_BYTES:-MAC_BYTES]), bytes(data[-MAC_BYTES:]))


class WrapMode(str, Enum):
    DIRECT = 'direct'
    HYBRID = 'hybrid'


@dataclass(frozen=True)
class WrappedPayload:
    mode: WrapMode
    body: Union[bytes, EncryptedBlob] #raw OAEP block when direct, sealed payload when hybrid
    wrapped_key: bytes = b'' #OAEP block of the ephemeral key, hybrid only

    def to_bytes(self) -> bytes:
        if self.mode is WrapMode.DIRECT: return b'\x00' + self.body
        return b'\x01' + self.wrapped_key + self.body.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> 'WrappedPayload':
        if not data: raise EncodingError('empty wrapped payload')
        if data[0] == 0: return cls(WrapMode.DIRECT, bytes(data[1:]))
        if data[0] == 1: return cls(WrapMode.HYBRID, EncryptedBlob.from_bytes(data[1 + MODULUS_BYTES:]), bytes(data[1:1 + MODULUS_BYTES]))
        raise EncodingError(f'unknown wrap mode byte {data[0]}')


@dataclass(frozen=True)
class Assertion:
    user_id: str
    challenge: bytes
    issued_at: int
    signature: bytes

    def message(self) -> bytes: return _assertion_message(self.user_id, self.challenge, self.issued_at)


@dataclass(frozen=True)
class QrPayload:
    token: PairingToken
    fp: Fingerprint
    PREFIX = 'rostam-qr:v1:'

    def to_bytes(self) -> bytes: return self.token + self.fp

    def to_text(self) -> str: return self.PREFIX + b64e(self.to_bytes())

    @classmethod
    def parse(cls, data: bytes) -> 'QrPayload':
        n = params.settings['crypto']['token_bytes']
        if len(data) != n + 32: raise ParseError(f'QR payload must be {n + 32} bytes, got {len(data)}')
        return cls(bytes(data[:n]), bytes(data[n:]))

    @classmethod
    def from_text(cls, text: str) -> 'QrPayload':
        if not text.startswith(cls.PREFIX): raise ParseError(f'QR text must start with {cls.PREFIX!r}')
        try: return cls.parse(b64d(text[len(cls.PREFIX):]))
        except EncodingError as e: raise ParseError(str(e)) from None


def generate_master_key(rng: Rng) -> MasterKey: return MasterKey(rng.read(params.settings['crypto']['master_key_bytes']))

def generate_token(rng: Rng) -> PairingToken: return rng.read(params.settings['crypto']['token_bytes'])

def generate_keypair(rng: Rng, purpose: str = 'wrap') -> Union[DeviceKeyPair, SigningKeyPair]:
    if purpose not in ('wrap', 'sign'): raise ValueError(f'purpose must be wrap or sign, not {purpose!r}')
    try: key = RSA.generate(params.settings['crypto']['rsa_bits'], randfunc=rng.read, e=params.settings['crypto']['rsa_exponent'])
    except GenerationError: raise
    except (ValueError, TypeError) as e: raise GenerationError(f'RSA key generation failed: {e}') from e
    if purpose == 'sign': return SigningKeyPair(key.public_key(), key)
    return DeviceKeyPair(key.public_key(), key, device_id_for(fingerprint(encode_public_key(key))))

def device_id_for(fp: Fingerprint) -> str: return f'dev-{fp[:8].hex()}'


def encode_public_key(key: RSA.RsaKey) -> bytes:
    e = key.e
    return key.n.to_bytes(MODULUS_BYTES, 'big') + e.to_bytes((e.bit_length() + 7) // 8, 'big')

def decode_public_key(encoding: bytes) -> RSA.RsaKey:
    if len(encoding) <= MODULUS_BYTES or encoding[MODULUS_BYTES] == 0: raise EncodingError('malformed public key encoding')
    n, e = int.from_bytes(encoding[:MODULUS_BYTES], 'big'), int.from_bytes(encoding[MODULUS_BYTES:], 'big')
    if n.bit_length() != params.settings['crypto']['rsa_bits']: raise EncodingError(f'modulus is {n.bit_length()} bits')
    try: return RSA.construct((n, e))
    except ValueError as e: raise EncodingError(f'invalid RSA public key: {e}') from None

def fingerprint(encoding: bytes) -> Fingerprint:
    if not isinstance(encoding, (bytes, bytearray)): raise EncodingError('fingerprint expects the canonical byte encoding')
    return SHA256.new(bytes(encoding)).digest()


def derive_subkeys(mk: MasterKey) -> Tuple[bytes, bytes, bytes]:
    return tuple(HKDF(mk._material, 32, b'', SHA256, context=b'rostam/' + label) for label in (b'enc', b'mac', b'lookup'))

def _mac_input(context: str, nonce: bytes, ciphertext: bytes) -> bytes:
    label = context.encode()
    return bytes([len(label)]) + label + nonce + ciphertext

def seal_field(mk: MasterKey, context: str, plaintext: bytes, rng: Rng) -> EncryptedBlob:
    if context not in CONTEXTS: raise ValueError(f'unknown context {context!r}')
    k_enc, k_mac, _ = derive_subkeys(mk)
    nonce = rng.read(NONCE_BYTES)
    ciphertext = AES.new(k_enc, AES.MODE_CTR, nonce=b'', initial_value=nonce).encrypt(plaintext)
    return EncryptedBlob(nonce, ciphertext, HMAC.new(k_mac, _mac_input(context, nonce, ciphertext), SHA256).digest())

def open_field(mk: MasterKey, context: str, blob: EncryptedBlob) -> bytes:
    if context not in CONTEXTS: raise ValueError(f'unknown context {context!r}')
    if len(blob.nonce) != NONCE_BYTES or len(blob.mac) != MAC_BYTES: raise IntegrityError('malformed blob')
    k_enc, k_mac, _ = derive_subkeys(mk)
    try: HMAC.new(k_mac, _mac_input(context, blob.nonce, blob.ciphertext), SHA256).verify(blob.mac)
    except ValueError: raise IntegrityError(f'MAC check failed for {context}') from None
    return AES.new(k_enc, AES.MODE_CTR, nonce=b'', initial_value=blob.nonce).decrypt(blob.ciphertext)

def lookup_tag(mk: MasterKey, canonical_url: str) -> bytes:
    return HMAC.new(derive_subkeys(mk)[2], canonical_url.encode('utf-8'), SHA256).digest()


def wrap(pub: RSA.RsaKey, payload: bytes, rng: Rng) -> WrappedPayload:
    if not payload: raise ValueError('payload must be non-empty')
    oaep = PKCS1_OAEP.new(pub, hashAlgo=SHA256, randfunc=rng.read)
    if len(payload) <= params.settings['crypto']['oaep_capacity']: return WrappedPayload(WrapMode.DIRECT, oaep.encrypt(payload))
    ephemeral = generate_master_key(rng)
    return WrappedPayload(WrapMode.HYBRID, seal_field(ephemeral, 'mailbox', payload, rng), oaep.encrypt(ephemeral._material))

def unwrap(priv: RSA.RsaKey, wp: Union[WrappedPayload, bytes]) -> bytes:
    # every failure cause surfaces as the same UnwrapError
    try:
        if isinstance(wp, (bytes, bytearray)): wp = WrappedPayload.from_bytes(wp)
        oaep = PKCS1_OAEP.new(priv, hashAlgo=SHA256)
        if wp.mode is WrapMode.DIRECT: return oaep.decrypt(wp.body)
        return open_field(MasterKey(oaep.decrypt(wp.wrapped_key)), 'mailbox', wp.body)
    except (ValueError, TypeError, EncodingError, IntegrityError): raise UnwrapError('unwrap failed') from None

def wrap_master_key(pub: RSA.RsaKey, mk: MasterKey, rng: Rng, prefix: bytes = b'') -> WrappedPayload:
    return wrap(pub, prefix + mk._material, rng)

def unwrap_master_key(priv: RSA.RsaKey, wp: Union[WrappedPayload, bytes], prefix_len: int = 0) -> Tuple[bytes, MasterKey]:
    """Returns (prefix, MasterKey) with the key already imported (unexportable)."""
    data = unwrap(priv, wp)
    if len(data) != prefix_len + params.settings['crypto']['master_key_bytes']: raise UnwrapError('unwrap failed')
    return data[:prefix_len], MasterKey(data[prefix_len:], exportable=False)


def sign_bytes(sk: RSA.RsaKey, message: bytes) -> bytes: return pkcs1_15.new(sk).sign(SHA256.new(message))

def verify_bytes(pub: RSA.RsaKey, message: bytes, signature: bytes) -> bool:
    try: pkcs1_15.new(pub).verify(SHA256.new(message), signature)
    except (ValueError, TypeError): return False
    return True

def _assertion_message(user_id: str, challenge: bytes, issued_at: int) -> bytes:
    uid = user_id.encode('utf-8')
    return len(uid).to_bytes(2, 'big') + uid + challenge + int(issued_at).to_bytes(8, 'big', signed=True)

def sign_assertion(sk: RSA.RsaKey, user_id: str, challenge: bytes, issued_at: int) -> Assertion:
    return Assertion(user_id, challenge, issued_at, sign_bytes(sk, _assertion_message(user_id, challenge, issued_at)))

def verify_assertion(pub: RSA.RsaKey, a: Assertion, expected_challenge: bytes, now: int, window: int = None) -> bool:
    window = params.settings['crypto']['assertion_window'] if window is None else window
    try: message = a.message()
    except (OverflowError, UnicodeError, TypeError): return False
    return verify_bytes(pub, message, a.signature) and hmac.compare_digest(a.challenge, expected_challenge) and abs(now - a.issued_at) <= window
