import hmac, json, queue, threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import params
from cmn.crypto import Assertion, Rng, SigningKeyPair, b64e, decode_public_key, generate_keypair, sign_bytes, verify_assertion, verify_bytes
from cmn.errors import AlreadyRegistered, AuthError, NotFound, StateError
from store import ServerStore, Session


class LoginState(str, Enum):
    PENDING = 'pending'
    APPROVED = 'approved'
    DENIED = 'denied'
    EXPIRED = 'expired'


@dataclass(frozen=True)
class DirectoryEntry:
    user_id: str
    email: str
    phone: str
    signing_pubkey: bytes


@dataclass
class LoginAttempt:
    attempt_id: str
    user_id: str
    challenge: bytes
    state: LoginState
    created_at: int
    session_id: Optional[bytes] = field(default=None, repr=False)
    claimed: bool = False


@dataclass(frozen=True)
class PushDelivery:
    attempt_id: str
    user_id: str
    challenge: bytes


@dataclass(frozen=True)
class SpRegistration:
    client_id: bytes
    client_secret: bytes = field(repr=False)
    redirect_url: str = ''
    logout_url: str = ''


@dataclass(frozen=True)
class IdentityAssertion:
    user_id: str
    client_id: bytes
    issued_at: int
    expires_at: int
    signature: bytes = b''

    def message(self) -> bytes:
        return json.dumps({'iss': params.settings['identity']['issuer'], 'user_id': self.user_id, 'client_id': b64e(self.client_id),
                           'issued_at': self.issued_at, 'expires_at': self.expires_at}, sort_keys=True).encode('utf-8')

    def to_json(self) -> str:
        return json.dumps({'user_id': self.user_id, 'client_id': b64e(self.client_id), 'issued_at': self.issued_at,
                           'expires_at': self.expires_at, 'signature': b64e(self.signature)}, sort_keys=True)


class PushChannel:
    """In-process stand-in for push notifications to one user's phone."""
    def __init__(self): self._queue = queue.SimpleQueue()

    def deliver(self, delivery: PushDelivery) -> None: self._queue.put(delivery)

    def take(self) -> Optional[PushDelivery]:
        try: return self._queue.get_nowait()
        except queue.Empty: return None


class IdentityProvider:
    def __init__(self, store: ServerStore, rng: Rng, keys: SigningKeyPair = None):
        self.store, self.rng = store, rng
        self.keys = keys or generate_keypair(rng, 'sign')
        self._directory: Dict[str, DirectoryEntry] = {}
        self._attempts: Dict[str, LoginAttempt] = {}
        self._push: Dict[str, PushChannel] = {}
        self._sps: Dict[bytes, SpRegistration] = {}
        self._lock = threading.RLock()

    @property
    def public_key(self): return self.keys.public

    def enroll(self, user_id: str, email: str, phone: str, signing_pubkey: bytes) -> None:
        with self._lock:
            if user_id in self._directory: raise AlreadyRegistered(f'{user_id!r} already enrolled')
            decode_public_key(signing_pubkey)
            self._directory[user_id] = DirectoryEntry(user_id, email, phone, bytes(signing_pubkey))

    def lookup(self, email_or_user_id: str) -> DirectoryEntry:
        with self._lock:
            if email_or_user_id in self._directory: return self._directory[email_or_user_id]
            for entry in self._directory.values():
                if entry.email == email_or_user_id: return entry
            raise NotFound(f'{email_or_user_id!r} is not in the directory')

    def push_channel(self, user_id: str) -> PushChannel:
        with self._lock: return self._push.setdefault(user_id, PushChannel())

    def begin_login(self, email_or_user_id: str, now: int) -> LoginAttempt:
        with self._lock:
            entry = self.lookup(email_or_user_id)
            attempt = LoginAttempt(self.rng.read(8).hex(), entry.user_id, self.rng.read(16), LoginState.PENDING, now)
            self._attempts[attempt.attempt_id] = attempt
            self.push_channel(entry.user_id).deliver(PushDelivery(attempt.attempt_id, entry.user_id, attempt.challenge))
            return attempt

    def attempt(self, attempt_id: str) -> LoginAttempt:
        with self._lock:
            try: return self._attempts[attempt_id]
            except KeyError: raise NotFound(f'unknown login attempt {attempt_id}') from None

    def complete_login(self, attempt_id: str, assertion: Assertion, now: int) -> Optional[Session]:
        """Session on success, None when the attempt is denied or has expired."""
        with self._lock:
            attempt = self.attempt(attempt_id)
            if attempt.state is not LoginState.PENDING: raise StateError(f'login attempt is {attempt.state.value}')
            if now - attempt.created_at > params.settings['identity']['attempt_ttl']:
                attempt.state = LoginState.EXPIRED
                return None
            pub = decode_public_key(self.lookup(attempt.user_id).signing_pubkey)
            if assertion.user_id != attempt.user_id or not verify_assertion(pub, assertion, attempt.challenge, now):
                attempt.state = LoginState.DENIED
                return None
            session = self.store.create_session(attempt.user_id, now)
            attempt.state, attempt.session_id = LoginState.APPROVED, session.session_id
            return session

    def claim_session(self, attempt_id: str) -> bytes:
        """Browser side of a push login: picks up the session the phone's approval created, once."""
        with self._lock:
            attempt = self.attempt(attempt_id)
            if attempt.state is not LoginState.APPROVED or attempt.claimed: raise StateError(f'no session to claim ({attempt.state.value})')
            attempt.claimed = True
            return attempt.session_id

    def sp_register(self, redirect_url: str, logout_url: str) -> SpRegistration:
        with self._lock:
            client_id = self.rng.read(16)
            while client_id in self._sps: client_id = self.rng.read(16)
            sp = SpRegistration(client_id, self.rng.read(32), redirect_url, logout_url)
            self._sps[client_id] = sp
            return sp

    def sp_lookup(self, client_id: bytes, client_secret: bytes) -> SpRegistration:
        with self._lock:
            sp = self._sps.get(client_id)
            if sp is None: raise NotFound('unknown client')
            if not hmac.compare_digest(sp.client_secret, client_secret): raise AuthError('bad client secret')
            return sp

    def applications(self, session_id: bytes, now: int) -> List[dict]:
        """Registered RPs for the dashboard; never includes client secrets."""
        if not self.store.validate_session(session_id, now): raise AuthError('session expired')
        with self._lock: return [{'client_id': b64e(sp.client_id), 'redirect_url': sp.redirect_url} for sp in self._sps.values()]

    def issue_identity_assertion(self, session_id: bytes, client_id: bytes, now: int) -> IdentityAssertion:
        if not self.store.validate_session(session_id, now): raise AuthError('session expired')
        with self._lock:
            if client_id not in self._sps: raise NotFound('unknown client')
            unsigned = IdentityAssertion(self.store.session_user(session_id), client_id, now, now + params.settings['identity']['assertion_ttl'])
            return IdentityAssertion(unsigned.user_id, client_id, unsigned.issued_at, unsigned.expires_at, sign_bytes(self.keys.private, unsigned.message()))

    def metadata(self) -> str:
        return json.dumps({'issuer': params.settings['identity']['issuer'], 'idp_pubkey': b64e(self.keys.encoded),
                           'endpoints': {'login': 'begin_login', 'login_complete': 'complete_login', 'assertion': 'issue_identity_assertion',
                                         'registration': 'sp_register', 'logout': 'revoke_session'}}, sort_keys=True, indent=1)


def rp_verify_identity_assertion(a: IdentityAssertion, client_id: bytes, idp_pubkey, now: int) -> Optional[str]:
    """Relying-party check: the user id when the assertion is authentic, addressed to this client and unexpired, else None."""
    if not verify_bytes(idp_pubkey, a.message(), a.signature): return None
    if not hmac.compare_digest(a.client_id, client_id) or now >= a.expires_at: return None
    return a.user_id
