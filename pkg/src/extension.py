import hmac
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union
from urllib.parse import urlsplit, urlunsplit

import params
from cmn.clock import SimClock, poll
from cmn.crypto import (DeviceKeyPair, MasterKey, QrPayload, Rng, b64e, decode_public_key, export_for_test, fingerprint, private_parts_for_test,
                        generate_keypair, generate_token, lookup_tag, open_field, seal_field, unwrap, unwrap_master_key, wrap_master_key)
from cmn.errors import AuthError, EncodingError, IntegrityError, NotFound, ParseError, StateError, UnexportableKeyError, UnwrapError
from cmn.events import EventLog, Outcome
from identity import IdentityProvider
from store import CredentialRecord, MailboxChannel, ServerStore

Confirm = Callable[[], bool] #save/update pop-up: True means "Yes"
DEFAULT_PORTS = {'http': 80, 'https': 443}


@dataclass(frozen=True)
class AutofillResult:
    outcome: str #filled | choose | none
    username: Optional[str] = None
    password: Optional[str] = field(default=None, repr=False)
    usernames: Tuple[str, ...] = ()


def canonicalize_url(url: str) -> str:
    """Lowercase scheme and host, drop default ports, userinfo, query and fragment; the path is kept verbatim."""
    try:
        parts = urlsplit(url.strip())
        port = parts.port
    except ValueError as e: raise ParseError(f'bad url {url!r}: {e}') from None
    scheme, host = parts.scheme.lower(), (parts.hostname or '').lower()
    if not scheme or not host: raise ParseError(f'url needs a scheme and a host: {url!r}')
    if ':' in host: host = f'[{host}]'
    netloc = host if port is None or DEFAULT_PORTS.get(scheme) == port else f'{host}:{port}'
    return urlunsplit((scheme, netloc, parts.path, '', ''))


class ExtensionActor:
    """
    The browser extension. Holds its device key pair, a one-time token while a pairing or recovery
    is in flight, the MasterKey once paired and the current session. Never keeps credential data.
    """
    def __init__(self, user_id: str, rng: Rng, store: ServerStore, idp: IdentityProvider, clock: SimClock,
                 log: EventLog = None, name: str = 'extension', on_fill: Callable[[dict], None] = None):
        self.user_id, self.rng, self.store, self.idp, self.clock = user_id, rng, store, idp, clock
        self.log = log if log is not None else EventLog()
        self.name = name
        self.on_fill = on_fill
        self.device_id: Optional[str] = None
        self.session_id: Optional[bytes] = None
        self._keys: Optional[DeviceKeyPair] = None
        self._pending_token: Optional[bytes] = None
        self._pending_purpose: Optional[str] = None #pairing | recovery
        self._master_key: Optional[MasterKey] = None

    def _emit(self, action: str, outcome: str, detail: str = None): self.log.emit(self.name, action, outcome, detail)

    @property
    def paired(self) -> bool: return self._master_key is not None

    @property
    def locked(self) -> bool: return self.session_id is None

    # session: lock / unlock

    def unlock(self, approve: Callable[[], object]) -> None:
        """Passwordless login from the browser; approve() runs the phone side (push + biometrics)."""
        attempt = self.idp.begin_login(self.user_id, self.clock.now)
        approve()
        self.session_id = self.idp.claim_session(attempt.attempt_id)
        self._emit('unlock', 'ok')

    def lock(self) -> None:
        if self.session_id is not None: self.store.revoke_session(self.session_id)
        self.session_id = None
        self._emit('lock', 'ok')

    def close_browser(self) -> None:
        self.lock()
        self._pending_token = self._pending_purpose = None

    def auto_lock(self) -> bool:
        """True when the extension is (now) locked because the session idled out."""
        if self.session_id is None: return True
        if self.store.validate_session(self.session_id, self.clock.now): return False
        self.session_id = None
        self._emit('auto_lock', 'ok')
        return True

    def _require_session(self):
        if self.auto_lock(): raise AuthError(f'{self.name} is locked')

    def _require_unlocked(self) -> MasterKey:
        if self._master_key is None: raise AuthError(f'{self.name} is not paired')
        self._require_session()
        return self._master_key

    # pairing

    def begin_pairing(self) -> QrPayload:
        self._require_session()
        if self.paired: raise StateError(f'{self.name} is already paired')
        if self._keys is None:
            self._keys = generate_keypair(self.rng, 'wrap')
            self.device_id = self._keys.device_id
        fp = fingerprint(self._keys.encoded)
        self.store.put_device(self.user_id, self.device_id, self._keys.encoded, fp)
        self._pending_token, self._pending_purpose = generate_token(self.rng), 'pairing'
        self._emit('begin_pairing', 'ok')
        return QrPayload(self._pending_token, fp)

    def _take_pending(self, purpose: str) -> bytes:
        if self._pending_token is None or self._pending_purpose != purpose: raise StateError(f'no {purpose} in progress')
        token, self._pending_token, self._pending_purpose = self._pending_token, None, None
        return token

    def _abort(self, action: str, why: str) -> Outcome:
        self._emit(action, Outcome.ABORT.value, why)
        return Outcome.ABORT

    def complete_pairing(self) -> Outcome:
        if self._pending_token is None or self._pending_purpose != 'pairing': raise StateError('no pairing in progress')
        data = self.store.mailbox_take(self.user_id, MailboxChannel.masterkey_update(self.device_id))
        if data is None: return Outcome.RETRY
        token = self._take_pending('pairing')
        try: got, mk = unwrap_master_key(self._keys.private, data, prefix_len=len(token))
        except UnwrapError: return self._abort('complete_pairing', 'unwrap failed')
        if not hmac.compare_digest(got, token): return self._abort('complete_pairing', 'token mismatch')
        self._master_key = mk
        self.store.set_device_master_key(self.user_id, self.device_id, wrap_master_key(self._keys.public, mk, self.rng))
        self._emit('complete_pairing', 'ok')
        return Outcome.OK

    def poll_pairing(self, interval: int = None, deadline: int = None, on_tick: Callable[[int], None] = None) -> Outcome:
        return poll(self.complete_pairing, self.clock, interval or params.settings['extension']['poll_interval'],
                    deadline or params.settings['extension']['poll_deadline'], Outcome.RETRY, on_tick)

    # credential manager

    def _seal(self, mk: MasterKey, url: str, username: str, password: str, credential_id: bytes = None) -> CredentialRecord:
        canonical = canonicalize_url(url)
        return CredentialRecord(credential_id or self.rng.read(16), lookup_tag(mk, canonical),
                                seal_field(mk, 'url', canonical.encode('utf-8'), self.rng),
                                seal_field(mk, 'username', username.encode('utf-8'), self.rng),
                                seal_field(mk, 'password', password.encode('utf-8'), self.rng))

    def save_credential(self, url: str, username: str, password: str, mode: str = 'manual', confirm: Confirm = None) -> Optional[bytes]:
        if mode not in ('detected', 'manual'): raise ValueError(f'mode must be detected or manual, not {mode!r}')
        mk = self._require_unlocked()
        if mode == 'detected' and not (confirm and confirm()):
            self._emit('save_credential', 'declined')
            return None
        record = self._seal(mk, url, username, password)
        self.store.upsert_credential(self.user_id, record)
        self._emit('save_credential', 'ok')
        return record.credential_id

    def _records_for(self, mk: MasterKey, url: str) -> List[Tuple[CredentialRecord, str]]:
        canonical = canonicalize_url(url)
        found = []
        for record in self.store.find_by_tag(self.user_id, lookup_tag(mk, canonical)):
            # a server that moves tags between records is caught here
            if open_field(mk, 'url', record.enc_url).decode('utf-8') != canonical: raise IntegrityError('record URL does not match its lookup tag')
            found.append((record, open_field(mk, 'username', record.enc_username).decode('utf-8')))
        return found

    def _resolve(self, mk: MasterKey, target: Union[bytes, Tuple[str, str]]) -> CredentialRecord:
        if isinstance(target, (bytes, bytearray)): return self.store.get_credential(self.user_id, bytes(target))
        url, username = target
        for record, name in self._records_for(mk, url):
            if name == username: return record
        raise NotFound(f'no credential for {username!r} at that url')

    def update_credential(self, target: Union[bytes, Tuple[str, str]], new_password: str, confirm: Confirm = None) -> bool:
        """target is a credential id or a (url, username) pair; with confirm given the update is the detected-change prompt."""
        mk = self._require_unlocked()
        record = self._resolve(mk, target)
        if confirm is not None and not confirm():
            self._emit('update_credential', 'declined')
            return False
        self.store.upsert_credential(self.user_id, replace(record, enc_password=seal_field(mk, 'password', new_password.encode('utf-8'), self.rng)))
        self._emit('update_credential', 'ok')
        return True

    def capture_login(self, url: str, username: str, password: str, confirm: Confirm) -> str:
        """Form-submission detector: offers to save a new login or update a changed password."""
        mk = self._require_unlocked()
        for record, name in self._records_for(mk, url):
            if name != username: continue
            if open_field(mk, 'password', record.enc_password).decode('utf-8') == password: return 'unchanged'
            return 'updated' if self.update_credential(record.credential_id, password, confirm) else 'declined'
        return 'saved' if self.save_credential(url, username, password, 'detected', confirm) else 'declined'

    def remove_credential(self, credential_id: bytes) -> None:
        self._require_session()
        self.store.delete_credential(self.user_id, credential_id)
        self._emit('remove_credential', 'ok')

    def _fill(self, mk: MasterKey, record: CredentialRecord, username: str = None) -> AutofillResult:
        url = open_field(mk, 'url', record.enc_url).decode('utf-8')
        username = username if username is not None else open_field(mk, 'username', record.enc_username).decode('utf-8')
        password = open_field(mk, 'password', record.enc_password).decode('utf-8')
        # values are handed to the page; the login button is left for the user to click
        if self.on_fill: self.on_fill({'url': url, 'username': username, 'password': password})
        self._emit('autofill', 'filled', username)
        return AutofillResult('filled', username, password)

    def autofill_by_id(self, credential_id: bytes) -> AutofillResult:
        mk = self._require_unlocked()
        return self._fill(mk, self.store.get_credential(self.user_id, credential_id))

    def autofill_by_url(self, url: str, choose: Callable[[Sequence[str]], Union[int, str]] = None) -> AutofillResult:
        mk = self._require_unlocked()
        found = self._records_for(mk, url)
        if not found:
            self._emit('autofill', 'none')
            return AutofillResult('none')
        usernames = tuple(name for _, name in found)
        if len(found) == 1: return self._fill(mk, found[0][0], usernames[0])
        if choose is None: return AutofillResult('choose', usernames=usernames)
        picked = choose(usernames)
        if isinstance(picked, str) and picked in usernames: index = usernames.index(picked)
        elif isinstance(picked, int) and not isinstance(picked, bool) and 0 <= picked < len(usernames): index = picked
        else: raise NotFound(f'{picked!r} is not one of the {len(usernames)} usernames saved for this url')
        return self._fill(mk, found[index][0], usernames[index])

    def dashboard(self) -> dict:
        """RP applications from the IdP plus CM accounts (url, username); no passwords."""
        mk = self._require_unlocked()
        accounts = [(b64e(r.credential_id), open_field(mk, 'url', r.enc_url).decode('utf-8'), open_field(mk, 'username', r.enc_username).decode('utf-8'))
                    for r in self.store.list_credentials(self.user_id)]
        return {'applications': self.idp.applications(self.session_id, self.clock.now), 'accounts': accounts}

    # recovery, served by an already paired extension

    def begin_recovery_serve(self) -> QrPayload:
        if not self.paired: raise StateError(f'{self.name} is not paired')
        self._pending_token, self._pending_purpose = generate_token(self.rng), 'recovery'
        self._emit('begin_recovery_serve', 'ok')
        return QrPayload(self._pending_token, fingerprint(self._keys.encoded))

    def serve_recovery(self) -> Outcome:
        if self._pending_token is None or self._pending_purpose != 'recovery': raise StateError('no recovery in progress')
        data = self.store.mailbox_take(self.user_id, MailboxChannel.RECOVERY_REQUEST)
        if data is None: return Outcome.RETRY
        token = self._take_pending('recovery')
        try: plain = unwrap(self._keys.private, data)
        except UnwrapError: return self._abort('serve_recovery', 'unwrap failed')
        if not hmac.compare_digest(plain[:len(token)], token): return self._abort('serve_recovery', 'token mismatch')
        try: phone_pub = decode_public_key(plain[len(token):])
        except EncodingError: return self._abort('serve_recovery', 'bad phone key')
        try: slot = self.store.get_device(self.user_id, self.device_id).wrapped_master_key_for_device
        except NotFound: return self._abort('serve_recovery', 'device was revoked')
        # the server copy is only a cross-check; the phone always gets the key this extension holds
        if slot is not None:
            try: _, stored = unwrap_master_key(self._keys.private, slot)
            except UnwrapError: return self._abort('serve_recovery', 'device slot did not decrypt')
            if not stored.matches(self._master_key): return self._abort('serve_recovery', 'device slot does not match the MasterKey')
        self.store.mailbox_put(self.user_id, MailboxChannel.RECOVERY_RESPONSE, wrap_master_key(phone_pub, self._master_key, self.rng).to_bytes())
        self._emit('serve_recovery', 'ok')
        return Outcome.OK

    def poll_recovery(self, interval: int = None, deadline: int = None, on_tick: Callable[[int], None] = None) -> Outcome:
        return poll(self.serve_recovery, self.clock, interval or params.settings['extension']['poll_interval'],
                    deadline or params.settings['extension']['poll_deadline'], Outcome.RETRY, on_tick)

    # test-only

    def master_key_for_test(self) -> bytes: return export_for_test(self._master_key)

    def secrets_for_test(self) -> List[bytes]:
        """MasterKey and private-key bytes, the ground truth a breach scan searches for."""
        out = [export_for_test(self._master_key)] if self._master_key is not None else []
        if self._keys is not None: out += private_parts_for_test(self._keys.private)
        return out

    def pending_token_for_test(self) -> bytes:
        if not params.settings['test_hooks']: raise UnexportableKeyError('test hooks are disabled')
        return self._pending_token

    def to_dict(self) -> dict:
        return {'name': self.name, 'user_id': self.user_id, 'device_id': self.device_id, 'paired': self.paired, 'locked': self.locked,
                'pending': self._pending_purpose, 'pubkey': b64e(self._keys.encoded) if self._keys else None}
