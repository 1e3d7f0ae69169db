from enum import Enum
from typing import Callable, List, Optional, Tuple, Union

from cmn.clock import SimClock
from cmn.crypto import (DeviceKeyPair, MasterKey, QrPayload, Rng, SigningKeyPair, b64e, decode_public_key, device_id_for, export_for_test,
                        fingerprint, generate_keypair, generate_master_key, open_field, private_parts_for_test, sign_assertion, unwrap_master_key, wrap,
                        wrap_master_key)
from cmn.errors import EncodingError, GateDenied, RecoveryError, RostamError, StateError, UnwrapError, VerificationError
from cmn.events import EventLog, Outcome
from identity import IdentityProvider
from store import MailboxChannel, ServerStore, Session

BiometricGate = Callable[[], bool] #True approves, False denies


class MobileStatus(str, Enum):
    UNREGISTERED = 'unregistered'
    REGISTERED = 'registered'
    RECOVERING = 'recovering'


class MobileActor:
    """
    The phone: owns the device key pair, the signing pair and the MasterKey (imported, unexportable).
    Keeps no credential data between calls.
    """
    def __init__(self, user_id: str, rng: Rng, store: ServerStore, idp: IdentityProvider, clock: SimClock, log: EventLog = None, name: str = 'mobile'):
        self.user_id, self.rng, self.store, self.idp, self.clock = user_id, rng, store, idp, clock
        self.log = log if log is not None else EventLog()
        self.name = name
        self.status = MobileStatus.UNREGISTERED
        self.session_id: Optional[bytes] = None
        self._keys: Optional[DeviceKeyPair] = None
        self._signing: Optional[SigningKeyPair] = None
        self._master_key: Optional[MasterKey] = None
        self._inbox = [] #push deliveries seen but not yet answered

    def _emit(self, action: str, outcome: str, detail: str = None): self.log.emit(self.name, action, outcome, detail)

    def _require(self, status: MobileStatus):
        if self.status is not status: raise StateError(f'{self.name} is {self.status.value}, expected {status.value}')

    @property
    def signing_public(self) -> bytes:
        if self._signing is None: raise StateError(f'{self.name} has no signing key')
        return self._signing.encoded

    def setup(self) -> None:
        self._require(MobileStatus.UNREGISTERED)
        keys, signing, mk = generate_keypair(self.rng, 'wrap'), generate_keypair(self.rng, 'sign'), generate_master_key(self.rng)
        try: self.store.register_user(self.user_id, keys.encoded, fingerprint(keys.encoded), wrap_master_key(keys.public, mk, self.rng))
        except RostamError as e:
            self._emit('setup', 'error', type(e).__name__)
            raise
        self._keys, self._signing, self._master_key = keys, signing, mk.imported()
        self.status = MobileStatus.REGISTERED
        self._emit('setup', 'ok')

    def approve_login(self, gate: BiometricGate) -> Optional[Session]:
        self._require(MobileStatus.REGISTERED)
        delivery = self.idp.push_channel(self.user_id).take()
        if delivery is not None: self._inbox.append(delivery)
        if not self._inbox: raise StateError('no pending login challenge')
        if not gate():
            self._emit('approve_login', 'denied')
            raise GateDenied('biometric check denied')
        delivery = self._inbox.pop()
        now = self.clock.now
        session = self.idp.complete_login(delivery.attempt_id, sign_assertion(self._signing.private, delivery.user_id, delivery.challenge, now), now)
        self._emit('approve_login', 'ok' if session else 'denied')
        return session

    def login(self, gate: BiometricGate) -> Optional[Session]:
        """The phone's own passwordless login; the session authorizes pairing-time mailbox writes."""
        self.idp.begin_login(self.user_id, self.clock.now)
        session = self.approve_login(gate)
        self.session_id = session.session_id if session else None
        return session

    def _fetch_verified_pubkey(self, qr: QrPayload, action: str):
        try: pubkey, wrapped = self.store.get_pairing_material(self.user_id, qr.fp)
        except RostamError as e:
            self._emit(action, Outcome.ABORT.value, type(e).__name__)
            raise
        if fingerprint(pubkey) != qr.fp:
            self._emit(action, Outcome.ABORT.value, 'fingerprint mismatch')
            raise VerificationError('server returned a public key that does not match the scanned fingerprint')
        try: return decode_public_key(pubkey), wrapped
        except EncodingError as e: raise VerificationError(str(e)) from None

    def scan_pairing_qr(self, payload: Union[bytes, QrPayload]) -> None:
        self._require(MobileStatus.REGISTERED)
        qr = payload if isinstance(payload, QrPayload) else QrPayload.parse(payload)
        ext_pub, wrapped = self._fetch_verified_pubkey(qr, 'scan_pairing_qr')
        _, mk = unwrap_master_key(self._keys.private, wrapped)
        message = wrap_master_key(ext_pub, mk, self.rng, prefix=qr.token)
        self.store.mailbox_put(self.user_id, MailboxChannel.masterkey_update(device_id_for(qr.fp)), message.to_bytes(), self.session_id, self.clock.now)
        self._emit('scan_pairing_qr', 'ok')

    def begin_recovery(self) -> None:
        if self.status is MobileStatus.REGISTERED: raise StateError(f'{self.name} is already registered')
        # repeated calls regenerate the key pairs
        self._keys, self._signing, self._master_key = generate_keypair(self.rng, 'wrap'), generate_keypair(self.rng, 'sign'), None
        self.status = MobileStatus.RECOVERING
        self._emit('begin_recovery', 'ok')

    def scan_recovery_qr(self, payload: Union[bytes, QrPayload]) -> None:
        self._require(MobileStatus.RECOVERING)
        qr = payload if isinstance(payload, QrPayload) else QrPayload.parse(payload)
        ext_pub, _ = self._fetch_verified_pubkey(qr, 'scan_recovery_qr')
        self.store.mailbox_put(self.user_id, MailboxChannel.RECOVERY_REQUEST, wrap(ext_pub, qr.token + self._keys.encoded, self.rng).to_bytes())
        self._emit('scan_recovery_qr', 'ok')

    def finish_recovery(self) -> Outcome:
        self._require(MobileStatus.RECOVERING)
        data = self.store.mailbox_take(self.user_id, MailboxChannel.RECOVERY_RESPONSE)
        if data is None: return Outcome.RETRY
        try: _, mk = unwrap_master_key(self._keys.private, data)
        except UnwrapError:
            self._emit('finish_recovery', Outcome.ABORT.value, 'unwrap failed')
            raise RecoveryError('recovery response did not decrypt') from None
        self.store.replace_mobile(self.user_id, self._keys.encoded, fingerprint(self._keys.encoded), wrap_master_key(self._keys.public, mk, self.rng))
        self._master_key, self.status = mk, MobileStatus.REGISTERED
        self._emit('finish_recovery', 'ok')
        return Outcome.OK

    def reveal_credential(self, credential_id: bytes, gate: BiometricGate) -> Tuple[str, str, str]:
        self._require(MobileStatus.REGISTERED)
        if not gate():
            self._emit('reveal_credential', 'denied')
            raise GateDenied('biometric check denied')
        record = self.store.get_credential(self.user_id, credential_id)
        return (open_field(self._master_key, 'url', record.enc_url).decode('utf-8'),
                open_field(self._master_key, 'username', record.enc_username).decode('utf-8'),
                open_field(self._master_key, 'password', record.enc_password).decode('utf-8'))

    def list_credentials(self) -> List[Tuple[bytes, str, str]]:
        self._require(MobileStatus.REGISTERED)
        return [(r.credential_id, open_field(self._master_key, 'url', r.enc_url).decode('utf-8'), open_field(self._master_key, 'username', r.enc_username).decode('utf-8'))
                for r in self.store.list_credentials(self.user_id)]

    def master_key_for_test(self) -> bytes: return export_for_test(self._master_key)

    def secrets_for_test(self) -> List[bytes]:
        """MasterKey and private-key bytes, the ground truth a breach scan searches for."""
        out = [export_for_test(self._master_key)] if self._master_key is not None else []
        for pair in (self._keys, self._signing):
            if pair is not None: out += private_parts_for_test(pair.private)
        return out

    def to_dict(self) -> dict:
        return {'name': self.name, 'user_id': self.user_id, 'status': self.status.value, 'has_master_key': self._master_key is not None,
                'pubkey': b64e(self._keys.encoded) if self._keys else None, 'signing_pubkey': b64e(self._signing.encoded) if self._signing else None}
