import json, os, threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from Crypto.Hash import SHA256

import params
from cmn.crypto import EncryptedBlob, Fingerprint, Rng, WrappedPayload, b64e, fingerprint
from cmn.errors import AlreadyRegistered, AuthError, FingerprintMismatch, NotFound


@dataclass(frozen=True)
class MailboxChannel:
    kind: str #masterkey_update | recovery_request | recovery_response
    device_id: Optional[str] = None

    @classmethod
    def masterkey_update(cls, device_id: str) -> 'MailboxChannel': return cls('masterkey_update', device_id)

    @property
    def key(self) -> str: return f'{self.kind}:{self.device_id}' if self.device_id else self.kind

MailboxChannel.RECOVERY_REQUEST = MailboxChannel('recovery_request')
MailboxChannel.RECOVERY_RESPONSE = MailboxChannel('recovery_response')


@dataclass
class DeviceEntry:
    device_id: str
    pubkey: bytes
    fp: Fingerprint
    wrapped_master_key_for_device: Optional[WrappedPayload] = None


@dataclass(frozen=True)
class CredentialRecord:
    credential_id: bytes
    tag: bytes
    enc_url: EncryptedBlob
    enc_username: EncryptedBlob
    enc_password: EncryptedBlob


@dataclass
class Session:
    session_id: bytes
    user_id: str
    created_at: int
    last_active: int
    revoked: bool = False


@dataclass
class UserRecord:
    user_id: str
    mobile_pubkey: bytes
    mobile_fingerprint: Fingerprint
    wrapped_master_key: WrappedPayload
    devices: Dict[str, DeviceEntry] = field(default_factory=dict)
    credentials: Dict[bytes, CredentialRecord] = field(default_factory=dict)
    mailboxes: Dict[str, bytes] = field(default_factory=dict)


class ServerStore:
    """
    Server-side database. Holds only what an attacker may read: public keys, fingerprints, wrapped keys,
    sealed credentials, mailbox ciphertexts and session metadata indexed by SHA-256 of the session id.
    All operations hold one lock, so they are atomic and linearizable.
    """
    def __init__(self, rng: Rng, snapshot_path: str = None):
        self.rng = rng
        self.snapshot_path = snapshot_path
        self._users: Dict[str, UserRecord] = {}
        self._sessions: Dict[str, Session] = {}
        self._lock = threading.RLock()

    def _user(self, user_id: str) -> UserRecord:
        try: return self._users[user_id]
        except KeyError: raise NotFound(f'unknown user {user_id!r}') from None

    @staticmethod
    def _check_fp(pubkey: bytes, fp: Fingerprint):
        if fingerprint(pubkey) != fp: raise FingerprintMismatch('fingerprint does not match public key')

    def register_user(self, user_id: str, mobile_pubkey: bytes, mobile_fp: Fingerprint, wrapped_mk: WrappedPayload) -> None:
        if user_id == 'format_version': raise ValueError('reserved user id')
        with self._lock:
            if user_id in self._users: raise AlreadyRegistered(f'user {user_id!r} already registered')
            self._check_fp(mobile_pubkey, mobile_fp)
            self._users[user_id] = UserRecord(user_id, bytes(mobile_pubkey), bytes(mobile_fp), wrapped_mk)
            self._persist()

    def replace_mobile(self, user_id: str, mobile_pubkey: bytes, mobile_fp: Fingerprint, wrapped_mk: WrappedPayload) -> None:
        with self._lock:
            record = self._user(user_id)
            self._check_fp(mobile_pubkey, mobile_fp)
            record.mobile_pubkey, record.mobile_fingerprint, record.wrapped_master_key = bytes(mobile_pubkey), bytes(mobile_fp), wrapped_mk
            self._persist()

    def get_wrapped_master_key(self, user_id: str) -> WrappedPayload:
        with self._lock: return self._user(user_id).wrapped_master_key

    def put_device(self, user_id: str, device_id: str, pubkey: bytes, fp: Fingerprint) -> None:
        with self._lock:
            record = self._user(user_id)
            self._check_fp(pubkey, fp)
            known = record.devices.get(device_id)
            if known and known.pubkey == pubkey and known.fp == fp: return
            record.devices[device_id] = DeviceEntry(device_id, bytes(pubkey), bytes(fp))
            self._persist()

    def get_device(self, user_id: str, device_id: str) -> DeviceEntry:
        with self._lock:
            try: return self._user(user_id).devices[device_id]
            except KeyError: raise NotFound(f'unknown device {device_id!r}') from None

    def set_device_master_key(self, user_id: str, device_id: str, wrapped: WrappedPayload) -> None:
        with self._lock:
            self.get_device(user_id, device_id).wrapped_master_key_for_device = wrapped
            self._persist()

    def remove_device(self, user_id: str, device_id: str) -> None:
        with self._lock:
            if self._user(user_id).devices.pop(device_id, None) is None: raise NotFound(f'unknown device {device_id!r}')
            self._user(user_id).mailboxes.pop(MailboxChannel.masterkey_update(device_id).key, None)
            self._persist()

    def get_pairing_material(self, user_id: str, device_fp: Fingerprint) -> Tuple[bytes, WrappedPayload]:
        with self._lock:
            record = self._user(user_id)
            for device in record.devices.values():
                if device.fp == device_fp: return device.pubkey, record.wrapped_master_key
            raise NotFound('no device with that fingerprint')

    def mailbox_put(self, user_id: str, channel: MailboxChannel, payload: bytes, session_id: bytes = None, now: int = None) -> None:
        with self._lock:
            record = self._user(user_id)
            if channel.kind == 'masterkey_update' and params.settings['store']['mailbox_requires_session']:
                if session_id is None or now is None or not self.validate_session(session_id, now, user_id): raise AuthError('mailbox write needs a live session')
            record.mailboxes[channel.key] = bytes(payload) #last writer wins
            self._persist()

    def mailbox_take(self, user_id: str, channel: MailboxChannel) -> Optional[bytes]:
        with self._lock:
            payload = self._user(user_id).mailboxes.pop(channel.key, None)
            if payload is not None: self._persist()
            return payload

    def upsert_credential(self, user_id: str, record: CredentialRecord) -> None:
        with self._lock:
            self._user(user_id).credentials[record.credential_id] = record
            self._persist()

    def get_credential(self, user_id: str, credential_id: bytes) -> CredentialRecord:
        with self._lock:
            try: return self._user(user_id).credentials[credential_id]
            except KeyError: raise NotFound('unknown credential') from None

    def delete_credential(self, user_id: str, credential_id: bytes) -> None:
        with self._lock:
            if self._user(user_id).credentials.pop(credential_id, None) is None: raise NotFound('unknown credential')
            self._persist()

    def find_by_tag(self, user_id: str, tag: bytes) -> List[CredentialRecord]:
        with self._lock: return [r for r in self._user(user_id).credentials.values() if r.tag == tag]

    def list_credentials(self, user_id: str) -> List[CredentialRecord]:
        with self._lock: return list(self._user(user_id).credentials.values())

    @staticmethod
    def _session_key(session_id: bytes) -> str: return SHA256.new(session_id).hexdigest()

    def create_session(self, user_id: str, now: int) -> Session:
        with self._lock:
            self._user(user_id)
            session = Session(self.rng.read(16), user_id, now, now)
            self._sessions[self._session_key(session.session_id)] = session
            self._persist()
            return session

    def validate_session(self, session_id: bytes, now: int, user_id: str = None) -> bool:
        """Idle-timeout check; a valid call refreshes last_active. Expiry is permanent."""
        with self._lock:
            session = self._sessions.get(self._session_key(session_id))
            if session is None or session.revoked: return False
            if user_id is not None and session.user_id != user_id: return False
            if now - session.last_active >= params.settings['store']['session_idle']:
                session.revoked = True
            else: session.last_active = max(session.last_active, now)
            self._persist()
            return not session.revoked

    def session_user(self, session_id: bytes) -> str:
        with self._lock:
            try: return self._sessions[self._session_key(session_id)].user_id
            except KeyError: raise NotFound('unknown session') from None

    def revoke_session(self, session_id: bytes) -> None:
        with self._lock:
            session = self._sessions.get(self._session_key(session_id))
            if session is None or session.revoked: return
            session.revoked = True
            self._persist()

    @contextmanager
    def tamper(self, user_id: str):
        """Direct write access to a user record, bypassing every check. Models a compromised server."""
        with self._lock:
            yield self._user(user_id)
            self._persist()

    def snapshot(self) -> bytes:
        with self._lock:
            doc = {'format_version': params.settings['store']['format_version']}
            for user_id, r in self._users.items():
                doc[user_id] = {
                    'mobile_pubkey': b64e(r.mobile_pubkey),
                    'mobile_fingerprint': b64e(r.mobile_fingerprint),
                    'wrapped_master_key': b64e(r.wrapped_master_key.to_bytes()),
                    'devices': {d.device_id: {'pubkey': b64e(d.pubkey), 'fp': b64e(d.fp),
                                              'wrapped_master_key': b64e(d.wrapped_master_key_for_device.to_bytes()) if d.wrapped_master_key_for_device else None}
                                for d in r.devices.values()},
                    'credentials': {b64e(c.credential_id): {'tag': b64e(c.tag), 'enc_url': b64e(c.enc_url.to_bytes()),
                                                            'enc_username': b64e(c.enc_username.to_bytes()), 'enc_password': b64e(c.enc_password.to_bytes())}
                                    for c in r.credentials.values()},
                    'mailboxes': {k: b64e(v) for k, v in r.mailboxes.items()},
                    'sessions': {k: {'created_at': s.created_at, 'last_active': s.last_active, 'revoked': s.revoked}
                                 for k, s in self._sessions.items() if s.user_id == user_id},
                }
            return json.dumps(doc, sort_keys=True, indent=1).encode('utf-8')

    def _persist(self) -> None:
        if not self.snapshot_path: return
        folder = os.path.dirname(self.snapshot_path)
        if folder and not os.path.isdir(folder): os.makedirs(folder)
        with open(f'{self.snapshot_path}.tmp', 'wb') as f: f.write(self.snapshot())
        os.replace(f'{self.snapshot_path}.tmp', self.snapshot_path)
