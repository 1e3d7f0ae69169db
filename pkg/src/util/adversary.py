"""
Server-side attacker: reads every byte the server holds and can rewrite any record,
but never sees a device's key store or the QR code shown on a screen.
"""
import json
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional

import params
from cmn.crypto import DeviceKeyPair, Fingerprint, Rng, b64e, decode_public_key, fingerprint, generate_master_key, wrap, wrap_master_key
from cmn.errors import NotFound
from cmn.events import Outcome
from store import MailboxChannel, ServerStore


@dataclass(frozen=True)
class AttackerView:
    dump: bytes #exact persistence snapshot
    device: Optional[dict] = None #non-secret state of one captured device (to_dict)

    def to_bytes(self) -> bytes:
        """Everything the attacker holds, as one buffer for breach_scan."""
        if self.device is None: return self.dump
        return self.dump + b'\n' + json.dumps(self.device, sort_keys=True).encode('utf-8')


@contextmanager
def whitebox():
    """Turns the test-only hooks on for the enclosed block; anything computed inside is a white-box control, not a verdict."""
    prev = params.settings['test_hooks']
    params.settings['test_hooks'] = True
    try: yield
    finally: params.settings['test_hooks'] = prev


def adversary_server_dump(store: ServerStore, device=None) -> AttackerView:
    return AttackerView(store.snapshot(), device.to_dict() if device is not None else None)


def _b64_forms(secret: bytes):
    # base64url of the secret at each of the three byte alignments, minus the characters shared with neighbours
    for shift in range(3):
        text = b64e(bytes(shift) + secret)
        head = (shift * 8 + 5) // 6
        tail = len(text) if (shift + len(secret)) % 3 == 0 else len(text) - 1
        if tail - head >= 4: yield text[head:tail].encode('ascii')


def breach_scan(dump: bytes, secrets: Iterable[bytes], min_len: int = 8) -> Dict[str, int]:
    """
    Counts occurrences of each secret in the dump, raw and base64url encoded.
    Secrets shorter than min_len bytes are skipped; they collide with random base64 text.
    """
    found = {'raw': 0, 'base64url': 0, 'scanned': 0}
    for secret in secrets:
        if len(secret) < min_len: continue
        found['scanned'] += 1
        found['raw'] += dump.count(secret)
        found['base64url'] += sum(dump.count(form) for form in _b64_forms(secret))
    return found


def adversary_substitute_pubkey(store: ServerStore, user_id: str, device_fp: Fingerprint, attacker_pubkey: bytes, also_fp: bool = False) -> None:
    """Swaps the device's server-side pubkey for the attacker's; the stored fingerprint stays stale unless also_fp."""
    with store.tamper(user_id) as record:
        for device in record.devices.values():
            if device.fp != device_fp: continue
            device.pubkey = bytes(attacker_pubkey)
            if also_fp: device.fp = fingerprint(attacker_pubkey)
            return
        raise NotFound('no device with that fingerprint')


def adversary_forge_mailbox(store: ServerStore, user_id: str, channel: MailboxChannel, attacker: DeviceKeyPair, guessed_token: bytes, rng: Rng,
                            recipient_pubkey: bytes, victim: Callable[[], Outcome] = None) -> Optional[Outcome]:
    """
    Writes a well-formed payload with a guessed token into the mailbox, skipping the store's session check,
    then lets the victim poll once. MasterKeyUpdate carries token ∥ attacker MasterKey; RecoveryRequest
    carries token ∥ attacker pubkey. recipient_pubkey is normally the victim's key; any other key makes the
    victim's unwrap fail.
    """
    recipient = decode_public_key(recipient_pubkey)
    if channel.kind == 'masterkey_update': payload = wrap_master_key(recipient, generate_master_key(rng), rng, prefix=guessed_token)
    else: payload = wrap(recipient, guessed_token + attacker.encoded, rng)
    with store.tamper(user_id) as record: record.mailboxes[channel.key] = payload.to_bytes()
    return victim() if victim else None
