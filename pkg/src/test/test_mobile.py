import json

import pytest

from cmn.crypto import QrPayload, WrapMode, WrappedPayload, export_for_test, unwrap_master_key
from cmn.errors import AlreadyRegistered, GateDenied, NotFound, ParseError, RecoveryError, StateError, UnexportableKeyError, VerificationError
from cmn.events import Outcome
from identity import LoginState
from mobile import MobileStatus
from store import MailboxChannel
from util.adversary import adversary_substitute_pubkey

from conftest import PAIR


def test_setup_uploads_a_wrapped_copy_of_the_master_key(make_world):
    w = make_world(steps=PAIR[:1])
    phone = w.actors['phone']
    assert phone.status is MobileStatus.REGISTERED
    _, server_copy = unwrap_master_key(phone._keys.private, w.store.get_wrapped_master_key(w.user_id))
    assert export_for_test(server_copy) == phone.master_key_for_test()
    with pytest.raises(UnexportableKeyError): phone._master_key.export()
    with pytest.raises(StateError): phone.setup()


def test_second_phone_cannot_register_the_same_user(make_world):
    w = make_world(steps=PAIR[:1])
    other = w.actors['phone2']
    with pytest.raises(AlreadyRegistered): other.setup()
    assert other.status is MobileStatus.UNREGISTERED and other.to_dict()['pubkey'] is None
    assert w.log.records[-1]['outcome'] == 'error'


def test_login_approval_and_denial(make_world):
    w = make_world(steps=PAIR[:1])
    phone = w.actors['phone']
    with pytest.raises(StateError): phone.approve_login(lambda: True)
    attempt = w.idp.begin_login(w.user_id, w.clock.now)
    with pytest.raises(GateDenied): phone.approve_login(lambda: False)
    assert w.idp.attempt(attempt.attempt_id).state is LoginState.PENDING
    assert phone.approve_login(lambda: True) is not None
    assert w.idp.attempt(attempt.attempt_id).state is LoginState.APPROVED


def test_malformed_qr_makes_no_server_calls(make_world, counting):
    w = make_world(steps=PAIR[:2])
    phone = w.actors['phone']
    phone.store = counting(w.store)
    with pytest.raises(ParseError): phone.scan_pairing_qr(bytes(47))
    assert phone.store.calls == []


def test_pairing_writes_token_and_master_key_for_the_extension(make_world):
    w = make_world(steps=PAIR[:3])
    phone, ext = w.actors['phone'], w.actors['ext']
    qr = ext.begin_pairing()
    phone.scan_pairing_qr(qr.to_bytes())
    raw = w.store.mailbox_take(w.user_id, MailboxChannel.masterkey_update(ext.device_id))
    assert WrappedPayload.from_bytes(raw).mode is WrapMode.DIRECT
    token, mk = unwrap_master_key(ext._keys.private, raw, prefix_len=16)
    assert token == qr.token and export_for_test(mk) == phone.master_key_for_test()


@pytest.mark.parametrize('also_fp', [False, True])
def test_substituted_pubkey_aborts_before_any_write(make_world, also_fp):
    w = make_world(steps=PAIR[:3])
    phone, ext = w.actors['phone'], w.actors['ext']
    qr = ext.begin_pairing()
    adversary_substitute_pubkey(w.store, w.user_id, qr.fp, w.attacker.encoded, also_fp=also_fp)
    with pytest.raises(VerificationError if not also_fp else NotFound): phone.scan_pairing_qr(qr.to_bytes())
    assert w.log.records[-1]['outcome'] == 'abort'
    assert ext.complete_pairing() is Outcome.RETRY


def test_reveal_is_gated_before_the_network(paired, counting):
    ext, phone = paired.actors['ext'], paired.actors['phone']
    credential_id = ext.save_credential('https://www.example.com/login', 'jdoe.personal', 'correct-horse-battery')
    assert phone.reveal_credential(credential_id, lambda: True) == ('https://www.example.com/login', 'jdoe.personal', 'correct-horse-battery')
    phone.store = counting(paired.store)
    with pytest.raises(GateDenied): phone.reveal_credential(credential_id, lambda: False)
    assert phone.store.calls == []
    phone.store = paired.store
    with pytest.raises(NotFound): phone.reveal_credential(bytes(16), lambda: True)


def test_list_credentials_has_no_passwords(paired):
    ext, phone = paired.actors['ext'], paired.actors['phone']
    assert phone.list_credentials() == []
    for i in range(3): ext.save_credential(f'https://site{i}.example.net/', f'user{i}.name', f'secret-password-{i}')
    entries = phone.list_credentials()
    assert sorted(url for _, url, _ in entries) == [f'https://site{i}.example.net/' for i in range(3)]
    assert not any('secret-password' in str(entry) for entry in entries)
    state = json.dumps(phone.to_dict())
    assert 'secret-password' not in state and 'user0.name' not in state


def test_begin_recovery_rules(make_world):
    w = make_world(steps=PAIR[:1])
    with pytest.raises(StateError): w.actors['phone'].begin_recovery()
    fresh = w.actors['phone2']
    fresh.begin_recovery()
    first = fresh.to_dict()['pubkey']
    fresh.begin_recovery()
    assert fresh.status is MobileStatus.RECOVERING and fresh.to_dict()['pubkey'] != first
    assert not fresh.to_dict()['has_master_key']
    assert fresh.finish_recovery() is Outcome.RETRY


def test_scan_recovery_qr_needs_recovering_state(paired):
    qr = paired.actors['ext'].begin_recovery_serve()
    with pytest.raises(StateError): paired.actors['phone'].scan_recovery_qr(qr)


def test_recovery_request_is_hybrid_wrapped(paired):
    fresh, ext = paired.actors['phone2'], paired.actors['ext']
    fresh.begin_recovery()
    fresh.scan_recovery_qr(ext.begin_recovery_serve().to_bytes())
    raw = paired.store.mailbox_take(paired.user_id, MailboxChannel.RECOVERY_REQUEST)
    assert WrappedPayload.from_bytes(raw).mode is WrapMode.HYBRID


def test_tampered_recovery_qr_aborts(paired):
    fresh, ext = paired.actors['phone2'], paired.actors['ext']
    fresh.begin_recovery()
    qr = ext.begin_recovery_serve()
    with pytest.raises(NotFound): fresh.scan_recovery_qr(QrPayload(qr.token, bytes(32)))
    assert paired.log.records[-1]['outcome'] == 'abort'


def test_corrupted_recovery_response(paired):
    fresh = paired.actors['phone2']
    fresh.begin_recovery()
    paired.store.mailbox_put(paired.user_id, MailboxChannel.RECOVERY_RESPONSE, b'\x00' + bytes(256))
    with pytest.raises(RecoveryError): fresh.finish_recovery()
    assert fresh.status is MobileStatus.RECOVERING


def test_full_recovery(paired):
    ext, old, fresh = paired.actors['ext'], paired.actors['phone'], paired.actors['phone2']
    credential_id = ext.save_credential('https://www.example.com/login', 'jdoe.personal', 'correct-horse-battery')
    paired.run([{'actor': 'ext', 'action': 'recover', 'mobile': 'phone2'}])
    assert fresh.status is MobileStatus.REGISTERED
    assert fresh.master_key_for_test() == old.master_key_for_test()
    assert fresh.reveal_credential(credential_id, lambda: True)[2] == 'correct-horse-battery'
    _, mk = unwrap_master_key(fresh._keys.private, paired.store.get_wrapped_master_key(paired.user_id))
    assert export_for_test(mk) == old.master_key_for_test()


def test_mobile_state_never_serializes_key_material(paired):
    state = json.dumps(paired.actors['phone'].to_dict())
    for secret in paired.actors['phone'].secrets_for_test():
        assert secret.hex() not in state
