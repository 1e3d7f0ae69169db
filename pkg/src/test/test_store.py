import json, threading

import pytest

from cmn.crypto import Rng, b64e, fingerprint, generate_master_key, lookup_tag, open_field, seal_field, wrap_master_key
from cmn.errors import AlreadyRegistered, AuthError, FingerprintMismatch, NotFound
from store import CredentialRecord, MailboxChannel, ServerStore


@pytest.fixture
def store(wrap_pair):
    rng = Rng(21)
    s = ServerStore(rng.fork('store'))
    s.register_user('alice', wrap_pair.encoded, fingerprint(wrap_pair.encoded), wrap_master_key(wrap_pair.public, generate_master_key(rng), rng))
    return s


def _record(rng: Rng, url: str = 'https://www.example.com/login') -> CredentialRecord:
    mk = generate_master_key(Rng(5))
    return CredentialRecord(rng.read(16), lookup_tag(mk, url), seal_field(mk, 'url', url.encode(), rng),
                            seal_field(mk, 'username', b'jdoe.personal', rng), seal_field(mk, 'password', b'pw', rng))


def test_register_user_rules(store, wrap_pair, other_wrap_pair):
    wrapped = store.get_wrapped_master_key('alice')
    with pytest.raises(AlreadyRegistered): store.register_user('alice', wrap_pair.encoded, fingerprint(wrap_pair.encoded), wrapped)
    with pytest.raises(FingerprintMismatch): store.register_user('bob', wrap_pair.encoded, fingerprint(other_wrap_pair.encoded), wrapped)
    with pytest.raises(NotFound): store.get_wrapped_master_key('bob')


def test_device_entries_and_pairing_material(store, other_wrap_pair):
    fp = fingerprint(other_wrap_pair.encoded)
    store.put_device('alice', other_wrap_pair.device_id, other_wrap_pair.encoded, fp)
    store.put_device('alice', other_wrap_pair.device_id, other_wrap_pair.encoded, fp)
    pubkey, wrapped = store.get_pairing_material('alice', fp)
    assert pubkey == other_wrap_pair.encoded and wrapped == store.get_wrapped_master_key('alice')
    with pytest.raises(NotFound): store.get_pairing_material('alice', bytes(32))
    with pytest.raises(FingerprintMismatch): store.put_device('alice', 'dev-x', other_wrap_pair.encoded, bytes(32))
    store.remove_device('alice', other_wrap_pair.device_id)
    with pytest.raises(NotFound): store.get_device('alice', other_wrap_pair.device_id)


def test_mailbox_is_last_writer_wins_and_read_once(store):
    session = store.create_session('alice', 0)
    channel = MailboxChannel.masterkey_update('dev-1')
    store.mailbox_put('alice', channel, b'first', session.session_id, 0)
    store.mailbox_put('alice', channel, b'second', session.session_id, 1)
    assert store.mailbox_take('alice', channel) == b'second'
    assert store.mailbox_take('alice', channel) is None
    assert store.mailbox_take('alice', MailboxChannel.masterkey_update('dev-2')) is None


def test_masterkey_update_needs_a_live_session(store):
    channel = MailboxChannel.masterkey_update('dev-1')
    with pytest.raises(AuthError): store.mailbox_put('alice', channel, b'x')
    with pytest.raises(AuthError): store.mailbox_put('alice', channel, b'x', b'not-a-session', 0)
    session = store.create_session('alice', 0)
    with pytest.raises(AuthError): store.mailbox_put('alice', channel, b'x', session.session_id, 15 * 60 + 1)
    store.mailbox_put('alice', MailboxChannel.RECOVERY_REQUEST, b'no session needed')
    assert store.mailbox_take('alice', MailboxChannel.RECOVERY_REQUEST) == b'no session needed'


def test_session_idle_timeout(store):
    session = store.create_session('alice', 100)
    assert store.validate_session(session.session_id, 100 + 899)
    # a valid check refreshes the idle timer
    assert store.validate_session(session.session_id, 100 + 899 + 899)
    assert not store.validate_session(session.session_id, 100 + 899 + 899 + 901)
    # expiry is permanent
    assert not store.validate_session(session.session_id, 100 + 899 + 899 + 901)


def test_session_expires_at_exactly_fifteen_minutes(store):
    session = store.create_session('alice', 0)
    assert not store.validate_session(session.session_id, 15 * 60)


def test_revoke_and_user_binding(store):
    session = store.create_session('alice', 0)
    assert store.session_user(session.session_id) == 'alice'
    assert not store.validate_session(session.session_id, 1, user_id='bob')
    store.revoke_session(session.session_id)
    store.revoke_session(session.session_id)
    assert not store.validate_session(session.session_id, 2)
    with pytest.raises(NotFound): store.create_session('bob', 0)


def test_credentials_crud(store):
    rng = Rng(22)
    a, b = _record(rng), _record(rng, 'https://mail.example.org/')
    store.upsert_credential('alice', a)
    store.upsert_credential('alice', b)
    assert store.find_by_tag('alice', a.tag) == [a]
    assert store.get_credential('alice', b.credential_id) == b
    assert len(store.list_credentials('alice')) == 2
    store.delete_credential('alice', a.credential_id)
    with pytest.raises(NotFound): store.delete_credential('alice', a.credential_id)
    with pytest.raises(NotFound): store.get_credential('alice', a.credential_id)
    assert store.find_by_tag('alice', a.tag) == []


def test_snapshot_holds_only_opaque_material(store):
    session = store.create_session('alice', 0)
    store.upsert_credential('alice', _record(Rng(23)))
    dump = store.snapshot()
    doc = json.loads(dump)
    assert doc['format_version'] == 1
    assert set(doc['alice']) == {'mobile_pubkey', 'mobile_fingerprint', 'wrapped_master_key', 'devices', 'credentials', 'mailboxes', 'sessions'}
    assert b64e(session.session_id).encode() not in dump and session.session_id.hex().encode() not in dump
    assert b'jdoe.personal' not in dump and b'https://www.example.com/login' not in dump
    assert dump == store.snapshot()


def test_snapshot_file_matches_dump(tmp_path, wrap_pair):
    rng = Rng(24)
    path = str(tmp_path / 'db' / 'store.json')
    s = ServerStore(rng.fork('store'), path)
    s.register_user('alice', wrap_pair.encoded, fingerprint(wrap_pair.encoded), wrap_master_key(wrap_pair.public, generate_master_key(rng), rng))
    s.mailbox_put('alice', MailboxChannel.RECOVERY_RESPONSE, b'payload')
    with open(path, 'rb') as f: assert f.read() == s.snapshot()
    assert not (tmp_path / 'db' / 'store.json.tmp').exists()


def test_tamper_bypasses_checks(store):
    with store.tamper('alice') as record: record.mailboxes[MailboxChannel.masterkey_update('dev-9').key] = b'forged'
    assert store.mailbox_take('alice', MailboxChannel.masterkey_update('dev-9')) == b'forged'


def test_reserved_user_id(store, wrap_pair):
    with pytest.raises(ValueError):
        store.register_user('format_version', wrap_pair.encoded, fingerprint(wrap_pair.encoded), store.get_wrapped_master_key('alice'))


def test_find_by_tag_agrees_with_a_plaintext_index(store):
    rng = Rng(25)
    mk = generate_master_key(rng)
    urls = [f'https://site{i}.example.net/login' for i in range(12)]
    shadow, ids = {}, []
    for i in range(60):
        url = urls[rng.read(1)[0] % len(urls)]
        record = CredentialRecord(rng.read(16), lookup_tag(mk, url), seal_field(mk, 'url', url.encode(), rng),
                                  seal_field(mk, 'username', f'user{i}'.encode(), rng), seal_field(mk, 'password', b'pw', rng))
        store.upsert_credential('alice', record)
        shadow.setdefault(url, set()).add(record.credential_id)
        ids.append((url, record.credential_id))
    for url, credential_id in ids[::5]:
        store.delete_credential('alice', credential_id)
        shadow[url].discard(credential_id)
    for url in urls + ['https://unsaved.example.net/login']:
        found = store.find_by_tag('alice', lookup_tag(mk, url))
        assert {r.credential_id for r in found} == shadow.get(url, set())
        assert all(open_field(mk, 'url', r.enc_url) == url.encode() for r in found)


def test_concurrent_writers_see_one_linear_history(store):
    session = store.create_session('alice', 0)
    channel = MailboxChannel.masterkey_update('dev-1')

    def writer(k: int):
        rng = Rng(200 + k)
        for i in range(50):
            store.upsert_credential('alice', _record(rng))
            store.mailbox_put('alice', channel, bytes([k, i]), session.session_id, 0)

    threads = [threading.Thread(target=writer, args=(k,)) for k in range(8)]
    for t in threads: t.start()
    for t in threads: t.join()
    assert len(store.list_credentials('alice')) == 8 * 50
    # the last write of the whole history is the last write of some thread
    assert store.mailbox_take('alice', channel)[1] == 49
    assert json.loads(store.snapshot())['alice']['mailboxes'] == {}

    store.mailbox_put('alice', MailboxChannel.RECOVERY_REQUEST, b'once')
    taken = []
    readers = [threading.Thread(target=lambda: taken.append(store.mailbox_take('alice', MailboxChannel.RECOVERY_REQUEST))) for _ in range(8)]
    for t in readers: t.start()
    for t in readers: t.join()
    assert sorted(taken, key=lambda x: x is None) == [b'once'] + [None] * 7
