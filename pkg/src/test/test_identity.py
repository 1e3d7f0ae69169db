import json

import pytest

from cmn.crypto import Rng, fingerprint, generate_master_key, sign_assertion, wrap_master_key
from cmn.errors import AlreadyRegistered, AuthError, NotFound, StateError
from identity import IdentityAssertion, IdentityProvider, LoginState, rp_verify_identity_assertion
from store import ServerStore


@pytest.fixture
def idp(wrap_pair, sign_pair, idp_sign_pair):
    rng = Rng(31)
    store = ServerStore(rng.fork('store'))
    store.register_user('alice', wrap_pair.encoded, fingerprint(wrap_pair.encoded), wrap_master_key(wrap_pair.public, generate_master_key(rng), rng))
    # the IdP signs with a reused test key; generating one per test is slow
    provider = IdentityProvider(store, rng.fork('idp'), keys=idp_sign_pair)
    provider.enroll('alice', 'alice@example.com', '+1-555-0100', sign_pair.encoded)
    return provider


def _approve(idp, sign_pair, attempt, now):
    delivery = idp.push_channel('alice').take()
    assert delivery.attempt_id == attempt.attempt_id
    return idp.complete_login(attempt.attempt_id, sign_assertion(sign_pair.private, 'alice', delivery.challenge, now), now)


def test_directory(idp, sign_pair):
    assert idp.lookup('alice@example.com').user_id == 'alice'
    assert idp.lookup('alice').signing_pubkey == sign_pair.encoded
    with pytest.raises(AlreadyRegistered): idp.enroll('alice', 'a@example.com', '', sign_pair.encoded)
    with pytest.raises(NotFound): idp.lookup('nobody@example.com')


def test_passwordless_login(idp, sign_pair):
    attempt = idp.begin_login('alice@example.com', 50)
    assert attempt.state is LoginState.PENDING and len(attempt.challenge) == 16
    session = _approve(idp, sign_pair, attempt, 55)
    assert session is not None and session.user_id == 'alice'
    assert idp.attempt(attempt.attempt_id).state is LoginState.APPROVED
    assert idp.claim_session(attempt.attempt_id) == session.session_id
    with pytest.raises(StateError): idp.claim_session(attempt.attempt_id)
    with pytest.raises(StateError): idp.complete_login(attempt.attempt_id, sign_assertion(sign_pair.private, 'alice', attempt.challenge, 56), 56)


def test_bad_assertion_denies_the_attempt(idp, sign_pair):
    attempt = idp.begin_login('alice', 0)
    idp.push_channel('alice').take()
    assert idp.complete_login(attempt.attempt_id, sign_assertion(sign_pair.private, 'alice', bytes(16), 0), 0) is None
    assert idp.attempt(attempt.attempt_id).state is LoginState.DENIED
    with pytest.raises(StateError): idp.claim_session(attempt.attempt_id)


def test_login_attempt_expires(idp, sign_pair):
    attempt = idp.begin_login('alice', 0)
    assert _approve(idp, sign_pair, attempt, 121) is None
    assert idp.attempt(attempt.attempt_id).state is LoginState.EXPIRED


def test_login_unknown_user_and_attempt(idp):
    with pytest.raises(NotFound): idp.begin_login('mallory@example.com', 0)
    with pytest.raises(NotFound): idp.attempt('feedfacefeedface')


def test_service_provider_registration(idp):
    sp = idp.sp_register('https://rp.example.net/cb', 'https://rp.example.net/logout')
    assert len(sp.client_id) == 16 and len(sp.client_secret) == 32
    assert 'client_secret' not in repr(sp)
    assert idp.sp_lookup(sp.client_id, sp.client_secret) == sp
    with pytest.raises(AuthError): idp.sp_lookup(sp.client_id, bytes(32))
    with pytest.raises(NotFound): idp.sp_lookup(bytes(16), sp.client_secret)


def test_identity_assertion_for_relying_party(idp, sign_pair):
    sp, other = idp.sp_register('https://rp.example.net/cb', ''), idp.sp_register('https://other.example.net/cb', '')
    session = _approve(idp, sign_pair, idp.begin_login('alice', 0), 0)
    a = idp.issue_identity_assertion(session.session_id, sp.client_id, 10)
    assert a.expires_at == 310
    assert rp_verify_identity_assertion(a, sp.client_id, idp.public_key, 309) == 'alice'
    assert rp_verify_identity_assertion(a, sp.client_id, idp.public_key, 10 + 301) is None
    assert rp_verify_identity_assertion(a, other.client_id, idp.public_key, 20) is None
    forged = IdentityAssertion('mallory', a.client_id, a.issued_at, a.expires_at, a.signature)
    assert rp_verify_identity_assertion(forged, sp.client_id, idp.public_key, 20) is None
    assert json.loads(a.to_json())['user_id'] == 'alice'
    with pytest.raises(NotFound): idp.issue_identity_assertion(session.session_id, bytes(16), 10)


def test_identity_assertion_needs_a_live_session(idp, sign_pair):
    sp = idp.sp_register('https://rp.example.net/cb', '')
    session = _approve(idp, sign_pair, idp.begin_login('alice', 0), 0)
    with pytest.raises(AuthError): idp.issue_identity_assertion(session.session_id, sp.client_id, 15 * 60 + 1)


def test_applications_and_metadata(idp, sign_pair):
    sp = idp.sp_register('https://rp.example.net/cb', '')
    session = _approve(idp, sign_pair, idp.begin_login('alice', 0), 0)
    apps = idp.applications(session.session_id, 1)
    assert [app['redirect_url'] for app in apps] == ['https://rp.example.net/cb']
    assert 'client_secret' not in json.dumps(apps)
    meta = json.loads(idp.metadata())
    assert meta['issuer'] == 'https://example.com' and meta['idp_pubkey']
    with pytest.raises(AuthError): idp.applications(b'bogus', 1)


@pytest.mark.parametrize('how, state', [('signed', LoginState.APPROVED), ('wrong challenge', LoginState.DENIED),
                                        ('other user', LoginState.DENIED), ('late', LoginState.EXPIRED)])
def test_login_attempt_transitions(idp, sign_pair, how, state):
    attempt = idp.begin_login('alice', 0)
    with pytest.raises(StateError): idp.claim_session(attempt.attempt_id)
    challenge = idp.push_channel('alice').take().challenge
    now = 121 if how == 'late' else 5
    signed = sign_assertion(sign_pair.private, 'bob' if how == 'other user' else 'alice', bytes(16) if how == 'wrong challenge' else challenge, now)
    assert (idp.complete_login(attempt.attempt_id, signed, now) is not None) == (state is LoginState.APPROVED)
    assert idp.attempt(attempt.attempt_id).state is state
    # every state but pending is final
    for again in (6, 121):
        with pytest.raises(StateError): idp.complete_login(attempt.attempt_id, sign_assertion(sign_pair.private, 'alice', challenge, again), again)
    assert idp.attempt(attempt.attempt_id).state is state
    if state is LoginState.APPROVED: idp.claim_session(attempt.attempt_id)
    with pytest.raises(StateError): idp.claim_session(attempt.attempt_id)
