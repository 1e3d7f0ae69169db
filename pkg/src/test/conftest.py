import pytest

from cmn.crypto import Rng, generate_keypair
from util.adversary import whitebox
from util.scenario import DEMOS, Scenario, World

ACTORS = {'phone': 'mobile', 'ext': 'extension', 'phone2': 'mobile', 'ext2': 'extension'}
PAIR = DEMOS['pair']['steps']


@pytest.fixture(autouse=True)
def test_hooks():
    with whitebox(): yield


@pytest.fixture(scope='session')
def wrap_pair(): return generate_keypair(Rng(101).fork('wrap'), 'wrap')


@pytest.fixture(scope='session')
def other_wrap_pair(): return generate_keypair(Rng(102).fork('wrap'), 'wrap')


@pytest.fixture(scope='session')
def sign_pair(): return generate_keypair(Rng(103).fork('sign'), 'sign')


@pytest.fixture
def make_world():
    def make(seed: int = 7, steps=(), actors: dict = None) -> World:
        return World.from_scenario(Scenario(seed, dict(actors or ACTORS), [])).run(list(steps))
    return make


@pytest.fixture
def paired(make_world) -> World:
    """phone set up and logged in, ext unlocked and paired."""
    return make_world(7, PAIR)


class CountingStore:
    """Wraps a ServerStore and records every method call made through it."""
    def __init__(self, store):
        self._store, self.calls = store, []

    def __getattr__(self, name):
        attr = getattr(self._store, name)
        if not callable(attr): return attr
        def counted(*args, **kwargs):
            self.calls.append(name)
            return attr(*args, **kwargs)
        return counted


@pytest.fixture
def counting(): return CountingStore


@pytest.fixture(scope='session')
def idp_sign_pair(): return generate_keypair(Rng(104).fork('idp'), 'sign')
