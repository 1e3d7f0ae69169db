import multiprocessing, os
from time import perf_counter
from typing import List

import pandas as pd
from tqdm import tqdm

import params
from cmn.crypto import Assertion, EncryptedBlob, Rng, generate_keypair, generate_master_key, open_field, seal_field, sign_assertion, verify_assertion
from cmn.errors import AuthError, IntegrityError
from cmn.events import Outcome
from util.adversary import adversary_server_dump, breach_scan, whitebox
from util.scenario import DEMOS, Scenario, World, demo

ACTORS = {'phone': 'mobile', 'ext': 'extension', 'phone2': 'mobile'}
SITE = 'https://www.example.com/login'


def _world(seed: int, steps: List[dict] = ()) -> World:
    return World.from_scenario(Scenario(seed, dict(ACTORS), [])).run(list(steps))

def _failures(w: World) -> List[dict]: return [r for r in w.log.records if r['outcome'] in ('error', 'abort', 'violation')]

def _row(case: str, passed: bool, detail: str = '') -> dict: return {'case': case, 'passed': bool(passed), 'detail': detail}

def _save(url: str, username: str, password: str) -> dict: return {'actor': 'ext', 'action': 'save', 'url': url, 'username': username, 'password': password}


class Acceptance:
    """Property suites over seeded runs. Every suite returns rows of {case, passed, detail}."""

    @staticmethod
    def pairing(seed: int) -> List[dict]:
        w = _world(seed, DEMOS['pair']['steps'])
        same = w.actors['ext'].paired and w.actors['ext'].master_key_for_test() == w.actors['phone'].master_key_for_test()
        return [_row('pair', same and not _failures(w), str(_failures(w)[:1]))]

    @staticmethod
    def recovery(seed: int) -> List[dict]:
        rng = Rng(seed).fork('sentinel')
        saves = [_save(f'https://site{i}.example.net/login', f'user{i}.{rng.read(4).hex()}', rng.read(12).hex()) for i in range(3)]
        w = _world(seed, DEMOS['pair']['steps'] + saves + [{'actor': 'ext', 'action': 'recover', 'mobile': 'phone2'}])
        old, new = w.actors['phone'], w.actors['phone2']
        if new.status.value != 'registered': return [_row('recover', False, str(_failures(w)[:1]))]
        revealed = {(url, username): new.reveal_credential(cid, lambda: True)[2] for cid, url, username in new.list_credentials()}
        expected = {(s['url'], s['username']): s['password'] for s in saves}
        return [_row('recover', new.master_key_for_test() == old.master_key_for_test() and revealed == expected and not _failures(w))]

    @staticmethod
    def breach(seed: int) -> List[dict]:
        rng = Rng(seed).fork('sentinel')
        saves = [_save(f'https://sentinel{i}.example.net/{rng.read(4).hex()}', f'sentinel-user-{rng.read(6).hex()}', f'sentinel-pass-{rng.read(12).hex()}')
                 for i in range(params.settings['acceptance']['sentinels'])]
        w = _world(seed, DEMOS['pair']['steps'] + saves)
        found = breach_scan(adversary_server_dump(w.store).dump, w.secrets())
        # three fields per sentinel, plus MasterKey and private keys
        enough = found['scanned'] >= 3 * len(saves) + 1
        return [_row('dump', enough and found['raw'] + found['base64url'] == 0 and not _failures(w), str(found))]

    @staticmethod
    def substitution(seed: int) -> List[dict]:
        w = _world(seed, DEMOS['attack-substitute']['steps'][:-3])
        ext = w.actors['ext']
        aborted = any(r['actor'] == 'adversary' and r.get('detail') == 'mobile aborted' for r in w.log.records)
        untouched = ext.complete_pairing() is Outcome.RETRY
        w.run(DEMOS['attack-substitute']['steps'][-3:])
        control = ext.paired and ext.master_key_for_test() == w.actors['phone'].master_key_for_test()
        return [_row('substituted', aborted and untouched), _row('control', control)]

    @staticmethod
    def forge(seed: int) -> List[dict]:
        fuzz = params.settings['acceptance']['fuzz']
        w = _world(seed, DEMOS['pair']['steps'][:3] + [{'actor': 'adversary', 'action': 'attack', 'kind': 'forge', 'target': 'ext', 'attempts': fuzz},
                                                       {'actor': 'adversary', 'action': 'attack', 'kind': 'forge', 'target': 'ext', 'attempts': 1, 'leak': True}])
        verdicts = [r for r in w.log.records if r['actor'] == 'adversary' and r['action'] == 'forge']
        return [_row('random tokens', len(verdicts) == 2 and verdicts[0]['outcome'] == 'ok', verdicts[0]['detail'] if verdicts else ''),
                _row('white-box control', len(verdicts) == 2 and verdicts[1]['outcome'] == 'ok' and w.actors['ext'].paired)]

    @staticmethod
    def tamper(seed: int) -> List[dict]:
        rng = Rng(seed).fork('tamper')
        mk = generate_master_key(rng)
        wire = seal_field(mk, 'password', rng.read(16), rng).to_bytes()
        caught = total = 0
        for i in range(len(wire)):
            for mask in (0x01, 0x80, 0xff):
                flipped = bytearray(wire)
                flipped[i] ^= mask
                total += 1
                try: open_field(mk, 'password', EncryptedBlob.from_bytes(bytes(flipped)))
                except IntegrityError: caught += 1
        return [_row('byte flips', len(wire) == 64 and caught == total, f'{caught}/{total}')]

    @staticmethod
    def exact_url(seed: int) -> List[dict]:
        w = _world(seed, DEMOS['pair']['steps'] + [_save(SITE, 'exact.match.user', 'exact-match-secret')])
        ext = w.actors['ext']
        rows = [_row(url, ext.autofill_by_url(url).outcome == 'none')
                for url in ('https://www.sub.example.com/login', 'https://www.example.com/other', 'http://www.example.com/login')]
        filled = ext.autofill_by_url(SITE)
        return rows + [_row(SITE, filled.outcome == 'filled' and filled.password == 'exact-match-secret')]

    @staticmethod
    def timeout(seed: int) -> List[dict]:
        w = _world(seed, DEMOS['pair']['steps'] + [_save(SITE, 'timeout.user', 'timeout-secret')])
        ext, rows = w.actors['ext'], []
        w.clock.advance(15 * 60 - 1)
        rows.append(_row('idle 14:59', ext.autofill_by_url(SITE).outcome == 'filled'))
        w.clock.advance(15 * 60 + 1)
        try: rows.append(_row('idle 15:01', False, str(ext.autofill_by_url(SITE))))
        except AuthError: rows.append(_row('idle 15:01', True))
        w.run([{'actor': 'ext', 'action': 'unlock', 'approver': 'phone'}, {'actor': 'ext', 'action': 'lock'}])
        try: rows.append(_row('manual lock', False, str(ext.autofill_by_url(SITE))))
        except AuthError: rows.append(_row('manual lock', True))
        return rows

    @staticmethod
    def assertion(seed: int) -> List[dict]:
        rng = Rng(seed).fork('assertion')
        signer, stranger = generate_keypair(rng, 'sign'), generate_keypair(rng, 'sign')
        window, now, challenge = params.settings['crypto']['assertion_window'], 10_000, rng.read(16)
        good = sign_assertion(signer.private, 'alice', challenge, now)
        check = lambda a, ch=challenge: verify_assertion(signer.public, a, ch, now)
        return [_row('control', check(good)),
                _row('wrong challenge', not check(good, rng.read(16))),
                _row('stale issued_at', not check(sign_assertion(signer.private, 'alice', challenge, now - window - 1))
                     and not check(sign_assertion(signer.private, 'alice', challenge, now + window + 1))
                     and check(sign_assertion(signer.private, 'alice', challenge, now - window))),
                _row('altered user_id', not check(Assertion('mallory', challenge, now, good.signature))),
                _row('wrong key', not check(sign_assertion(stranger.private, 'alice', challenge, now)))]

    @staticmethod
    def determinism(seed: int) -> List[dict]:
        runs = [World.from_scenario(demo('pair', seed)).run(demo('pair', seed).steps) for _ in range(2)]
        same = runs[0].store.snapshot() == runs[1].store.snapshot() and runs[0].log.to_jsonl() == runs[1].log.to_jsonl()
        return [_row('demo pair twice', same)]

    SUITES = ('pairing', 'recovery', 'breach', 'substitution', 'forge', 'tamper', 'exact_url', 'timeout', 'assertion', 'determinism')

    @staticmethod
    def run_one(suite: str, seed: int) -> List[dict]:
        st = perf_counter()
        with whitebox(): rows = getattr(Acceptance, suite)(seed)
        elapsed = perf_counter() - st
        return [dict(row, suite=suite, seed=seed, seconds=elapsed) for row in rows]

    @staticmethod
    def run(output: str, suites=SUITES, runs: int = None, base_seed: int = 0) -> pd.DataFrame:
        """
        Args:
            output: directory for acceptance.csv (one row per case and seed) and acceptance.mean.csv (pass rate per suite)
            suites: subset of Acceptance.SUITES
            runs: overrides the per-suite run counts in params.settings['acceptance']['runs']
            base_seed: seeds are base_seed, base_seed + 1, ...
        Returns:
            the per-case DataFrame
        """
        print('#' * 100)
        pairs = [(suite, base_seed + i) for suite in suites for i in range(runs or params.settings['acceptance']['runs'][suite])]
        print(f'Acceptance run over {len(pairs)} (suite, seed) pairs: {", ".join(suites)} ...')
        if params.settings['parallel']:
            print('Parallel run started ...')
            with multiprocessing.Pool(multiprocessing.cpu_count() if params.settings['core'] < 0 else params.settings['core']) as executor:
                results = executor.starmap(Acceptance.run_one, pairs)
        else: results = [Acceptance.run_one(suite, seed) for suite, seed in tqdm(pairs)]

        df = pd.DataFrame([row for rows in results for row in rows], columns=['suite', 'seed', 'case', 'passed', 'detail', 'seconds'])
        mean = df.groupby('suite').agg(cases=('passed', 'size'), pass_rate=('passed', 'mean'), seconds=('seconds', 'sum')).reindex(list(suites))
        if not os.path.isdir(output): os.makedirs(output)
        df.to_csv(f'{output}/acceptance.csv', index=False)
        mean.to_csv(f'{output}/acceptance.mean.csv', index_label='suite')
        print(mean.to_string())
        print('#' * 100)
        return df
