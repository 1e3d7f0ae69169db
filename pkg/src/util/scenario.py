"""
Scenario files drive every actor through the protocol under one seed and one simulated clock.

Schema (JSON, one action per array element):
{
  "seed": 7,                                  #u64, optional; the CLI --seed overrides it
  "user_id": "alice",                         #optional, defaults to params.settings['user']
  "actors": {"phone": "mobile", "ext": "extension"},
  "steps": [
    {"actor": "phone", "action": "setup"},
    {"actor": "phone", "action": "login"},
    {"actor": "ext", "action": "unlock", "approver": "phone"},
    {"actor": "ext", "action": "pair", "mobile": "phone"},
    {"actor": "ext", "action": "save", "url": "https://www.example.com/login", "username": "jdoe.personal", "password": "..."},
    {"actor": "ext", "action": "autofill", "url": "https://www.example.com/login"},
    {"action": "advance-clock", "seconds": 901},
    {"actor": "adversary", "action": "attack", "kind": "dump"}
  ]
}

Actions per actor kind:
  mobile:    setup, login, scan {qr_from}, reveal {url, username}, list
  extension: unlock {approver}, lock, close-browser, begin-pair, complete-pair, pair {mobile},
             save {url, username, password, mode?, confirm?}, update {url, username, password, confirm?},
             capture {url, username, password, confirm?}, remove {url, username}, autofill {url | choose?},
             dashboard, recover {mobile, via is this extension}
  adversary: attack {kind: dump {device?} | substitute {target, also_fp?} | forge {target, attempts?, leak?}}
  (none):    advance-clock {seconds}, revoke-device {device}
Gated steps accept "approve": false (biometrics) or "confirm": false (save/update pop-up).
"""
import json
from dataclasses import dataclass
from typing import Dict, List

import params
from cmn.clock import SimClock
from cmn.crypto import QrPayload, Rng, b64d, fingerprint, generate_keypair, generate_token, private_parts_for_test
from cmn.errors import NotFound, RostamError, ScenarioError, StateError
from cmn.events import EventLog, Outcome
from extension import ExtensionActor
from identity import IdentityProvider
from mobile import MobileActor
from store import MailboxChannel, ServerStore
from util import adversary

KINDS = {'mobile', 'extension'}
ACTIONS = {
    'mobile': {'setup', 'login', 'scan', 'reveal', 'list'},
    'extension': {'unlock', 'lock', 'close-browser', 'begin-pair', 'complete-pair', 'pair', 'save', 'update', 'capture', 'remove', 'autofill', 'dashboard', 'recover'},
    'adversary': {'attack'},
    None: {'advance-clock', 'revoke-device'},
}
ATTACKS = {'dump', 'substitute', 'forge'}
FIELDS = {'scan': ('qr_from',), 'reveal': ('url', 'username'), 'unlock': ('approver',), 'pair': ('mobile',), 'recover': ('mobile',),
          'save': ('url', 'username', 'password'), 'update': ('url', 'username', 'password'), 'capture': ('url', 'username', 'password'),
          'remove': ('url', 'username'), 'autofill': ('url',), 'advance-clock': ('seconds',), 'revoke-device': ('device',)}
REFS = {'approver': 'mobile', 'mobile': 'mobile', 'qr_from': 'extension'} #step field -> kind of actor it must name


def _count(value, least: int = 0) -> bool: return isinstance(value, int) and not isinstance(value, bool) and value >= least


def check_step(i: int, step, kinds: Dict[str, str]) -> None:
    """Raises ScenarioError for a step that cannot run at all; a step that runs and fails is logged instead."""
    if not isinstance(step, dict) or not isinstance(step.get('action'), str): raise ScenarioError(f'step {i}: needs an "action"')
    actor, action = step.get('actor'), step['action']
    kind_of = lambda name: kinds.get(name) if isinstance(name, str) else None
    kind = 'adversary' if actor == 'adversary' else kind_of(actor)
    if actor is not None and kind is None: raise ScenarioError(f'step {i}: undeclared actor {actor!r}')
    if action not in ACTIONS[kind]: raise ScenarioError(f'step {i}: {kind or "world"} has no action {action!r}')
    for key in FIELDS.get(action, ()):
        if key not in step: raise ScenarioError(f'step {i} ({action}): missing field {key!r}')
    for key in ('url', 'username', 'password'):
        if key in step and not isinstance(step[key], str): raise ScenarioError(f'step {i} ({action}): {key} must be a string')
    for key in ('approve', 'confirm', 'also_fp', 'leak'):
        if key in step and not isinstance(step[key], bool): raise ScenarioError(f'step {i} ({action}): {key} must be true or false')
    for key, want in REFS.items():
        if key in step and kind_of(step[key]) != want: raise ScenarioError(f'step {i} ({action}): {key} must name a declared {want}')
    if action == 'advance-clock' and not _count(step['seconds']): raise ScenarioError(f'step {i}: seconds must be a non-negative integer')
    if action == 'revoke-device' and kind_of(step['device']) != 'extension': raise ScenarioError(f'step {i}: device must name a declared extension')
    if action == 'save' and step.get('mode', 'manual') not in ('manual', 'detected'): raise ScenarioError(f'step {i}: mode must be manual or detected')
    if action == 'autofill' and 'choose' in step and not (isinstance(step['choose'], str) or _count(step['choose'])):
        raise ScenarioError(f'step {i}: choose must be a username or an index')
    if kind == 'adversary':
        attack = step.get('kind')
        if not isinstance(attack, str) or attack not in ATTACKS: raise ScenarioError(f'step {i}: attack kind must be one of {sorted(ATTACKS)}')
        if attack != 'dump' and kind_of(step.get('target')) != 'extension': raise ScenarioError(f'step {i}: {attack} needs a declared extension as "target"')
        if 'device' in step and kind_of(step['device']) is None: raise ScenarioError(f'step {i}: device must name a declared actor')
        if 'attempts' in step and not _count(step['attempts'], 1): raise ScenarioError(f'step {i}: attempts must be a positive integer')


@dataclass
class Scenario:
    seed: int
    actors: Dict[str, str]
    steps: List[dict]
    user_id: str = None
    name: str = 'scenario'

    def validate(self) -> 'Scenario':
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64: raise ScenarioError(f'seed must be a u64, got {self.seed!r}')
        for name, kind in self.actors.items():
            if not isinstance(kind, str) or kind not in KINDS: raise ScenarioError(f'actor {name!r} has unknown kind {kind!r}')
            if name == 'adversary': raise ScenarioError('"adversary" is reserved')
        for i, step in enumerate(self.steps): check_step(i, step, self.actors)
        return self

    @classmethod
    def from_dict(cls, doc: dict, seed: int = None, name: str = 'scenario') -> 'Scenario':
        if not isinstance(doc, dict): raise ScenarioError('scenario must be a JSON object')
        try: s = cls(seed if seed is not None else doc.get('seed', 0), dict(doc['actors']), list(doc['steps']), doc.get('user_id'), name)
        except (KeyError, TypeError, ValueError) as e: raise ScenarioError(f'bad scenario: {e}') from None
        return s.validate()


def load_scenario(path: str, seed: int = None) -> Scenario:
    try:
        with open(path, 'r', encoding='utf-8') as f: doc = json.load(f)
    except json.JSONDecodeError as e: raise ScenarioError(f'{path}:{e.lineno}:{e.colno}: {e.msg}') from None
    except OSError as e: raise ScenarioError(f'{path}: {e.strerror}') from None
    return Scenario.from_dict(doc, seed, name=path)


class World:
    """Fresh module instances for one run: one store, one IdP, one clock, the declared actors and the event log."""
    def __init__(self, seed: int, user_id: str = None, snapshot_path: str = None, echo: bool = False):
        self.seed = seed
        self.rng = Rng(seed)
        self.clock = SimClock()
        self.log = EventLog(echo)
        self.store = ServerStore(self.rng.fork('store'), snapshot_path)
        self.idp = IdentityProvider(self.store, self.rng.fork('idp'))
        self.user = dict(params.settings['user'])
        if user_id: self.user.update(user_id=user_id, email=f'{user_id}@example.com')
        self.actors: Dict[str, object] = {}
        self.kinds: Dict[str, str] = {}
        self.qr: Dict[str, QrPayload] = {} #last QR shown by each extension
        self.saved: List[tuple] = [] #(url, username, password) handed to the vault, ground truth for breach scans
        self.fills: List[dict] = []
        self.substituted = set() #extensions whose server-side pubkey the adversary replaced
        self._attacker = None

    @property
    def user_id(self) -> str: return self.user['user_id']

    @property
    def attacker(self):
        if self._attacker is None: self._attacker = generate_keypair(self.rng.fork('adversary'), 'wrap')
        return self._attacker

    def add(self, name: str, kind: str):
        cls = MobileActor if kind == 'mobile' else ExtensionActor
        extra = {'on_fill': self.fills.append} if kind == 'extension' else {}
        self.kinds[name] = kind
        self.actors[name] = cls(self.user_id, self.rng.fork(name), self.store, self.idp, self.clock, self.log, name, **extra)
        return self.actors[name]

    def emit(self, actor: str, action: str, outcome: str, detail: str = None): return self.log.emit(actor, action, outcome, detail)

    def violations(self) -> List[dict]: return [r for r in self.log.records if r['outcome'] == 'violation']

    def secrets(self) -> List[bytes]:
        """Plaintexts the scenario stored; with test hooks on, every actor's key material as well."""
        out = [s.encode('utf-8') for row in self.saved for s in row]
        if params.settings['test_hooks']:
            for actor in self.actors.values(): out += actor.secrets_for_test()
            out += private_parts_for_test(self.idp.keys.private)
        return out

    @classmethod
    def from_scenario(cls, s: Scenario, snapshot_path: str = None, echo: bool = False) -> 'World':
        world = cls(s.seed, s.user_id, snapshot_path, echo)
        for name, kind in s.actors.items(): world.add(name, kind)
        return world

    def run(self, steps: List[dict]) -> 'World':
        """Malformed steps raise ScenarioError; steps that fail are logged with outcome `error` and the run goes on."""
        for i, step in enumerate(steps):
            check_step(i, step, self.kinds)
            self.log.step = i
            try: self.apply(step)
            except ScenarioError: raise
            except RostamError as e: self.emit(step.get('actor', 'world'), step['action'], 'error', f'{type(e).__name__}: {e}')
        return self

    # step handlers

    def apply(self, step: dict):
        action = step['action']
        if action == 'advance-clock': return self.clock.advance(step['seconds'])
        if action == 'revoke-device': return self._revoke_device(self.actors[step['device']])
        if action == 'attack': return self.attack(step)
        actor = self.actors[step['actor']]
        handler = getattr(self, f'_{action.replace("-", "_")}_{"mobile" if isinstance(actor, MobileActor) else "extension"}')
        return handler(actor, step)

    @staticmethod
    def _gate(step: dict, key: str = 'approve'):
        answer = bool(step.get(key, True))
        return lambda *_: answer

    def _setup_mobile(self, m: MobileActor, step: dict):
        m.setup()
        self.idp.enroll(self.user_id, self.user['email'], self.user['phone'], m.signing_public)

    def _login_mobile(self, m: MobileActor, step: dict):
        if m.login(self._gate(step)) is None: raise StateError('login was not approved')

    def _ensure_login(self, m: MobileActor, step: dict):
        if m.session_id is None or not self.store.validate_session(m.session_id, self.clock.now): self._login_mobile(m, step)

    def _scan_mobile(self, m: MobileActor, step: dict):
        target = step['qr_from']
        try: m.scan_pairing_qr(self.qr[target].to_bytes())
        except RostamError:
            if target in self.substituted:
                self.substituted.discard(target)
                self.emit('adversary', 'substitute', Outcome.OK.value, 'mobile aborted')
            raise
        if target in self.substituted: self.emit('adversary', 'substitute', 'violation', 'mobile accepted a substituted key')

    def _reveal_mobile(self, m: MobileActor, step: dict):
        for credential_id, url, username in m.list_credentials():
            if url == step['url'] and username == step['username']:
                m.reveal_credential(credential_id, self._gate(step))
                return self.emit(m.name, 'reveal_credential', Outcome.OK.value, username)
        raise NotFound(f'no credential {step["username"]!r} at {step["url"]!r}')

    def _list_mobile(self, m: MobileActor, step: dict):
        self.emit(m.name, 'list_credentials', Outcome.OK.value, str(len(m.list_credentials())))

    def _unlock_extension(self, e: ExtensionActor, step: dict):
        phone = self.actors[step['approver']]
        e.unlock(lambda: phone.approve_login(self._gate(step)))

    def _lock_extension(self, e: ExtensionActor, step: dict): e.lock()

    def _close_browser_extension(self, e: ExtensionActor, step: dict): e.close_browser()

    def _begin_pair_extension(self, e: ExtensionActor, step: dict):
        self.qr[e.name] = e.begin_pairing()
        self.emit(e.name, 'show_qr', Outcome.OK.value, self.qr[e.name].to_text())

    def _complete_pair_extension(self, e: ExtensionActor, step: dict):
        outcome = e.poll_pairing()
        if outcome is not Outcome.OK: raise StateError(f'pairing ended with {outcome.value}')

    def _pair_extension(self, e: ExtensionActor, step: dict):
        phone = self.actors[step['mobile']]
        self._ensure_login(phone, step)
        self._begin_pair_extension(e, step)
        # the phone scans while the extension is already polling
        outcome = e.poll_pairing(on_tick=lambda i: i == 0 and self._scan_mobile(phone, {'qr_from': e.name}))
        if outcome is not Outcome.OK: raise StateError(f'pairing ended with {outcome.value}')

    def _save_extension(self, e: ExtensionActor, step: dict):
        if e.save_credential(step['url'], step['username'], step['password'], step.get('mode', 'manual'), self._gate(step, 'confirm')):
            self.saved.append((step['url'], step['username'], step['password']))

    def _update_extension(self, e: ExtensionActor, step: dict):
        if e.update_credential((step['url'], step['username']), step['password'], self._gate(step, 'confirm')):
            self.saved.append((step['url'], step['username'], step['password']))

    def _capture_extension(self, e: ExtensionActor, step: dict):
        result = e.capture_login(step['url'], step['username'], step['password'], self._gate(step, 'confirm'))
        if result in ('saved', 'updated'): self.saved.append((step['url'], step['username'], step['password']))
        self.emit(e.name, 'capture_login', Outcome.OK.value, result)

    def _remove_extension(self, e: ExtensionActor, step: dict):
        for credential_id, url, username in e.dashboard()['accounts']:
            if url == step['url'] and username == step['username']: return e.remove_credential(b64d(credential_id))
        raise NotFound(f'no credential {step["username"]!r} at {step["url"]!r}')

    def _autofill_extension(self, e: ExtensionActor, step: dict):
        choose = (lambda names: step['choose']) if 'choose' in step else None
        return e.autofill_by_url(step['url'], choose)

    def _dashboard_extension(self, e: ExtensionActor, step: dict):
        board = e.dashboard()
        self.emit(e.name, 'dashboard', Outcome.OK.value, f'{len(board["applications"])} applications, {len(board["accounts"])} accounts')

    def _recover_extension(self, e: ExtensionActor, step: dict):
        phone = self.actors[step['mobile']]
        phone.begin_recovery()
        qr = e.begin_recovery_serve()
        outcome = e.poll_recovery(on_tick=lambda i: i == 0 and phone.scan_recovery_qr(qr.to_bytes()))
        if outcome is not Outcome.OK: raise StateError(f'recovery serve ended with {outcome.value}')
        phone.finish_recovery()

    def _revoke_device(self, e: ExtensionActor):
        """Server-side revocation: the device entry and its mailbox go; the browser keeps whatever it holds in memory."""
        if e.device_id is None: raise StateError(f'{e.name} has never registered a device')
        self.store.remove_device(self.user_id, e.device_id)
        self.emit('world', 'revoke_device', Outcome.OK.value, e.name)

    # adversary

    def attack(self, step: dict):
        kind = step.get('kind')
        if kind == 'dump':
            view = adversary.adversary_server_dump(self.store, self.actors.get(step.get('device')))
            found = adversary.breach_scan(view.to_bytes(), self.secrets())
            hits = found['raw'] + found['base64url']
            return self.emit('adversary', 'dump', 'violation' if hits else Outcome.OK.value, f'{hits} secret occurrences' if hits else 'no plaintext leaked')
        target = self.actors[step['target']]
        if kind == 'substitute':
            fp = self.qr[target.name].fp if target.name in self.qr else fingerprint(self.store.get_device(self.user_id, target.device_id).pubkey)
            adversary.adversary_substitute_pubkey(self.store, self.user_id, fp, self.attacker.encoded, also_fp=bool(step.get('also_fp', False)))
            self.substituted.add(target.name)
            return self.emit('adversary', 'substitute', Outcome.OK.value, 'server pubkey replaced')
        if kind == 'forge': return self._forge(target, step)
        raise ScenarioError(f'unknown attack {kind!r}')

    def _forge(self, e: ExtensionActor, step: dict):
        attempts, leak = int(step.get('attempts', params.settings['acceptance']['fuzz'])), bool(step.get('leak', False))
        rng = self.rng.fork('adversary/forge')
        aborted = 0
        for _ in range(attempts):
            e.begin_pairing()
            # white-box positive control: the adversary is handed the live token
            token = e.pending_token_for_test() if leak else generate_token(rng)
            victim_pub = self.store.get_device(self.user_id, e.device_id).pubkey
            outcome = adversary.adversary_forge_mailbox(self.store, self.user_id, MailboxChannel.masterkey_update(e.device_id), self.attacker, token, rng,
                                                        victim_pub, victim=e.complete_pairing)
            aborted += outcome is Outcome.ABORT
            if outcome is Outcome.OK: break
        if leak: return self.emit('adversary', 'forge', Outcome.OK.value if aborted == 0 else 'violation', 'white-box control: victim accepted the leaked token')
        return self.emit('adversary', 'forge', Outcome.OK.value if aborted == attempts else 'violation', f'victim aborted {aborted}/{attempts}')


def _pair(phone='phone', ext='ext') -> List[dict]:
    return [{'actor': phone, 'action': 'setup'},
            {'actor': phone, 'action': 'login'},
            {'actor': ext, 'action': 'unlock', 'approver': phone},
            {'actor': ext, 'action': 'pair', 'mobile': phone}]

_SAVES = [{'actor': 'ext', 'action': 'save', 'url': 'https://www.example.com/login', 'username': 'jdoe.personal', 'password': 'correct-horse-battery'},
          {'actor': 'ext', 'action': 'save', 'url': 'https://www.example.com/login', 'username': 'jdoe.work', 'password': 'staple-7-orbit'},
          {'actor': 'ext', 'action': 'save', 'url': 'https://mail.example.org/', 'username': 'j.doe.mail', 'password': 'violet-quartz-11'}]

DEMOS = {
    'pair': {'actors': {'phone': 'mobile', 'ext': 'extension'}, 'steps': _pair()},
    'autofill': {'actors': {'phone': 'mobile', 'ext': 'extension'}, 'steps': _pair() + _SAVES + [
        {'actor': 'ext', 'action': 'autofill', 'url': 'https://WWW.example.com:443/login?next=/home'},
        {'actor': 'ext', 'action': 'autofill', 'url': 'https://www.example.com/login', 'choose': 'jdoe.work'},
        {'actor': 'ext', 'action': 'autofill', 'url': 'https://www.sub.example.com/login'},
        {'actor': 'ext', 'action': 'capture', 'url': 'https://mail.example.org/', 'username': 'j.doe.mail', 'password': 'violet-quartz-12'},
        {'actor': 'ext', 'action': 'lock'},
        {'actor': 'ext', 'action': 'autofill', 'url': 'https://mail.example.org/'},
        {'actor': 'ext', 'action': 'unlock', 'approver': 'phone'},
        {'actor': 'ext', 'action': 'autofill', 'url': 'https://mail.example.org/'},
        {'action': 'advance-clock', 'seconds': 15 * 60 + 1},
        {'actor': 'ext', 'action': 'autofill', 'url': 'https://mail.example.org/'}]},
    'recover': {'actors': {'phone': 'mobile', 'ext': 'extension', 'phone2': 'mobile'}, 'steps': _pair() + _SAVES[:1] + [
        {'actor': 'ext', 'action': 'recover', 'mobile': 'phone2'},
        {'actor': 'phone2', 'action': 'reveal', 'url': 'https://www.example.com/login', 'username': 'jdoe.personal'}]},
    'attack-dump': {'actors': {'phone': 'mobile', 'ext': 'extension'}, 'steps': _pair() + _SAVES + [
        {'actor': 'adversary', 'action': 'attack', 'kind': 'dump'}]},
    'attack-substitute': {'actors': {'phone': 'mobile', 'ext': 'extension'}, 'steps': _pair()[:3] + [
        {'actor': 'ext', 'action': 'begin-pair'},
        {'actor': 'adversary', 'action': 'attack', 'kind': 'substitute', 'target': 'ext'},
        {'actor': 'phone', 'action': 'scan', 'qr_from': 'ext'},
        {'actor': 'ext', 'action': 'begin-pair'},
        {'actor': 'phone', 'action': 'scan', 'qr_from': 'ext'},
        {'actor': 'ext', 'action': 'complete-pair'}]},
    'attack-forge': {'actors': {'phone': 'mobile', 'ext': 'extension'}, 'steps': _pair()[:3] + [
        {'actor': 'adversary', 'action': 'attack', 'kind': 'forge', 'target': 'ext', 'attempts': 100}]},
}


def demo(name: str, seed: int = None) -> Scenario:
    if name not in DEMOS: raise ScenarioError(f'unknown demo {name!r}; one of {sorted(DEMOS)}')
    doc = json.loads(json.dumps(DEMOS[name])) #steps are mutable dicts
    return Scenario.from_dict(doc, seed if seed is not None else 7, name=f'demo {name}')
