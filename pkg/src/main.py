import argparse, sys
from typing import Tuple

from Crypto.Hash import SHA256

import params
from cmn.errors import RostamError, ScenarioError
from cmn.events import EventLog
from util.acceptance import Acceptance
from util.scenario import DEMOS, Scenario, World, demo, load_scenario


class Harness:

    @staticmethod
    def run_scenario(scenario: Scenario, snapshot: str = None, echo: bool = False) -> Tuple[bytes, EventLog]:
        """
        Args:
            scenario: validated scenario (seed, actors, steps)
            snapshot: optional path the server store persists to after every mutation
            echo: print each event as it happens
        Returns:
            tuple (final snapshot bytes, event log)
        """
        world = World.from_scenario(scenario, snapshot, echo).run(scenario.steps)
        return world.store.snapshot(), world.log

    @staticmethod
    def report(name: str, snapshot: bytes, log: EventLog, verdicts: str = None) -> int:
        """Prints the event log and the snapshot digest; 1 when any security property was violated."""
        print('#' * 100)
        print(f'{name} ...')
        print(log.to_jsonl(), end='')
        print(f'snapshot sha256 {SHA256.new(snapshot).hexdigest()}')
        violations = [r for r in log.records if r['outcome'] == 'violation']
        if verdicts:
            found = [r for r in log.records if r['actor'] == 'adversary' and r['action'] == verdicts and 'detail' in r]
            for r in found: print(f'verdict: {r["detail"]}')
            if not found: violations.append({'detail': f'no {verdicts} verdict'})
        print('#' * 100)
        return 1 if violations else 0

    @staticmethod
    def demo(name: str, seed: int = None, snapshot: str = None) -> int:
        s = demo(name, seed)
        return Harness.report(s.name, *Harness.run_scenario(s, snapshot))

    @staticmethod
    def scenario(path: str, seed: int = None, snapshot: str = None) -> int:
        s = load_scenario(path, seed)
        return Harness.report(s.name, *Harness.run_scenario(s, snapshot))

    @staticmethod
    def attack(kind: str, seed: int = None, snapshot: str = None) -> int:
        s = demo(f'attack-{kind}', seed)
        return Harness.report(s.name, *Harness.run_scenario(s, snapshot), verdicts=kind)

    @staticmethod
    def acceptance(output: str, suites: list = None, runs: int = None, seed: int = None) -> int:
        df = Acceptance.run(output, tuple(suites or Acceptance.SUITES), runs, seed or 0)
        return 0 if df['passed'].all() else 1

    @staticmethod
    def _common(parser, default=None):
        parser.add_argument('-seed', '--seed', type=int, default=default, help='u64 seed; the same seed and steps give a byte-identical snapshot; Eg. -seed 7')
        parser.add_argument('-snapshot', '--snapshot', type=str, default=default, help='path the server store is persisted to (atomic rewrite per mutation)')

    @staticmethod
    def addargs(parser):
        Harness._common(parser)
        parser.add_argument('-parallel', '--parallel', action='store_true', help='run acceptance suites on a multiprocessing pool (params.settings["core"] cores)')
        # the same flags after the subcommand; SUPPRESS keeps the top-level value when they are absent there
        common = argparse.ArgumentParser(add_help=False)
        Harness._common(common, argparse.SUPPRESS)
        sub = parser.add_subparsers(dest='cmd', required=True)

        d = sub.add_parser('demo', parents=[common], help='run a built-in scenario and print its event log')
        d.add_argument('name', choices=[k for k in DEMOS if not k.startswith('attack-')])

        s = sub.add_parser('scenario', parents=[common], help='run a JSON scenario file')
        s.add_argument('op', choices=['run'])
        s.add_argument('file', type=str, help='scenario JSON; Eg. ../data/scenarios/demo_pair.json')

        a = sub.add_parser('attack', parents=[common], help='run an adversary scenario and print its verdict')
        a.add_argument('kind', choices=['dump', 'substitute', 'forge'])

        acc = sub.add_parser('acceptance', parents=[common], help='run the property suites and write acceptance.csv / acceptance.mean.csv')
        acc.add_argument('-output', '--output', type=str, default='../output/acceptance', help='output directory')
        acc.add_argument('-suites', '--suites', nargs='+', default=None, choices=Acceptance.SUITES, help='subset of suites; Eg. -suites pairing forge')
        acc.add_argument('-runs', '--runs', type=int, default=None, help='seeded runs per suite, overriding params.settings["acceptance"]["runs"]')

"""
A running example of arguments
python -u main.py -seed 7 demo pair
python -u main.py demo pair --seed 7
python -u main.py -seed 7 -snapshot ../output/demo/store.json demo autofill
python -u main.py scenario run ../data/scenarios/demo_pair.json
python -u main.py attack forge
python -u main.py -parallel acceptance -output ../output/acceptance
"""
if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Hybrid SSO and password manager protocol harness')
    Harness.addargs(parser)
    args = parser.parse_args()
    if args.parallel: params.settings['parallel'] = True

    try:
        if args.cmd == 'demo': code = Harness.demo(args.name, args.seed, args.snapshot)
        elif args.cmd == 'scenario': code = Harness.scenario(args.file, args.seed, args.snapshot)
        elif args.cmd == 'attack': code = Harness.attack(args.kind, args.seed, args.snapshot)
        else: code = Harness.acceptance(args.output, args.suites, args.runs, args.seed)
    except ScenarioError as e:
        print(f'scenario error: {e}', file=sys.stderr)
        code = 2
    except RostamError as e:
        print(f'{type(e).__name__}: {e}', file=sys.stderr)
        code = 1
    sys.exit(code)
