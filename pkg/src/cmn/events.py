import json
from enum import Enum
from typing import List


class Outcome(str, Enum):
    OK = 'ok'
    RETRY = 'retry'
    ABORT = 'abort'


class EventLog:
    """Ordered protocol events {step, actor, action, outcome[, detail]}; no wall-clock fields so logs of seeded runs compare equal."""
    def __init__(self, echo: bool = False):
        self.records: List[dict] = []
        self.echo = echo
        self.step = 0 #set by the harness before each scenario step

    def emit(self, actor: str, action: str, outcome: str, detail: str = None) -> dict:
        record = {'step': self.step, 'actor': actor, 'action': action, 'outcome': outcome}
        if detail is not None: record['detail'] = detail
        self.records.append(record)
        if self.echo: print(self.dumps(record))
        return record

    def alerts(self) -> List[dict]: return [r for r in self.records if r['outcome'] == 'abort']

    @staticmethod
    def dumps(record: dict) -> str: return json.dumps(record, sort_keys=True, separators=(',', ':'))

    def to_jsonl(self) -> str: return ''.join(self.dumps(r) + '\n' for r in self.records)
