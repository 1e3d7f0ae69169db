from typing import Callable, Optional

from cmn.errors import StateError


class SimClock:
    """Simulated seconds. Every time-dependent component reads this, never the wall clock."""
    def __init__(self, start: int = 0): self._now = int(start)

    @property
    def now(self) -> int: return self._now

    def advance(self, delta: int) -> int:
        if delta < 0: raise StateError(f'clock cannot move backward ({delta} s)')
        self._now += int(delta)
        return self._now


def poll(check: Callable, clock: SimClock, interval: int, deadline: int, retry, on_tick: Optional[Callable[[int], None]] = None):
    """
    Bounded poll under the simulated clock: calls check() until it returns something other than `retry`
    or `deadline` seconds have passed. on_tick(i) runs before the i-th check so a caller can interleave other actors.
    Returns the last result (retry when the deadline is hit).
    """
    if interval <= 0: raise ValueError('poll interval must be positive')
    stop, tick = clock.now + deadline, 0
    while True:
        if on_tick: on_tick(tick)
        result = check()
        if result != retry or clock.now + interval > stop: return result
        clock.advance(interval)
        tick += 1
