"""Deterministic discrete-event network.

A single seeded event queue carries every frame; events pop in (deliver_at,
seq) order, so ties break by submission and identical seeds replay the exact
same interleaving.  Default delivery latency is one tick; optional drop and
jitter policies draw from the simulation's own RNG and therefore stay
reproducible.  The trace is a list of JSON-ready rows: frame events
(delivered / dropped / injected / undeliverable) plus bookkeeping rows
(secret, session) that actors emit for the offline verifier.

Adversary taps observe honest open-channel submissions; ``secure`` channel
frames bypass taps entirely.  A tap may suppress a queued frame or inject new
ones, which is how replay, tamper, and impersonation scripts act.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .actors import Actor, Send
from .messages import CHANNEL_OPEN, CHANNEL_SECURE, Frame


class SimnetError(Exception):
    pass


@dataclass
class _Entry:
    deliver_at: int
    seq: int
    frame: Optional[Frame] = None
    call: Optional[Callable[[], None]] = None
    cancelled: bool = False

    def __lt__(self, other):
        return (self.deliver_at, self.seq) < (other.deliver_at, other.seq)


class Simnet:
    def __init__(self, seed: int = 0, latency: int = 1, drop_rate: float = 0.0,
                 jitter: int = 0):
        if not 0.0 <= drop_rate <= 1.0:
            raise SimnetError("drop-rate must be within [0, 1]")
        self.now = 0
        self.latency = latency
        self.drop_rate = drop_rate
        self.jitter = jitter
        self.rng = random.Random(seed)
        self.actors: dict[str, Actor] = {}
        self.taps: list = []
        self.rows: list[dict] = []
        self.steps = 0
        self._seq = 0
        self._heap: list[_Entry] = []
        self._by_seq: dict[int, _Entry] = {}

    # -- wiring -------------------------------------------------------------

    def add_actor(self, actor: Actor) -> None:
        if actor.label in self.actors:
            raise SimnetError(f"duplicate actor label {actor.label!r}")
        self.actors[actor.label] = actor

    def add_tap(self, tap) -> None:
        self.taps.append(tap)

    # -- recorder interface (actors call these through their recorder) ------

    def secret(self, tick: int, owner: str, label: str, value: bytes) -> None:
        self.rows.append({
            "kind": "secret", "tick": tick, "owner": owner,
            "label": label, "value_hex": value.hex(),
        })

    def session(self, tick: int, owner: str, parties, key: bytes,
                issued_at: int, ttl: int) -> None:
        from .crypto import key_fingerprint
        self.rows.append({
            "kind": "session", "tick": tick, "owner": owner,
            "parties": list(parties), "key_fp": key_fingerprint(key),
            "issued_at": issued_at, "ttl": ttl,
        })

    # -- submission ---------------------------------------------------------

    def submit(self, sender: str, send: Send, origin: str = "honest",
               deliver_at: Optional[int] = None) -> Frame:
        self._seq += 1
        frame = Frame(seq=self._seq, sender=sender, recipient=send.to,
                      channel=send.channel, payload=send.payload, origin=origin)
        if deliver_at is None:
            deliver_at = self.now + self.latency
            if self.jitter:
                deliver_at += self.rng.randrange(0, self.jitter + 1)
        entry = _Entry(deliver_at=deliver_at, seq=frame.seq, frame=frame)
        if (self.drop_rate > 0.0 and send.channel == CHANNEL_OPEN
                and self.rng.random() < self.drop_rate):
            entry.cancelled = True
        heapq.heappush(self._heap, entry)
        self._by_seq[frame.seq] = entry
        if send.channel == CHANNEL_OPEN and origin == "honest":
            for tap in self.taps:
                tap.on_observe(frame)
        return frame

    def inject(self, sender: str, to: str, payload: bytes, channel: str = CHANNEL_OPEN,
               deliver_at: Optional[int] = None) -> Frame:
        return self.submit(sender, Send(to, payload, channel),
                           origin="adversary", deliver_at=deliver_at)

    def suppress(self, seq: int) -> None:
        entry = self._by_seq.get(seq)
        if entry is None or entry.frame is None:
            raise SimnetError(f"no queued frame with seq {seq}")
        entry.cancelled = True

    def call_at(self, time: int, fn: Callable[[], None]) -> None:
        if time < self.now:
            raise SimnetError("cannot schedule in the past")
        self._seq += 1
        heapq.heappush(self._heap, _Entry(deliver_at=time, seq=self._seq, call=fn))

    # -- the clock ----------------------------------------------------------

    def step(self) -> bool:
        """Process one event.  Returns False when the queue is empty."""
        if not self._heap:
            return False
        entry = heapq.heappop(self._heap)
        if entry.deliver_at < self.now:
            raise SimnetError("event queue went backwards")
        self.now = entry.deliver_at
        self.steps += 1
        if entry.call is not None:
            entry.call()
            return True
        frame = entry.frame
        self._by_seq.pop(frame.seq, None)
        if entry.cancelled:
            self._frame_row("dropped", frame, "")
            return True
        actor = self.actors.get(frame.recipient)
        if actor is None:
            self._frame_row("undeliverable", frame, "")
            return True
        result = actor.handle(frame.sender, frame.payload, self.now)
        kind = "injected" if frame.origin == "adversary" else "delivered"
        self._frame_row(kind, frame, str(result.outcome))
        for send in result.sends:
            self.submit(frame.recipient, send)
        return True

    def run_until_quiescent(self, max_steps: int = 10_000) -> bool:
        """Drain the queue; False means the step budget ran out (livelock)."""
        while self._heap:
            if self.steps >= max_steps:
                return False
            self.step()
        return True

    def _frame_row(self, kind: str, frame: Frame, outcome: str) -> None:
        self.rows.append({
            "kind": kind, "seq": frame.seq, "tick": self.now,
            "from": frame.sender, "to": frame.recipient,
            "channel": frame.channel, "frame_hex": frame.payload.hex(),
            "outcome": outcome,
        })
