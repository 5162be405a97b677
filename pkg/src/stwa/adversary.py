"""Adversary models: a Dolev-Yao attacker on the open channel.

The attacker observes every honest open-channel frame, can replay observed
frames byte-identically after a delay, flip a byte and inject the mutant
(optionally suppressing the original), fabricate frames from whatever its
knowledge contains, and impersonate a role with a canned script.  It cannot
break encryption and never sees the secure channel.

Actions reference observed traffic by (message tag, nth occurrence) so attack
scripts can be written before sequence numbers exist; the programmatic API
also accepts explicit seqs.  A ``synflood`` action is recognized but fails
not-implemented by design: volumetric denial of service is out of scope.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from . import messages as wire
from .actors import Actor, Outcome, Send, StepResult, _as_bytes
from .crypto import CryptoSuite, SymKey
from .messages import Frame


class AttackScriptError(Exception):
    pass


class NotImplementedAttack(AttackScriptError):
    """Raised by placeholder attack types that are recognized but unmodeled."""


@dataclass
class AdversaryKnowledge:
    """What the attacker holds: its own keys and everything it has observed.

    The derived knowledge-closure set is computed offline by the trace
    verifier; scripts here only ever use the raw material below.
    """

    label: str = "adversary"
    observed: list[Frame] = field(default_factory=list)
    own_private_ids: set[str] = field(default_factory=set)
    public_keys: dict = field(default_factory=dict)

    def frames_with_tag(self, tag: int) -> list[Frame]:
        return [f for f in self.observed if f.payload and f.payload[0] == tag]


def _parse_tag(text: str) -> int:
    try:
        return int(text, 0)
    except ValueError as exc:
        raise AttackScriptError(f"bad tag {text!r}") from exc


@dataclass
class Action:
    kind: str  # eavesdrop | replay | tamper | fake-user | fake-sp | fake-cks | synflood
    tag: int = 0
    nth: int = 1
    delay: int = 0
    byte_index: int = 0
    new_byte: int = 0
    suppress: bool = False
    target: str = ""  # fake-user: user id to call


class Adversary(Actor):
    """Tap + scripted actor in one.  Register with the net via ``attach``."""

    ROLE = "adversary"

    def __init__(self, label, suite: CryptoSuite, rng, keypair, pk_cks, cks_label="cks",
                 recorder=None):
        super().__init__(label, suite, rng, recorder)
        self.keypair = keypair
        self.pk_cks = pk_cks
        self.cks_label = cks_label
        self.knowledge = AdversaryKnowledge(label=label, own_private_ids={label})
        self.actions: list[Action] = []
        self._armed: list[Action] = []
        self._counts: dict[int, int] = {}
        self.net = None

    def attach(self, net) -> None:
        self.net = net
        net.add_tap(self)
        net.add_actor(self)

    # -- script management ---------------------------------------------------

    def arm(self, action: Action) -> None:
        """Activate an action.  Trigger-style actions wait for their frame;
        immediate actions fire now."""
        if action.kind == "synflood":
            raise NotImplementedAttack("synflood attack modeling is not implemented")
        if action.kind == "eavesdrop":
            return  # observation is always on once attached
        if action.kind == "fake-user":
            self._fake_user(action)
            return
        if action.kind not in ("replay", "tamper", "fake-sp", "fake-cks"):
            raise AttackScriptError(f"unknown attack action {action.kind!r}")
        self.actions.append(action)
        self._armed.append(action)
        # A replay (or a tamper that leaves the original alone) may act on
        # traffic that already passed.  Anything that suppresses must catch
        # its frame in flight, so it waits for the next live match.
        if action.kind == "replay" or (action.kind == "tamper" and not action.suppress):
            for frame in self.knowledge.frames_with_tag(action.tag):
                self._consider(action, frame)

    # -- tap interface -------------------------------------------------------

    def on_observe(self, frame: Frame) -> None:
        self.knowledge.observed.append(frame)
        tag = frame.payload[0] if frame.payload else -1
        self._counts[tag] = self._counts.get(tag, 0) + 1
        for action in list(self._armed):
            self._consider(action, frame)

    def _consider(self, action: Action, frame: Frame) -> None:
        tag = frame.payload[0] if frame.payload else -1
        if tag != action.tag:
            return
        seen = [f for f in self.knowledge.frames_with_tag(action.tag)]
        if len(seen) < action.nth or seen[action.nth - 1].seq != frame.seq:
            return
        self._armed.remove(action)
        self._fire(action, frame)

    # -- the actions ---------------------------------------------------------

    def replay(self, frame: Frame, delay: int) -> None:
        """Byte-identical resubmission of an observed frame.

        The copy rides the same network, so it always pays normal latency;
        ``delay`` adds on top.  A zero-delay replay of a frame still in
        flight therefore lands just after the original, never before it.
        """
        self.net.inject(frame.sender, frame.recipient, frame.payload,
                        deliver_at=self.net.now + self.net.latency + delay)

    def tamper(self, frame: Frame, byte_index: int, new_byte: int,
               suppress: bool = True) -> None:
        payload = bytearray(frame.payload)
        if not 0 <= byte_index < len(payload):
            raise AttackScriptError(f"byte index {byte_index} outside frame")
        payload[byte_index] = new_byte & 0xFF
        if suppress:
            self.net.suppress(frame.seq)
        self.net.inject(frame.sender, frame.recipient, bytes(payload))

    def _fire(self, action: Action, frame: Frame) -> None:
        if action.kind == "replay":
            self.replay(frame, action.delay)
        elif action.kind == "tamper":
            self.tamper(frame, action.byte_index, action.new_byte, action.suppress)
        elif action.kind == "fake-sp":
            self._fake_sp(frame)
        elif action.kind == "fake-cks":
            self._fake_cks(frame)

    def _fake_user(self, action: Action) -> None:
        """Pose as a registered user with fabricated credentials."""
        nonce = self.suite.fresh_nonce(self.rng, self.label)
        self.recorder.secret(self.net.now, self.label, "nonce", nonce.value)
        msg = wire.ConnRequest(
            target_id=action.target,
            token=self.rng.randbytes(32),
            nonce=nonce.value,
            temp_id="TID-" + self.rng.randbytes(8).hex(),
        )
        ct = self.suite.pk_encrypt(self.pk_cks, msg.field_block())
        self.net.inject(self.label, self.cks_label, wire.seal_payload(msg.TAG, ct.to_bytes()))

    def _fake_sp(self, ticket_frame: Frame) -> None:
        """Steal a service ticket and answer it without the sealed pass.

        The genuine delivery is suppressed; the fabricated verification has
        everything right except the one thing the attacker cannot build: the
        pass-phrase sealed to the CKS's own nonce key.
        """
        self.net.suppress(ticket_frame.seq)
        nonce = self.suite.fresh_nonce(self.rng, self.label)
        self.recorder.secret(self.net.now, self.label, "nonce", nonce.value)
        fake_pass = self.suite.sym_encrypt(SymKey(self.rng.randbytes(32)),
                                           self.rng.randbytes(16)).to_bytes()
        cks_part = self.suite.pk_encrypt(
            self.pk_cks, wire.lp(nonce.value) + wire.lp(_as_bytes(ticket_frame.sender))
        ).to_bytes()
        msg = wire.SvcVerify(sealed_pass=fake_pass, cks_part=cks_part)
        self.net.inject(self.label, self.cks_label, wire.encode(msg))

    def _fake_cks(self, request_frame: Frame) -> None:
        """Swallow a service request and answer with a forged grant.

        The attacker never learned the requester's nonce (it traveled under
        the CKS public key), so the forged grant cannot be sealed under the
        right key and the device must refuse it.
        """
        self.net.suppress(request_frame.seq)
        msg = wire.SvcGrantUser(
            key=self.rng.randbytes(32),
            sealed_pass=self.rng.randbytes(24),
            provider_id="sp-fake",
            passphrase=b"guess",
        )
        ct = self.suite.sym_encrypt(SymKey(self.rng.randbytes(32)), msg.field_block())
        self.net.inject(self.label, request_frame.sender,
                        wire.seal_payload(msg.TAG, ct.to_bytes()))

    # -- frames addressed to the adversary -----------------------------------

    def handle(self, sender: str, payload: bytes, now: int) -> StepResult:
        # everything delivered to the attacker's own label is swallowed
        self.knowledge.observed.append(
            Frame(seq=-1, sender=sender, recipient=self.label,
                  channel=wire.CHANNEL_OPEN, payload=payload, origin="honest")
        )
        return StepResult(Outcome.progress("captured"))
