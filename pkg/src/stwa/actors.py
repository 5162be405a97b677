"""Role state machines: manufacturer, KDC, CKS, user device, service provider.

Each actor is a pure-ish step function over (state, inbound frame, clock,
rng): ``handle`` consumes at most one frame and returns an Outcome plus a
finite list of outbound sends.  Initiating actions (register a device, start
a registration, connect, request a service, send application data) are
explicit methods the scenario driver calls.

Contract honored throughout: a frame that fails validation produces a
``reject`` or ``violation`` outcome and leaves every persistent registry
untouched — all checks run before any mutation.  Unexpected messages for the
current phase are violations, never crashes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import messages as wire
from .crypto import (
    CryptoError,
    CryptoSuite,
    DecryptionError,
    Nonce,
    SymKey,
    TamperError,
)
from .messages import (
    AppData,
    ConnKeyA,
    ConnKeyB,
    ConnNotify,
    ConnReject,
    ConnRequest,
    ConnRespond,
    InitRecord,
    InitRegister,
    InitToken,
    Message,
    RegDeviceAck,
    RegDeviceAuth,
    RegUser,
    RegUserAck,
    SvcConfirm,
    SvcForward,
    SvcGrantUser,
    SvcRequest,
    SvcTicket,
    SvcVerify,
)
from .registries import (
    LIVE,
    EXPIRED,
    CksDatabase,
    DeviceRecord,
    DuplicateRecordError,
    KdcLog,
    RegistryError,
    SealedTokenStore,
    SessionRecord,
    SessionStore,
    SpRecord,
    UserRecord,
)

PHASE_INIT = "initialization"
PHASE_REGISTER = "registration"
PHASE_CONNECT = "connection"
PHASE_SERVICE = "service"

# secrecy-relevant value labels recorded for the trace verifier
SECRET_LABELS = ("machine_id", "token", "otp", "session_key", "relay_secret", "passphrase")


@dataclass(frozen=True)
class Outcome:
    kind: str  # progress | complete | reject | violation
    detail: str = ""

    @staticmethod
    def progress(detail: str = "") -> "Outcome":
        return Outcome("progress", detail)

    @staticmethod
    def complete(phase: str) -> "Outcome":
        return Outcome("complete", phase)

    @staticmethod
    def reject(reason: str) -> "Outcome":
        return Outcome("reject", reason)

    @staticmethod
    def violation(detail: str) -> "Outcome":
        return Outcome("violation", detail)

    def __str__(self):
        return f"{self.kind}:{self.detail}" if self.detail else self.kind


@dataclass(frozen=True)
class Send:
    to: str
    payload: bytes
    channel: str = wire.CHANNEL_OPEN


@dataclass
class StepResult:
    outcome: Outcome
    sends: list[Send] = field(default_factory=list)


class NullRecorder:
    """Sink for verifier bookkeeping; the network supplies a real one."""

    def secret(self, tick: int, owner: str, label: str, value: bytes) -> None:
        pass

    def session(self, tick: int, owner: str, parties, key: bytes,
                issued_at: int, ttl: int) -> None:
        pass


def _as_bytes(value) -> bytes:
    return value.encode() if isinstance(value, str) else bytes(value)


class Actor:
    ROLE = "actor"

    def __init__(self, label: str, suite: CryptoSuite, rng, recorder=None):
        self.label = label
        self.suite = suite
        self.rng = rng
        self.recorder = recorder or NullRecorder()
        self.audit: list[str] = []

    # -- frame plumbing -----------------------------------------------------

    def handle(self, sender: str, payload: bytes, now: int) -> StepResult:
        try:
            tag = wire.peek_tag(payload)
        except wire.CodecError:
            return self._bad("malformed-frame")
        handler = getattr(self, f"_on_{tag:#04x}", None)
        if handler is None:
            return self._bad("unexpected-message")
        try:
            return handler(sender, payload, now)
        except wire.CodecError:
            return self._bad("malformed-frame")

    def _bad(self, detail: str) -> StepResult:
        self.audit.append(f"violation:{detail}")
        return StepResult(Outcome.violation(detail))

    def _refuse(self, reason: str, sends: Optional[list[Send]] = None) -> StepResult:
        self.audit.append(f"reject:{reason}")
        return StepResult(Outcome.reject(reason), sends or [])

    # -- sealing helpers ----------------------------------------------------

    def _seal_pk(self, msg: Message, pk) -> bytes:
        ct = self.suite.pk_encrypt(pk, msg.field_block())
        return wire.seal_payload(msg.TAG, ct.to_bytes())

    def _seal_sym(self, msg: Message, key: SymKey) -> bytes:
        ct = self.suite.sym_encrypt(key, msg.field_block())
        return wire.seal_payload(msg.TAG, ct.to_bytes())

    def _open_pk(self, payload: bytes, priv) -> Message:
        cls, blob = wire.open_sealed_payload(payload)
        plain = self.suite.pk_decrypt(priv, blob)
        return wire.from_field_block(cls, plain)

    def _open_sym(self, payload: bytes, key: SymKey) -> Message:
        cls, blob = wire.open_sealed_payload(payload)
        plain = self.suite.sym_decrypt(key, blob)
        return wire.from_field_block(cls, plain)

    def state_digest(self) -> dict:
        """Persistent state only; used to prove rejects mutate nothing."""
        return {}


# ---------------------------------------------------------------------------
# manufacturer
# ---------------------------------------------------------------------------


@dataclass
class _PendingMachine:
    machine_id: str
    dmn: str
    device_label: str


class Manufacturer(Actor):
    ROLE = "manufacturer"

    def __init__(self, label, suite, rng, maker_id: str, kdc_label: str, pk_kdc, recorder=None):
        super().__init__(label, suite, rng, recorder)
        self.maker_id = maker_id
        self.kdc_label = kdc_label
        self.pk_kdc = pk_kdc
        self.devices: dict[str, "Device"] = {}  # wired by the harness
        self.pending: dict[bytes, _PendingMachine] = {}
        self.provisioned: dict[str, str] = {}  # machine_id -> device label

    def register_device(self, machine_id: str, dmn: str, device_label: str, now: int) -> StepResult:
        nonce = self.suite.fresh_nonce(self.rng, self.label)
        self.pending[nonce.value] = _PendingMachine(machine_id, dmn, device_label)
        self.recorder.secret(now, device_label, "machine_id", _as_bytes(machine_id))
        msg = InitRegister(machine_id=machine_id, dmn=dmn, nonce=nonce.value, maker_id=self.maker_id)
        return StepResult(Outcome.progress("machine-submitted"),
                          [Send(self.kdc_label, self._seal_pk(msg, self.pk_kdc))])

    def _on_0x02(self, sender, payload, now):  # InitToken
        # the KDC sealed this under the key derived from our request nonce;
        # try each outstanding request to find which one it answers
        for nonce_value, pend in list(self.pending.items()):
            try:
                msg = self._open_sym(payload, self.suite.nonce_key(nonce_value))
            except CryptoError:
                continue
            device = self.devices.get(pend.device_label)
            if device is None:
                return self._bad("unknown-device")
            device.provision(pend.machine_id, pend.dmn, msg.token)
            self.recorder.secret(now, pend.device_label, "token", msg.token)
            del self.pending[nonce_value]
            self.provisioned[pend.machine_id] = pend.device_label
            self.audit.append(f"provisioned:{pend.machine_id}")
            return StepResult(Outcome.complete(PHASE_INIT))
        return self._bad("undecryptable")

    def state_digest(self):
        return {"provisioned": dict(sorted(self.provisioned.items()))}


# ---------------------------------------------------------------------------
# KDC
# ---------------------------------------------------------------------------


class Kdc(Actor):
    ROLE = "kdc"

    def __init__(self, label, suite, rng, keypair, cks_label: str, pk_cks, recorder=None):
        super().__init__(label, suite, rng, recorder)
        self.keypair = keypair
        self.cks_label = cks_label
        self.pk_cks = pk_cks
        self.log = KdcLog()

    def _on_0x01(self, sender, payload, now):  # InitRegister
        try:
            msg = self._open_pk(payload, self.keypair.private)
        except CryptoError:
            return self._bad("undecryptable")
        if msg.machine_id in self.log:
            return self._refuse("duplicate-machine")
        # token binds the maker identity to the moment of registration
        stamp = b"%010d" % now
        token = self.suite.hash(_as_bytes(msg.maker_id) + stamp)
        self.log.put(DeviceRecord(msg.machine_id, msg.dmn, token, now))
        reply = self._seal_sym(InitToken(token=token), self.suite.nonce_key(msg.nonce))
        record = self._seal_pk(
            InitRecord(machine_id=msg.machine_id, dmn=msg.dmn, token=token), self.pk_cks
        )
        return StepResult(
            Outcome.progress("token-minted"),
            [
                Send(sender, reply, channel=wire.CHANNEL_SECURE),
                Send(self.cks_label, record),
            ],
        )

    def state_digest(self):
        return {"log": self.log.snapshot()}


# ---------------------------------------------------------------------------
# CKS
# ---------------------------------------------------------------------------


@dataclass
class _PendingConn:
    caller_addr: str
    caller_uid: str
    callee_uid: str
    caller_nonce: bytes


@dataclass
class _SvcFlowRec:
    user_id: str
    passphrase: bytes
    relay_secret: bytes
    key: bytes
    user_nonce: bytes
    cks_nonce: bytes
    provider_id: str


class Cks(Actor):
    ROLE = "cks"

    def __init__(self, label, suite, rng, keypair, ttl: int, recorder=None):
        super().__init__(label, suite, rng, recorder)
        self.keypair = keypair
        self.ttl = ttl
        self.db = CksDatabase()
        self.pending_conns: dict[str, _PendingConn] = {}  # by callee address
        self.svc_flows: dict[str, _SvcFlowRec] = {}  # by requesting device address

    # -- initialization record ---------------------------------------------

    def _on_0x03(self, sender, payload, now):  # InitRecord
        try:
            msg = self._open_pk(payload, self.keypair.private)
        except CryptoError:
            return self._bad("undecryptable")
        try:
            self.db.store_device(DeviceRecord(msg.machine_id, msg.dmn, msg.token, now))
        except DuplicateRecordError:
            return self._refuse("duplicate-record")
        return StepResult(Outcome.progress("device-on-file"))

    # -- registration -------------------------------------------------------

    def _on_0x11(self, sender, payload, now):  # RegDeviceAuth
        try:
            msg = self._open_pk(payload, self.keypair.private)
        except CryptoError:
            return self._bad("undecryptable")
        rec = self.db.authenticate_device(msg.machine_id, msg.token)
        if rec is None:
            return self._refuse("unauthenticated-device")
        ack = self.suite.hash(rec.token + _as_bytes(rec.dmn))
        otp = self.suite.fresh_otp(self.rng)
        self.db.issue_otp(otp, msg.machine_id, sender)
        self.recorder.secret(now, self.label, "otp", _as_bytes(otp))
        reply = self._seal_sym(
            RegDeviceAck(device_ack=ack, otp=otp), self.suite.nonce_key(msg.nonce)
        )
        return StepResult(Outcome.progress("device-authenticated"), [Send(sender, reply)])

    def _on_0x13(self, sender, payload, now):  # RegUser
        try:
            msg = self._open_pk(payload, self.keypair.private)
        except CryptoError:
            return self._bad("undecryptable")
        issue = self.db.peek_otp(msg.otp)
        if issue is None:
            return self._refuse("bad-otp")
        if self.db.user_by_id(msg.user_id) is not None:
            return self._refuse("duplicate-user")
        self.db.consume_otp(msg.otp)
        temp_id = self.suite.fresh_temp_id(self.rng)
        self.db.store_user(
            UserRecord(msg.user_id, temp_id, issue.machine_id, "consumed", sender)
        )
        ack = self.suite.hash(_as_bytes(msg.user_id) + _as_bytes(msg.otp))
        reply = self._seal_sym(
            RegUserAck(user_ack=ack, temp_id=temp_id), self.suite.nonce_key(msg.nonce)
        )
        return StepResult(Outcome.progress("user-registered"), [Send(sender, reply)])

    # -- connection ---------------------------------------------------------

    def _on_0x21(self, sender, payload, now):  # ConnRequest
        try:
            msg = self._open_pk(payload, self.keypair.private)
        except CryptoError:
            return self._bad("undecryptable")
        caller = self._authorized_user(msg.temp_id, msg.token)
        if caller is None:
            return self._refuse(
                "unauthorized-device",
                [Send(sender, wire.encode(ConnReject(reason="unauthorized-device")))],
            )
        target = self.db.user_by_id(msg.target_id)
        if target is None:
            return self._refuse(
                "unknown-target",
                [Send(sender, wire.encode(ConnReject(reason="unknown-target")))],
            )
        self.pending_conns[target.address] = _PendingConn(
            caller_addr=sender,
            caller_uid=caller.user_id,
            callee_uid=target.user_id,
            caller_nonce=msg.nonce,
        )
        notify = wire.encode(ConnNotify(callee_id=target.user_id, caller_id=caller.user_id))
        return StepResult(Outcome.progress("counterpart-notified"), [Send(target.address, notify)])

    def _on_0x23(self, sender, payload, now):  # ConnRespond
        try:
            msg = self._open_pk(payload, self.keypair.private)
        except CryptoError:
            return self._bad("undecryptable")
        pend = self.pending_conns.get(sender)
        if pend is None:
            return self._bad("uncorrelated")
        callee = self.db.user_by_id(pend.callee_uid)
        bound = self.db.devices.get(callee.bound_machine_id) if callee else None
        if bound is None or bound.token != msg.token:
            del self.pending_conns[sender]
            # the requesting user gets told their counterpart failed the check
            reject = wire.encode(ConnReject(reason="unauthorized-device"))
            return self._refuse("unauthorized-device", [Send(pend.caller_addr, reject)])
        del self.pending_conns[sender]
        key = self.suite.fresh_session_key(self.rng)
        parties = (pend.caller_uid, pend.callee_uid)
        self.db.sessions.put(parties, SessionRecord(key.value, parties, now, self.ttl))
        self.recorder.secret(now, self.label, "session_key", key.value)
        self.recorder.session(now, self.label, parties, key.value, now, self.ttl)
        to_caller = self._seal_sym(ConnKeyA(key=key.value), self.suite.nonce_key(pend.caller_nonce))
        to_callee = self._seal_sym(ConnKeyB(key=key.value), self.suite.nonce_key(msg.nonce))
        return StepResult(
            Outcome.progress("session-issued"),
            [Send(pend.caller_addr, to_caller), Send(sender, to_callee)],
        )

    # -- service ------------------------------------------------------------

    def _on_0x31(self, sender, payload, now):  # SvcRequest
        try:
            msg = self._open_pk(payload, self.keypair.private)
        except CryptoError:
            return self._bad("undecryptable")
        user = self._authorized_user(msg.temp_id, msg.token)
        if user is None:
            return self._refuse("unauthenticated")
        provider = self.db.sp_select(msg.service)
        if provider is None:
            return self._refuse("no-provider")
        key = self.suite.fresh_session_key(self.rng)
        relay = self.suite.fresh_relay_secret(self.rng)
        cks_nonce = self.suite.fresh_nonce(self.rng, self.label)
        sealed_pass = self.suite.sym_encrypt(self.suite.nonce_key(cks_nonce), relay).to_bytes()
        user.p2 = msg.passphrase
        self.svc_flows[sender] = _SvcFlowRec(
            user_id=user.user_id,
            passphrase=msg.passphrase,
            relay_secret=relay,
            key=key.value,
            user_nonce=msg.nonce,
            cks_nonce=cks_nonce.value,
            provider_id=provider,
        )
        self.recorder.secret(now, self.label, "session_key", key.value)
        self.recorder.secret(now, self.label, "relay_secret", relay)
        grant = self._seal_sym(
            SvcGrantUser(
                key=key.value,
                sealed_pass=sealed_pass,
                provider_id=provider,
                passphrase=msg.passphrase,
            ),
            self.suite.nonce_key(msg.nonce),
        )
        return StepResult(Outcome.progress("service-granted"), [Send(sender, grant)])

    def _on_0x34(self, sender, payload, now):  # SvcVerify
        msg = wire.decode(payload)
        try:
            inner = self.suite.pk_decrypt(self.keypair.private, msg.cks_part)
        except CryptoError:
            return self._bad("undecryptable")
        fields = wire.split_fields(inner)
        if len(fields) != 2:
            return self._bad("malformed-frame")
        sp_nonce, user_ref = fields[0], fields[1].decode(errors="replace")
        flow = self.svc_flows.get(user_ref)
        if flow is None:
            return self._bad("uncorrelated")
        try:
            relayed = self.suite.sym_decrypt(self.suite.nonce_key(flow.cks_nonce), msg.sealed_pass)
        except CryptoError:
            return self._refuse("sp-not-authenticated")
        if relayed != flow.relay_secret:
            return self._refuse("sp-not-authenticated")
        if len(sp_nonce) != 16:
            return self._bad("malformed-frame")
        del self.svc_flows[user_ref]
        parties = (flow.user_id, flow.provider_id)
        self.db.sessions.put(parties, SessionRecord(flow.key, parties, now, self.ttl))
        self.recorder.session(now, self.label, parties, flow.key, now, self.ttl)
        user_part = self.suite.sym_encrypt(
            self.suite.nonce_key(flow.user_nonce),
            wire.lp(flow.passphrase) + wire.lp(flow.key) + wire.lp(_as_bytes(flow.provider_id)),
        ).to_bytes()
        provider_part = self.suite.sym_encrypt(
            self.suite.nonce_key(sp_nonce),
            wire.lp(flow.key) + wire.lp(_as_bytes(user_ref)),
        ).to_bytes()
        confirm = wire.encode(SvcConfirm(user_part=user_part, provider_part=provider_part))
        return StepResult(Outcome.progress("provider-verified"), [Send(sender, confirm)])

    # -- helpers ------------------------------------------------------------

    def _authorized_user(self, temp_id: str, token: bytes) -> Optional[UserRecord]:
        user = self.db.user_by_temp(temp_id)
        if user is None:
            return None
        bound = self.db.devices.get(user.bound_machine_id)
        if bound is None or bound.token != token:
            return None
        return user

    def state_digest(self):
        return self.db.snapshot()


# ---------------------------------------------------------------------------
# shared session-peer behavior (device and service provider both talk AppData)
# ---------------------------------------------------------------------------


class SessionPeer(Actor):
    def __init__(self, label, suite, rng, ttl: int, recorder=None):
        super().__init__(label, suite, rng, recorder)
        self.ttl = ttl
        self.sessions = SessionStore()
        self.inbox: list[tuple[str, bytes]] = []  # (peer label, plaintext)

    def _store_session(self, peer_id: str, key: bytes, parties, now: int) -> None:
        self.sessions.put(peer_id, SessionRecord(key, tuple(parties), now, self.ttl))
        self.recorder.session(now, self.label, parties, key, now, self.ttl)

    def send_app_data(self, peer_id: str, address: str, body: bytes, now: int) -> StepResult:
        status, rec = self.sessions.status(peer_id, now)
        if status != LIVE:
            return self._bad("no-live-session")
        ct = self.suite.sym_encrypt(SymKey(rec.key), body).to_bytes()
        return StepResult(
            Outcome.progress("app-data-sent"),
            [Send(address, wire.encode(AppData(body=ct)))],
        )

    def _on_0x41(self, sender, payload, now):  # AppData
        msg = wire.decode(payload)
        # the wire carries no session identifier, so try every live session
        # key first, then expired ones to tell a replay from garbage
        for want_live in (True, False):
            for peer, rec in self.sessions.all_records():
                if rec.live(now) != want_live:
                    continue
                try:
                    plain = self.suite.sym_decrypt(SymKey(rec.key), msg.body)
                except CryptoError:
                    continue
                if not want_live:
                    return self._refuse("session-expired")
                self.inbox.append((str(peer), plain))
                return StepResult(Outcome.progress("app-data"))
        return self._bad("app-data-tamper")


# ---------------------------------------------------------------------------
# user device
# ---------------------------------------------------------------------------


@dataclass
class _RegFlow:
    user_id: str
    nonce: bytes
    phase: str  # "wait-ack" | "wait-user-ack"
    otp: str = ""


@dataclass
class _ConnFlow:
    role: str  # "caller" | "callee"
    peer_id: str
    nonce: bytes


@dataclass
class _SvcFlow:
    service: str
    passphrase: bytes
    nonce: bytes
    phase: str  # "wait-grant" | "wait-forward"
    key: bytes = b""
    provider_id: str = ""


class Device(SessionPeer):
    """A user's device; it also acts for the user who registered on it."""

    ROLE = "device"

    def __init__(self, label, suite, rng, ttl, cks_label: str, pk_cks, recorder=None):
        super().__init__(label, suite, rng, ttl, recorder)
        self.cks_label = cks_label
        self.pk_cks = pk_cks
        self.machine_id: Optional[str] = None
        self.dmn: Optional[str] = None
        self.storage: Optional[SealedTokenStore] = None
        self.user_id: Optional[str] = None
        self.temp_id: Optional[str] = None
        self.reg: Optional[_RegFlow] = None
        self.conn: Optional[_ConnFlow] = None
        self.svc: Optional[_SvcFlow] = None

    # -- provisioning (physical handoff at the factory, not a frame) --------

    def provision(self, machine_id: str, dmn: str, token: bytes) -> None:
        self.machine_id = machine_id
        self.dmn = dmn
        self.storage = SealedTokenStore(self.suite, self.suite.fresh_storage_key(self.rng))
        self.storage.seal(token)

    def _token(self) -> bytes:
        if self.storage is None:
            raise RegistryError("device not provisioned")
        return self.storage.unseal()

    # -- registration -------------------------------------------------------

    def begin_registration(self, user_id: str, now: int) -> StepResult:
        if self.storage is None:
            return self._bad("not-provisioned")
        if self.user_id is not None or self.reg is not None:
            return self._bad("already-registered")
        nonce = self.suite.fresh_nonce(self.rng, self.label)
        self.reg = _RegFlow(user_id=user_id, nonce=nonce.value, phase="wait-ack")
        self.recorder.secret(now, self.label, "user_id", _as_bytes(user_id))
        msg = RegDeviceAuth(machine_id=self.machine_id, token=self._token(), nonce=nonce.value)
        return StepResult(Outcome.progress("device-auth-sent"),
                          [Send(self.cks_label, self._seal_pk(msg, self.pk_cks))])

    def _on_0x12(self, sender, payload, now):  # RegDeviceAck
        if self.reg is None or self.reg.phase != "wait-ack":
            return self._bad("unexpected-message")
        try:
            msg = self._open_sym(payload, self.suite.nonce_key(self.reg.nonce))
        except CryptoError:
            return self._bad("undecryptable")
        expected = self.suite.hash(self._token() + _as_bytes(self.dmn))
        if msg.device_ack != expected:
            self.reg = None
            return self._bad("compromised-server-or-channel")
        # ack verified: the user now submits their identity with the OTP
        nonce = self.suite.fresh_nonce(self.rng, self.label)
        self.reg = _RegFlow(
            user_id=self.reg.user_id, nonce=nonce.value, phase="wait-user-ack", otp=msg.otp
        )
        reply = RegUser(user_id=self.reg.user_id, otp=msg.otp, nonce=nonce.value)
        return StepResult(Outcome.progress("otp-submitted"),
                          [Send(self.cks_label, self._seal_pk(reply, self.pk_cks))])

    def _on_0x14(self, sender, payload, now):  # RegUserAck
        if self.reg is None or self.reg.phase != "wait-user-ack":
            return self._bad("unexpected-message")
        try:
            msg = self._open_sym(payload, self.suite.nonce_key(self.reg.nonce))
        except CryptoError:
            return self._bad("undecryptable")
        expected = self.suite.hash(_as_bytes(self.reg.user_id) + _as_bytes(self.reg.otp))
        if msg.user_ack != expected:
            self.reg = None
            return self._bad("compromised-server-or-channel")
        self.user_id = self.reg.user_id
        self.temp_id = msg.temp_id
        self.reg = None
        return StepResult(Outcome.complete(PHASE_REGISTER))

    # -- connection ---------------------------------------------------------

    def request_connection(self, target_user_id: str, now: int) -> StepResult:
        if self.temp_id is None:
            return self._bad("not-registered")
        if self.conn is not None:
            return self._bad("busy")
        nonce = self.suite.fresh_nonce(self.rng, self.label)
        self.conn = _ConnFlow(role="caller", peer_id=target_user_id, nonce=nonce.value)
        msg = ConnRequest(
            target_id=target_user_id, token=self._token(), nonce=nonce.value, temp_id=self.temp_id
        )
        return StepResult(Outcome.progress("connection-requested"),
                          [Send(self.cks_label, self._seal_pk(msg, self.pk_cks))])

    def _on_0x22(self, sender, payload, now):  # ConnNotify (plaintext)
        msg = wire.decode(payload)
        if self.temp_id is None:
            return self._bad("not-registered")
        if msg.callee_id != self.user_id:
            return self._bad("misaddressed-notify")
        if self.conn is not None:
            return self._bad("busy")
        nonce = self.suite.fresh_nonce(self.rng, self.label)
        self.conn = _ConnFlow(role="callee", peer_id=msg.caller_id, nonce=nonce.value)
        reply = ConnRespond(token=self._token(), nonce=nonce.value)
        return StepResult(Outcome.progress("connection-accepted"),
                          [Send(self.cks_label, self._seal_pk(reply, self.pk_cks))])

    def _on_0x24(self, sender, payload, now):  # ConnKeyA
        return self._accept_conn_key(payload, "caller", now)

    def _on_0x25(self, sender, payload, now):  # ConnKeyB
        return self._accept_conn_key(payload, "callee", now)

    def _accept_conn_key(self, payload, role: str, now: int) -> StepResult:
        if self.conn is None or self.conn.role != role:
            return self._bad("unexpected-message")
        try:
            msg = self._open_sym(payload, self.suite.nonce_key(self.conn.nonce))
        except CryptoError:
            return self._bad("undecryptable")
        peer = self.conn.peer_id
        parties = (self.user_id, peer) if role == "caller" else (peer, self.user_id)
        self._store_session(peer, msg.key, parties, now)
        self.conn = None
        return StepResult(Outcome.complete(PHASE_CONNECT))

    def _on_0x26(self, sender, payload, now):  # ConnReject
        msg = wire.decode(payload)
        self.conn = None
        return self._refuse(f"connection:{msg.reason}")

    # -- service ------------------------------------------------------------

    def request_service(self, service: str, passphrase: bytes, now: int) -> StepResult:
        if self.temp_id is None:
            return self._bad("not-registered")
        if len(passphrase) == 0:
            return self._bad("empty-passphrase")
        if self.svc is not None:
            return self._bad("busy")
        nonce = self.suite.fresh_nonce(self.rng, self.label)
        self.svc = _SvcFlow(service=service, passphrase=passphrase, nonce=nonce.value,
                            phase="wait-grant")
        self.recorder.secret(now, self.label, "passphrase", passphrase)
        msg = SvcRequest(service=service, passphrase=passphrase, token=self._token(),
                         nonce=nonce.value, temp_id=self.temp_id)
        return StepResult(Outcome.progress("service-requested"),
                          [Send(self.cks_label, self._seal_pk(msg, self.pk_cks))])

    def _on_0x32(self, sender, payload, now):  # SvcGrantUser
        if self.svc is None or self.svc.phase != "wait-grant":
            return self._bad("unexpected-message")
        try:
            msg = self._open_sym(payload, self.suite.nonce_key(self.svc.nonce))
        except CryptoError:
            return self._bad("undecryptable")
        if msg.passphrase != self.svc.passphrase:
            # whoever built this grant did not see our request's pass-phrase
            self.svc = None
            return self._bad("cks-impersonation-suspected")
        self.svc.key = msg.key
        self.svc.provider_id = msg.provider_id
        self.svc.phase = "wait-forward"
        ticket = wire.encode(SvcTicket(provider_id=msg.provider_id, sealed_pass=msg.sealed_pass))
        return StepResult(Outcome.progress("ticket-sent"), [Send(msg.provider_id, ticket)])

    def _on_0x36(self, sender, payload, now):  # SvcForward
        if self.svc is None or self.svc.phase != "wait-forward":
            return self._bad("unexpected-message")
        msg = wire.decode(payload)
        try:
            inner = self.suite.sym_decrypt(self.suite.nonce_key(self.svc.nonce), msg.user_part)
        except CryptoError:
            return self._bad("undecryptable")
        fields = wire.split_fields(inner)
        if len(fields) != 3:
            return self._bad("malformed-frame")
        passphrase, key, provider_id = fields[0], fields[1], fields[2].decode(errors="replace")
        if (
            passphrase != self.svc.passphrase
            or key != self.svc.key
            or provider_id != self.svc.provider_id
        ):
            self.svc = None
            return self._bad("sp-impersonation-suspected")
        self._store_session(provider_id, key, (self.user_id, provider_id), now)
        self.svc = None
        return StepResult(Outcome.complete(PHASE_SERVICE))

    def state_digest(self):
        return {
            "machine_id": self.machine_id,
            "user_id": self.user_id,
            "temp_id": self.temp_id,
            "sessions": self.sessions.snapshot(),
        }


# ---------------------------------------------------------------------------
# service provider
# ---------------------------------------------------------------------------


class ServiceProvider(SessionPeer):
    ROLE = "sp"

    def __init__(self, label, suite, rng, ttl, services, cks_label: str, pk_cks, recorder=None):
        super().__init__(label, suite, rng, ttl, recorder)
        self.services = tuple(services)
        self.cks_label = cks_label
        self.pk_cks = pk_cks
        self.pending_nonce: dict[bytes, str] = {}  # nonce -> ticket sender
        self.nonce_last: Optional[bytes] = None

    def _on_0x33(self, sender, payload, now):  # SvcTicket
        msg = wire.decode(payload)
        if msg.provider_id != self.label:
            return self._bad("misaddressed-ticket")
        nonce = self.suite.fresh_nonce(self.rng, self.label)
        self.pending_nonce[nonce.value] = sender
        self.nonce_last = nonce.value
        self.recorder.secret(now, self.label, "nonce", nonce.value)
        cks_part = self.suite.pk_encrypt(
            self.pk_cks, wire.lp(nonce.value) + wire.lp(_as_bytes(sender))
        ).to_bytes()
        verify = wire.encode(SvcVerify(sealed_pass=msg.sealed_pass, cks_part=cks_part))
        return StepResult(Outcome.progress("verification-sent"), [Send(self.cks_label, verify)])

    def _on_0x35(self, sender, payload, now):  # SvcConfirm
        msg = wire.decode(payload)
        for nonce_value, ticket_sender in list(self.pending_nonce.items()):
            try:
                inner = self.suite.sym_decrypt(self.suite.nonce_key(nonce_value), msg.provider_part)
            except CryptoError:
                continue
            fields = wire.split_fields(inner)
            if len(fields) != 2:
                return self._bad("malformed-frame")
            key, user_ref = fields[0], fields[1].decode(errors="replace")
            del self.pending_nonce[nonce_value]
            self._store_session(user_ref, key, (user_ref, self.label), now)
            forward = wire.encode(SvcForward(user_part=msg.user_part))
            return StepResult(Outcome.progress("session-established"), [Send(user_ref, forward)])
        return self._bad("undecryptable")

    def state_digest(self):
        return {"sessions": self.sessions.snapshot(), "services": sorted(self.services)}
