"""Offline trace verification: secrecy, agreement, freshness, privacy.

The verifier replays a recorded trace as a Dolev-Yao style derivation
problem.  Starting from everything a wire observer legitimately sees (all
open-channel frames, plus whatever secrets the attacker itself minted), it
closes that set under the operations any party can perform without breaking
cryptography:

* project a wire message into its fields,
* split a bare length-prefixed block,
* open a ciphertext record when the matching key is already in the set,
* derive the keyed-hash key that any 16-byte nonce yields.

Hash applications are deliberately not enumerated: an attacker can hash
anything forever, but a hash of unknown input never reveals that input, so
closing over projections, openings, and the one fixed derivation is what
decides derivability of recorded secrets.

Ciphertext opening follows the record's key reference, so the closure is the
same whether the trace was recorded with real AEAD bodies or with the
inspectable stand-in records; an attacker is only credited with a plaintext
when it holds the key, never because the simulation stored the bytes
readably.  Asymmetric records can only be opened through a private key the
closure owner controls, which honest traces never give it.

Verdicts are split three ways: **checks** fail the trace, **findings** flag
known soft spots that are by design (identities on the open channel, the
replay window inside a session's lifetime, the relay hub's view of who talks
to whom, timestamp-derived device tokens colliding), and malformed input
raises ``TraceFormatError`` instead of producing a verdict at all.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import messages as wire
from .crypto import (
    Ciphertext,
    CryptoConfig,
    CryptoError,
    CryptoSuite,
    MODE_TRANSPARENT,
    NONCE_LEN,
    SYM_KEY_LEN,
    SymKey,
    is_ciphertext,
    key_fingerprint,
)

SECRET_TARGETS = ("machine_id", "token", "otp", "passphrase",
                  "relay_secret", "session_key")

_FRAME_KINDS = ("delivered", "dropped", "injected", "undeliverable")
_ROW_KINDS = _FRAME_KINDS + ("meta", "secret", "session", "end")


class TraceFormatError(Exception):
    """The trace is not a complete, well-formed recording."""


# ---------------------------------------------------------------------------
# trace loading
# ---------------------------------------------------------------------------


def parse_trace(text: str) -> list[dict]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"trace line {lineno}: not JSON ({exc.msg})") from exc
        if not isinstance(row, dict) or "kind" not in row:
            raise TraceFormatError(f"trace line {lineno}: row has no kind")
        if row["kind"] not in _ROW_KINDS:
            raise TraceFormatError(f"trace line {lineno}: unknown row kind {row['kind']!r}")
        rows.append(row)
    check_shape(rows)
    return rows


def load_trace(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trace(fh.read())


def check_shape(rows: list[dict]) -> None:
    if not rows or rows[0]["kind"] != "meta":
        raise TraceFormatError("trace does not start with a meta row")
    if rows[-1]["kind"] != "end":
        raise TraceFormatError("trace has no end row: recording is incomplete")
    if not rows[-1].get("quiescent", False):
        raise TraceFormatError("trace ends mid-flight: the run never went quiescent")
    meta = rows[0]
    for need in ("scenario", "seed", "crypto_mode", "hash_alg", "actors"):
        if need not in meta:
            raise TraceFormatError(f"meta row lacks {need!r}")
    for row in rows[1:-1]:
        if row["kind"] in ("meta", "end"):
            raise TraceFormatError("meta/end rows may only bound the trace")
        if row["kind"] in _FRAME_KINDS and "frame_hex" not in row:
            raise TraceFormatError("frame row lacks frame_hex")


# ---------------------------------------------------------------------------
# knowledge closure
# ---------------------------------------------------------------------------


def _suite_for(meta: dict) -> CryptoSuite:
    return CryptoSuite(CryptoConfig(mode=meta["crypto_mode"], hash_alg=meta["hash_alg"]))


def _project_message(term: bytes) -> Optional[list[bytes]]:
    if not term or term[0] not in wire.ALL_TAGS:
        return None
    try:
        return wire.split_fields(term[1:])
    except wire.CodecError:
        return None


def _split_block(term: bytes) -> Optional[list[bytes]]:
    try:
        fields = wire.split_fields(term)
    except wire.CodecError:
        return None
    return fields or None


class Closure:
    """Saturates a knowledge set; worklist over byte terms."""

    def __init__(self, suite: CryptoSuite, priv_ids: frozenset[str] = frozenset()):
        self.suite = suite
        self.priv_ids = priv_ids
        self.known: set[bytes] = set()
        self._keys_by_fp: dict[str, bytes] = {}
        self._pending_cts: dict[str, list[bytes]] = {}  # key_ref -> unopened records
        self._work: list[bytes] = []

    def add(self, term: bytes) -> None:
        term = bytes(term)
        if term in self.known:
            return
        self.known.add(term)
        self._work.append(term)

    def run(self) -> set[bytes]:
        while self._work:
            term = self._work.pop()
            self._expand(term)
        return self.known

    def _expand(self, term: bytes) -> None:
        for fields in (_project_message(term), _split_block(term)):
            if fields is not None:
                for f in fields:
                    self.add(f)

        if is_ciphertext(term):
            self._try_open(term)

        if len(term) == NONCE_LEN:
            derived = self.suite.nonce_key(term).value
            self._learn_key(derived)
            self.add(derived)
        elif len(term) == SYM_KEY_LEN:
            self._learn_key(term)

    def _learn_key(self, key_bytes: bytes) -> None:
        fp = key_fingerprint(key_bytes)
        if fp in self._keys_by_fp:
            return
        self._keys_by_fp[fp] = key_bytes
        for blob in self._pending_cts.pop(fp, []):
            self._open(blob, key_bytes)

    def _try_open(self, blob: bytes) -> None:
        try:
            ct = Ciphertext.parse(blob)
        except CryptoError:
            return
        if ct.alg == 0x01:  # asymmetric: needs a private key we control
            if ct.key_ref in self.priv_ids and ct.mode == MODE_TRANSPARENT:
                self.add(ct.body)
            return
        key = self._keys_by_fp.get(ct.key_ref)
        if key is not None:
            self._open(blob, key)
        else:
            self._pending_cts.setdefault(ct.key_ref, []).append(blob)

    def _open(self, blob: bytes, key_bytes: bytes) -> None:
        try:
            plain = self.suite.sym_decrypt(SymKey(key_bytes), blob)
        except CryptoError:
            return
        self.add(plain)


def knowledge_closure(base: Iterable[bytes], suite: CryptoSuite,
                      priv_ids: frozenset[str] = frozenset()) -> set[bytes]:
    cl = Closure(suite, priv_ids)
    for term in base:
        cl.add(term)
    return cl.run()


def adversary_base(rows: list[dict]) -> list[bytes]:
    """Everything a wire observer sees: every open-channel frame (honest
    traffic is tapped at submission, so dropped frames count too), the
    attacker's own minted secrets, and all public actor labels."""
    meta = rows[0]
    adv = meta.get("adversary", "")
    base: list[bytes] = []
    for row in rows:
        if row["kind"] in _FRAME_KINDS and row.get("channel") == wire.CHANNEL_OPEN:
            base.append(bytes.fromhex(row["frame_hex"]))
        if row["kind"] == "secret" and adv and row["owner"] == adv:
            base.append(bytes.fromhex(row["value_hex"]))
    for label in meta["actors"]:
        base.append(label.encode())
    return base


def participant_base(rows: list[dict], label: str) -> list[bytes]:
    """What one honest participant sees: frames it touched plus its own
    recorded secrets."""
    base: list[bytes] = []
    for row in rows:
        if (row["kind"] in ("delivered", "injected")
                and label in (row["from"], row["to"])):
            base.append(bytes.fromhex(row["frame_hex"]))
        if row["kind"] == "secret" and row["owner"] == label:
            base.append(bytes.fromhex(row["value_hex"]))
    for other in rows[0]["actors"]:
        base.append(other.encode())
    return base


# ---------------------------------------------------------------------------
# verdicts
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    witnesses: list[str] = field(default_factory=list)


@dataclass
class VerdictReport:
    scenario: str
    seed: int
    checks: list[CheckResult]
    findings: list[dict]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_json(self) -> str:
        doc = {
            "scenario": self.scenario,
            "seed": self.seed,
            "ok": self.ok,
            "checks": [
                {"name": c.name, "passed": c.passed, "witnesses": c.witnesses}
                for c in self.checks
            ],
            "findings": self.findings,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            mark = "PASS" if c.passed else "FAIL"
            lines.append(f"{mark} {c.name}")
            for w in c.witnesses:
                lines.append(f"     witness: {w}")
        for f in self.findings:
            lines.append(f"NOTE {f['name']}: {f['detail']}")
        verdict = "trace verdict: ok" if self.ok else "trace verdict: FAILED"
        lines.append(verdict)
        return "\n".join(lines)


def _secret_rows(rows):
    return [r for r in rows if r["kind"] == "secret"]


def _session_rows(rows):
    return [r for r in rows if r["kind"] == "session"]


def check_secrecy(rows: list[dict], closure: set[bytes]) -> CheckResult:
    adv = rows[0].get("adversary", "")
    witnesses = []
    for row in _secret_rows(rows):
        if row["label"] not in SECRET_TARGETS or row["owner"] == adv:
            continue
        value = bytes.fromhex(row["value_hex"])
        if value in closure:
            witnesses.append(
                f"{row['label']} of {row['owner']} (tick {row['tick']}, "
                f"{row['value_hex'][:16]}...) is derivable from the wire")
    return CheckResult("secrecy", not witnesses, witnesses)


def _uid_map(rows) -> dict[str, str]:
    """Network address -> account id, from each device's own registration."""
    out = {}
    for row in _secret_rows(rows):
        if row["label"] == "user_id":
            out[row["owner"]] = bytes.fromhex(row["value_hex"]).decode(errors="replace")
    return out


def check_agreement(rows: list[dict]) -> CheckResult:
    """Every held session key was issued exactly once, and every holder
    binds it to the same pair of parties.

    A provider only ever learns the requesting network address, so its party
    entries are translated through the recorded address-to-account bindings
    before comparison; a genuine mismatch survives translation.
    """
    meta = rows[0]
    cks_labels = {l for l, role in meta["actors"].items() if role == "cks"}
    uid_map = _uid_map(rows)
    norm = lambda ps: tuple(uid_map.get(p, p) for p in ps)
    witnesses = []
    by_fp: dict[str, list[dict]] = {}
    for row in _session_rows(rows):
        by_fp.setdefault(row["key_fp"], []).append(row)

    for fp, group in sorted(by_fp.items()):
        issuers = [r for r in group if r["owner"] in cks_labels]
        if not issuers:
            witnesses.append(f"session key {fp} held by "
                             f"{sorted(r['owner'] for r in group)} was never issued")
            continue
        if len(issuers) > 1:
            witnesses.append(f"session key {fp} issued {len(issuers)} times")
        parties = {norm(r["parties"]) for r in group}
        if len(parties) > 1:
            witnesses.append(f"session key {fp} binds conflicting parties {sorted(parties)}")
    return CheckResult("agreement", not witnesses, witnesses)


def check_freshness(rows: list[dict]) -> CheckResult:
    """No nonce, one-time code, or session key is ever minted twice.

    Session-key agreement across holders lives in the agreement check; here
    only the mint events themselves are policed, so the lag between the hub
    issuing a key and an endpoint storing it cannot false-alarm.
    """
    witnesses = []
    seen: dict[tuple[str, str], dict] = {}
    for row in _secret_rows(rows):
        if row["label"] not in ("otp", "session_key", "nonce"):
            continue
        key = (row["label"], row["value_hex"])
        if key in seen:
            first = seen[key]
            witnesses.append(
                f"{row['label']} minted twice (ticks {first['tick']} and {row['tick']})")
        else:
            seen[key] = row
    return CheckResult("freshness", not witnesses, witnesses)


def check_privacy(rows: list[dict], suite: CryptoSuite) -> CheckResult:
    """Service providers must never learn account identities, only the
    network addresses they exchange traffic with."""
    meta = rows[0]
    sp_labels = [l for l, role in meta["actors"].items() if role == "sp"]
    user_ids = {row["value_hex"] for row in _secret_rows(rows)
                if row["label"] == "user_id"}
    witnesses = []
    for sp in sorted(sp_labels):
        closure = knowledge_closure(participant_base(rows, sp), suite)
        for uid_hex in sorted(user_ids):
            if bytes.fromhex(uid_hex) in closure:
                witnesses.append(
                    f"provider {sp} can derive user id "
                    f"{bytes.fromhex(uid_hex).decode(errors='replace')!r}")
    return CheckResult("privacy", not witnesses, witnesses)


# ---------------------------------------------------------------------------
# findings: soft spots that are part of the design, reported not failed
# ---------------------------------------------------------------------------


def collect_findings(rows: list[dict]) -> list[dict]:
    findings = []
    seen_honest: dict[str, dict] = {}
    for row in rows:
        if row["kind"] not in _FRAME_KINDS:
            continue
        payload = bytes.fromhex(row["frame_hex"])
        tag = payload[0] if payload else -1

        if tag == wire.ConnNotify.TAG and row["kind"] == "delivered":
            try:
                msg = wire.decode(payload)
                detail = (f"caller {msg.caller_id!r} and callee {msg.callee_id!r} "
                          f"travel in the clear to {row['to']}")
            except wire.CodecError:
                detail = f"notify frame seq {row['seq']}"
            findings.append({"name": "plain-identity-notify", "detail": detail})

        if tag == wire.SvcVerify.TAG and row["kind"] in ("delivered", "injected"):
            findings.append({
                "name": "provider-correlation",
                "detail": (f"relay hub links requesting address with provider "
                           f"{row['from']} (seq {row['seq']})"),
            })

        if row["kind"] == "injected" and row["outcome"].startswith("progress"):
            prior = seen_honest.get(row["frame_hex"])
            if prior is not None:
                findings.append({
                    "name": "replay-window",
                    "detail": (f"copy of seq {prior['seq']} accepted as seq "
                               f"{row['seq']} inside the session lifetime"),
                })
        if row["kind"] in ("delivered", "dropped"):
            seen_honest.setdefault(row["frame_hex"], row)

    tokens: dict[str, dict] = {}
    for row in _secret_rows(rows):
        if row["label"] != "token":
            continue
        prior = tokens.get(row["value_hex"])
        if prior is not None:
            findings.append({
                "name": "token-collision",
                "detail": (f"devices of {prior['owner']} and {row['owner']} got "
                           f"identical tokens (same maker, same tick {row['tick']})"),
            })
        tokens[row["value_hex"]] = row
    return findings


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def verify_rows(rows: list[dict]) -> VerdictReport:
    check_shape(rows)
    meta = rows[0]
    suite = _suite_for(meta)
    closure = knowledge_closure(adversary_base(rows), suite)
    checks = [
        check_secrecy(rows, closure),
        check_agreement(rows),
        check_freshness(rows),
        check_privacy(rows, suite),
    ]
    return VerdictReport(meta["scenario"], meta["seed"], checks, collect_findings(rows))


def verify_file(path: str) -> VerdictReport:
    return verify_rows(load_trace(path))
