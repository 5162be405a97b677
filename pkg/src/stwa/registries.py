"""Persistent state each role keeps between protocol steps.

KDC log, CKS database (devices, users, pending OTPs, sessions, provider
catalog), per-device sealed token storage.  Everything snapshots to plain
dicts for the --snapshot CLI flag and for rejection-safety diffing in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .crypto import CryptoSuite, SymKey, key_fingerprint


class RegistryError(Exception):
    pass


class DuplicateRecordError(RegistryError):
    pass


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass
class DeviceRecord:
    machine_id: str
    dmn: str
    token: bytes
    registered_at: int


@dataclass
class UserRecord:
    user_id: str
    temp_id: str
    bound_machine_id: str
    otp_state: str  # always "consumed" once the record exists
    address: str  # network label the registration came from
    p2: Optional[bytes] = None  # latest service pass-phrase, set per flow


@dataclass
class OtpIssue:
    value: str
    machine_id: str
    address: str
    state: str = "issued"  # "issued" -> "consumed", exactly once


@dataclass
class SessionRecord:
    key: bytes
    parties: tuple[str, str]
    issued_at: int
    ttl: int

    def live(self, now: int) -> bool:
        # inclusive bound: still live at exactly issued_at + ttl
        return now <= self.issued_at + self.ttl


@dataclass
class SpRecord:
    sp_id: str
    services: tuple[str, ...]
    nonce_last: Optional[bytes] = None


# ---------------------------------------------------------------------------
# KDC log
# ---------------------------------------------------------------------------


class KdcLog:
    def __init__(self):
        self._rows: dict[str, DeviceRecord] = {}

    def __contains__(self, machine_id: str) -> bool:
        return machine_id in self._rows

    def put(self, rec: DeviceRecord) -> None:
        if rec.machine_id in self._rows:
            raise DuplicateRecordError(f"machine {rec.machine_id!r} already registered")
        self._rows[rec.machine_id] = rec

    def snapshot(self) -> list[dict]:
        return [
            {
                "machine_id": r.machine_id,
                "dmn": r.dmn,
                "token": r.token.hex(),
                "registered_at": r.registered_at,
            }
            for r in sorted(self._rows.values(), key=lambda r: r.machine_id)
        ]


# ---------------------------------------------------------------------------
# session store
# ---------------------------------------------------------------------------

LIVE = "live"
EXPIRED = "expired"
ABSENT = "absent"


class SessionStore:
    """Sessions keyed by an owner-chosen label (peer id or party pair)."""

    def __init__(self):
        self._rows: dict = {}

    def put(self, key_label, rec: SessionRecord) -> None:
        self._rows[key_label] = rec

    def status(self, key_label, now: int) -> tuple[str, Optional[SessionRecord]]:
        rec = self._rows.get(key_label)
        if rec is None:
            return ABSENT, None
        return (LIVE if rec.live(now) else EXPIRED), rec

    def all_records(self) -> list[tuple[object, SessionRecord]]:
        return list(self._rows.items())

    def purge_expired(self, now: int) -> int:
        dead = [k for k, r in self._rows.items() if not r.live(now)]
        for k in dead:
            del self._rows[k]
        return len(dead)

    def snapshot(self) -> list[dict]:
        return [
            {
                "parties": list(r.parties),
                "key_fp": key_fingerprint(r.key),
                "issued_at": r.issued_at,
                "ttl": r.ttl,
            }
            for _, r in sorted(self._rows.items(), key=lambda kv: str(kv[0]))
        ]


# ---------------------------------------------------------------------------
# CKS database
# ---------------------------------------------------------------------------


class CksDatabase:
    def __init__(self):
        self.devices: dict[str, DeviceRecord] = {}
        self.users_by_temp: dict[str, UserRecord] = {}
        self.users_by_id: dict[str, UserRecord] = {}
        self.pending_otps: dict[str, OtpIssue] = {}
        self.sessions = SessionStore()
        self.sp_catalog: dict[str, SpRecord] = {}

    # -- devices ------------------------------------------------------------

    def store_device(self, rec: DeviceRecord) -> None:
        if rec.machine_id in self.devices:
            raise DuplicateRecordError(f"device {rec.machine_id!r} already on file")
        self.devices[rec.machine_id] = rec

    def authenticate_device(self, machine_id: str, token: bytes) -> Optional[DeviceRecord]:
        """Constant-shape check: record exists and token matches exactly."""
        rec = self.devices.get(machine_id)
        if rec is None or rec.token != token:
            return None
        return rec

    # -- OTP lifecycle ------------------------------------------------------

    def issue_otp(self, otp: str, machine_id: str, address: str) -> None:
        if otp in self.pending_otps:
            raise DuplicateRecordError("otp value collision")
        self.pending_otps[otp] = OtpIssue(otp, machine_id, address)

    def peek_otp(self, otp: str) -> Optional[OtpIssue]:
        issue = self.pending_otps.get(otp)
        return issue if issue is not None and issue.state == "issued" else None

    def consume_otp(self, otp: str) -> OtpIssue:
        issue = self.pending_otps.get(otp)
        if issue is None or issue.state != "issued":
            raise RegistryError("otp unknown or already consumed")
        issue.state = "consumed"
        return issue

    # -- users ---------------------------------------------------------------

    def store_user(self, rec: UserRecord) -> None:
        if rec.temp_id in self.users_by_temp or rec.user_id in self.users_by_id:
            raise DuplicateRecordError(f"user {rec.user_id!r} already on file")
        if rec.bound_machine_id not in self.devices:
            raise RegistryError("user record would dangle: no such device")
        self.users_by_temp[rec.temp_id] = rec
        self.users_by_id[rec.user_id] = rec

    def user_by_temp(self, temp_id: str) -> Optional[UserRecord]:
        return self.users_by_temp.get(temp_id)

    def user_by_id(self, user_id: str) -> Optional[UserRecord]:
        return self.users_by_id.get(user_id)

    # -- provider catalog ----------------------------------------------------

    def register_sp(self, rec: SpRecord) -> None:
        if rec.sp_id in self.sp_catalog:
            raise DuplicateRecordError(f"provider {rec.sp_id!r} already on file")
        self.sp_catalog[rec.sp_id] = rec

    def sp_select(self, service: str) -> Optional[str]:
        """Capability match; ties broken by lexicographically smallest id."""
        offering = sorted(sp for sp, rec in self.sp_catalog.items() if service in rec.services)
        return offering[0] if offering else None

    # -- integrity and snapshots ---------------------------------------------

    def check_referential_integrity(self) -> None:
        for rec in self.users_by_temp.values():
            if rec.bound_machine_id not in self.devices:
                raise RegistryError(
                    f"user {rec.user_id!r} bound to missing device {rec.bound_machine_id!r}"
                )
        for temp_id, rec in self.users_by_temp.items():
            if rec.temp_id != temp_id or self.users_by_id.get(rec.user_id) is not rec:
                raise RegistryError("user indexes disagree")

    def snapshot(self) -> dict:
        return {
            "devices": [
                {
                    "machine_id": r.machine_id,
                    "dmn": r.dmn,
                    "token": r.token.hex(),
                    "registered_at": r.registered_at,
                }
                for r in sorted(self.devices.values(), key=lambda r: r.machine_id)
            ],
            "users": [
                {
                    "user_id": r.user_id,
                    "temp_id": r.temp_id,
                    "bound_machine_id": r.bound_machine_id,
                    "otp_state": r.otp_state,
                    "address": r.address,
                    "p2": r.p2.hex() if r.p2 is not None else None,
                }
                for r in sorted(self.users_by_id.values(), key=lambda r: r.user_id)
            ],
            "otps": [
                {"machine_id": o.machine_id, "state": o.state}
                for o in sorted(self.pending_otps.values(), key=lambda o: o.value)
            ],
            "sessions": self.sessions.snapshot(),
            "sp_catalog": [
                {"sp_id": r.sp_id, "services": sorted(r.services)}
                for r in sorted(self.sp_catalog.values(), key=lambda r: r.sp_id)
            ],
        }


# ---------------------------------------------------------------------------
# sealed device storage
# ---------------------------------------------------------------------------


class SealedTokenStore:
    """Stands in for sealed hardware storage: the token rests encrypted under
    a per-device storage key and the raw blob never contains token bytes."""

    def __init__(self, suite: CryptoSuite, storage_key: SymKey):
        self._suite = suite
        self._key = storage_key
        self._blob: Optional[bytes] = None

    def seal(self, token: bytes) -> None:
        self._blob = self._suite.seal_blob(self._key, token)

    def unseal(self) -> bytes:
        if self._blob is None:
            raise RegistryError("no token sealed")
        return self._suite.open_blob(self._key, self._blob)

    def raw(self) -> Optional[bytes]:
        return self._blob
