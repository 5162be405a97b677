"""Wire message catalog and canonical byte codec.

Every protocol message is a frozen dataclass registered under a one-byte tag.
Canonical encoding: the tag byte, then every field in declared order, each as
a 4-byte big-endian length prefix followed by the raw bytes.  String fields
are UTF-8.  Decoding is strict: unknown tag, short input, and trailing bytes
are each distinct errors, and a decoded message re-encodes to the same bytes.

Messages whose whole body travels encrypted (SEALED is not None) are carried
on the wire as ``tag || lp(ciphertext)``; the ciphertext's plaintext is the
field block (everything after the tag) of the canonical form.  Messages with
SEALED None are carried in canonical form directly; some of their fields are
themselves serialized ciphertext blobs, treated here as opaque bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields as dc_fields
from typing import ClassVar, Optional

LENGTH_PREFIX = 4


class CodecError(Exception):
    pass


class UnknownTagError(CodecError):
    pass


class TruncationError(CodecError):
    pass


class TrailingGarbageError(CodecError):
    pass


def lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def read_lp(data: bytes, offset: int) -> tuple[bytes, int]:
    if offset + LENGTH_PREFIX > len(data):
        raise TruncationError(f"length prefix runs past end at offset {offset}")
    (n,) = struct.unpack_from(">I", data, offset)
    offset += LENGTH_PREFIX
    if offset + n > len(data):
        raise TruncationError(f"field of {n} bytes runs past end at offset {offset}")
    return data[offset : offset + n], offset + n


def split_fields(block: bytes) -> list[bytes]:
    """Split a bare field block (no tag byte) into raw field values."""
    out, offset = [], 0
    while offset < len(block):
        value, offset = read_lp(block, offset)
        out.append(value)
    return out


REGISTRY: dict[int, type] = {}


@dataclass(frozen=True)
class Message:
    TAG: ClassVar[int]
    SEALED: ClassVar[Optional[str]] = None  # key hint: who can open the body

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        if cls.TAG in REGISTRY:
            raise ValueError(f"duplicate message tag {cls.TAG:#x}")
        REGISTRY[cls.TAG] = cls

    def field_block(self) -> bytes:
        out = b""
        for f in dc_fields(self):
            value = getattr(self, f.name)
            out += lp(value.encode() if f.type in ("str", str) else value)
        return out


# -- initialization: manufacturer registers a machine, KDC mints its token --


@dataclass(frozen=True)
class InitRegister(Message):
    machine_id: str
    dmn: str
    nonce: bytes
    maker_id: str
    TAG = 0x01
    SEALED = "kdc"


@dataclass(frozen=True)
class InitToken(Message):
    token: bytes
    TAG = 0x02
    SEALED = "maker-nonce"


@dataclass(frozen=True)
class InitRecord(Message):
    machine_id: str
    dmn: str
    token: bytes
    TAG = 0x03
    SEALED = "cks"


# -- user registration ------------------------------------------------------


@dataclass(frozen=True)
class RegDeviceAuth(Message):
    machine_id: str
    token: bytes
    nonce: bytes
    TAG = 0x11
    SEALED = "cks"


@dataclass(frozen=True)
class RegDeviceAck(Message):
    device_ack: bytes
    otp: str
    TAG = 0x12
    SEALED = "user-nonce"


@dataclass(frozen=True)
class RegUser(Message):
    user_id: str
    otp: str
    nonce: bytes
    TAG = 0x13
    SEALED = "cks"


@dataclass(frozen=True)
class RegUserAck(Message):
    user_ack: bytes
    temp_id: str
    TAG = 0x14
    SEALED = "user-nonce"


# -- connection between two users ------------------------------------------


@dataclass(frozen=True)
class ConnRequest(Message):
    target_id: str
    token: bytes
    nonce: bytes
    temp_id: str
    TAG = 0x21
    SEALED = "cks"


@dataclass(frozen=True)
class ConnNotify(Message):
    # deliberately plaintext on the wire; the verifier reports the leak
    callee_id: str
    caller_id: str
    TAG = 0x22


@dataclass(frozen=True)
class ConnRespond(Message):
    token: bytes
    nonce: bytes
    TAG = 0x23
    SEALED = "cks"


@dataclass(frozen=True)
class ConnKeyA(Message):
    key: bytes
    TAG = 0x24
    SEALED = "caller-nonce"


@dataclass(frozen=True)
class ConnKeyB(Message):
    key: bytes
    TAG = 0x25
    SEALED = "callee-nonce"


@dataclass(frozen=True)
class ConnReject(Message):
    reason: str
    TAG = 0x26


# -- high-level transaction with a service provider ------------------------


@dataclass(frozen=True)
class SvcRequest(Message):
    service: str
    passphrase: bytes
    token: bytes
    nonce: bytes
    temp_id: str
    TAG = 0x31
    SEALED = "cks"


@dataclass(frozen=True)
class SvcGrantUser(Message):
    key: bytes
    sealed_pass: bytes  # ciphertext blob only the CKS itself can open
    provider_id: str
    passphrase: bytes
    TAG = 0x32
    SEALED = "user-nonce"


@dataclass(frozen=True)
class SvcTicket(Message):
    provider_id: str
    sealed_pass: bytes
    TAG = 0x33


@dataclass(frozen=True)
class SvcVerify(Message):
    sealed_pass: bytes
    cks_part: bytes  # ciphertext blob: provider nonce + ticket sender id
    TAG = 0x34


@dataclass(frozen=True)
class SvcConfirm(Message):
    user_part: bytes
    provider_part: bytes
    TAG = 0x35


@dataclass(frozen=True)
class SvcForward(Message):
    user_part: bytes
    TAG = 0x36


# -- application data under an established session key ---------------------


@dataclass(frozen=True)
class AppData(Message):
    body: bytes  # ciphertext blob under the session key
    TAG = 0x41


ALL_TAGS = tuple(sorted(REGISTRY))


# -- codec ------------------------------------------------------------------


def encode(msg: Message) -> bytes:
    """Canonical plaintext form: tag byte + length-prefixed fields."""
    return bytes([msg.TAG]) + msg.field_block()


def decode(data: bytes) -> Message:
    if len(data) == 0:
        raise TruncationError("empty input")
    cls = REGISTRY.get(data[0])
    if cls is None:
        raise UnknownTagError(f"unknown message tag {data[0]:#04x}")
    return from_field_block(cls, data[1:])


def from_field_block(cls: type, block: bytes) -> Message:
    specs = dc_fields(cls)
    values, offset = [], 0
    for f in specs:
        raw, offset = read_lp(block, offset)
        if f.type in ("str", str):
            try:
                values.append(raw.decode())
            except UnicodeDecodeError as exc:
                raise CodecError(f"field {f.name!r} is not valid utf-8") from exc
        else:
            values.append(raw)
    if offset != len(block):
        raise TrailingGarbageError(f"{len(block) - offset} trailing bytes after last field")
    return cls(*values)


def peek_tag(data: bytes) -> int:
    if len(data) == 0:
        raise TruncationError("empty input")
    return data[0]


def seal_payload(tag: int, ciphertext: bytes) -> bytes:
    """Wire form of a sealed-body message: tag + one length-prefixed blob."""
    return bytes([tag]) + lp(ciphertext)


def open_sealed_payload(data: bytes) -> tuple[type, bytes]:
    if len(data) == 0:
        raise TruncationError("empty input")
    cls = REGISTRY.get(data[0])
    if cls is None:
        raise UnknownTagError(f"unknown message tag {data[0]:#04x}")
    if cls.SEALED is None:
        raise CodecError(f"{cls.__name__} does not travel sealed")
    blob, offset = read_lp(data, 1)
    if offset != len(data):
        raise TrailingGarbageError("trailing bytes after sealed body")
    return cls, blob


# -- frames -----------------------------------------------------------------

CHANNEL_OPEN = "open"
CHANNEL_SECURE = "secure"


@dataclass(frozen=True)
class Frame:
    """One network delivery.  ``seq`` is assigned by the network at submit
    time and is strictly increasing per run; ``channel`` is ``secure`` only
    for the token handoff back to the manufacturer."""

    seq: int
    sender: str
    recipient: str
    channel: str
    payload: bytes
    origin: str = "honest"  # "honest" | "adversary"


def random_message(tag: int, rng) -> Message:
    """Random well-formed instance of the given tag, for round-trip tests."""
    cls = REGISTRY[tag]
    values = []
    for f in dc_fields(cls):
        if f.type in ("str", str):
            n = rng.randrange(0, 24)
            values.append("".join(chr(rng.randrange(0x20, 0x7F)) for _ in range(n)))
        else:
            values.append(rng.randbytes(rng.randrange(0, 96)))
    return cls(*values)
