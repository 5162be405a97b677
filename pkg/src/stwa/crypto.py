"""Cryptographic suite for the authentication protocol simulator.

Two interchangeable modes sit behind one interface:

* ``opaque``      — real encryption: X25519 hybrid wrapping for public-key
                    operations, AES-GCM for symmetric ones.  Ciphertexts are
                    genuinely unreadable without the key.
* ``transparent`` — ciphertexts are structured, inspectable records carrying
                    the plaintext plus a key reference and an integrity tag.
                    The trace verifier relies on this mode to compute exact
                    knowledge closures.

Both modes serialize to self-describing byte blobs (magic header ``SCT1``),
so the network layer and the wire codec treat them identically, and both make
the same accept/reject decisions on the same inputs.

All encryption here is deterministic per (key, plaintext): ephemeral scalars
and AEAD nonces are derived from the inputs rather than drawn fresh.  That is
deliberate — the simulator promises byte-identical transcripts for equal
seeds — and acceptable only because this is a simulation artifact, not a
production library (equal plaintexts under one key produce equal ciphertexts).
"""

from __future__ import annotations

import hashlib
import hmac
import re
import struct
from dataclasses import dataclass, field
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

MODE_OPAQUE = "opaque"
MODE_TRANSPARENT = "transparent"

HASH_ALGS = {
    "sha2-256": hashlib.sha256,
    "legacy-md5": hashlib.md5,
    "legacy-sha1": hashlib.sha1,
}

NONCE_LEN = 16
SYM_KEY_LEN = 32
RELAY_SECRET_LEN = 16

OTP_RE = re.compile(r"^[0-9]{8}$")
TEMP_ID_RE = re.compile(r"^TID-[0-9a-f]{16}$")

# Domain-separation labels.  Fixed for the life of the wire format.
_DS_KEYGEN = b"stwa:keygen:v1"
_DS_NONCE_KEY = b"stwa:nonce-key:v1"
_DS_KEY_FP = b"stwa:key-fp:v1"
_DS_ECIES_EPH = b"stwa:ecies-eph:v1"
_DS_ECIES_KEK = b"stwa:ecies-kek:v1"
_DS_GCM_NONCE = b"stwa:gcm-nonce:v1"
_DS_CLEAR_TAG = b"stwa:clear-tag:v1"

_CIPHER_MAGIC = b"SCT1"
_ALG_ASYM = 0x01
_ALG_SYM = 0x02
_MODE_BYTE = {MODE_OPAQUE: 0x01, MODE_TRANSPARENT: 0x02}
_BYTE_MODE = {v: k for k, v in _MODE_BYTE.items()}


class CryptoError(Exception):
    """Base class for everything this module raises."""


class DecryptionError(CryptoError):
    """Wrong key for this ciphertext (key reference does not match)."""


class TamperError(CryptoError):
    """Ciphertext failed authentication: bytes were altered."""


class CiphertextFormatError(CryptoError):
    """Blob does not parse as a ciphertext record."""


class FreshnessError(CryptoError):
    """A freshly generated value collided with an earlier one this run."""


# ---------------------------------------------------------------------------
# key and nonce value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PublicKey:
    key_id: str
    raw: bytes


@dataclass(frozen=True)
class PrivateKey:
    key_id: str
    raw: bytes


@dataclass(frozen=True)
class AsymKeyPair:
    public: PublicKey
    private: PrivateKey


@dataclass(frozen=True)
class SymKey:
    value: bytes
    origin: str = "session"  # "nonce-derived" | "session" | "storage"

    def __post_init__(self):
        if len(self.value) != SYM_KEY_LEN:
            raise CryptoError(f"symmetric key must be {SYM_KEY_LEN} bytes")


@dataclass(frozen=True)
class Nonce:
    value: bytes
    owner: str

    def __post_init__(self):
        if len(self.value) != NONCE_LEN:
            raise CryptoError(f"nonce must be {NONCE_LEN} bytes")


def key_fingerprint(key_bytes: bytes) -> str:
    """Public, stable reference for a symmetric key (16 hex chars).

    Knowing the fingerprint reveals nothing about the key; it only lets a
    holder of candidate key bytes test whether they match a ciphertext.
    """
    return hashlib.sha256(_DS_KEY_FP + key_bytes).hexdigest()[:16]


# ---------------------------------------------------------------------------
# ciphertext record
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ciphertext:
    """Serialized layout:

    magic(4) | mode(1) | alg(1) | len(key_ref) key_ref | len(body) body | len(check) check

    opaque asym body:  ephemeral pub (32) || gcm nonce (12) || gcm ciphertext
    opaque sym body:   gcm nonce (12) || gcm ciphertext
    transparent body:  the plaintext itself; check carries the integrity tag
    """

    mode: str
    alg: int
    key_ref: str
    body: bytes
    check: bytes = b""

    def to_bytes(self) -> bytes:
        ref = self.key_ref.encode()
        return (
            _CIPHER_MAGIC
            + bytes([_MODE_BYTE[self.mode], self.alg])
            + struct.pack(">I", len(ref))
            + ref
            + struct.pack(">I", len(self.body))
            + self.body
            + struct.pack(">I", len(self.check))
            + self.check
        )

    @staticmethod
    def parse(blob: bytes) -> "Ciphertext":
        if len(blob) < 6 or blob[:4] != _CIPHER_MAGIC:
            raise CiphertextFormatError("missing ciphertext magic")
        mode_b, alg = blob[4], blob[5]
        if mode_b not in _BYTE_MODE:
            raise CiphertextFormatError(f"unknown mode byte {mode_b:#x}")
        if alg not in (_ALG_ASYM, _ALG_SYM):
            raise CiphertextFormatError(f"unknown alg byte {alg:#x}")
        off = 6
        parts = []
        for _ in range(3):
            if off + 4 > len(blob):
                raise CiphertextFormatError("truncated ciphertext record")
            (n,) = struct.unpack_from(">I", blob, off)
            off += 4
            if off + n > len(blob):
                raise CiphertextFormatError("truncated ciphertext record")
            parts.append(blob[off : off + n])
            off += n
        if off != len(blob):
            raise CiphertextFormatError("trailing bytes after ciphertext record")
        try:
            key_ref = parts[0].decode()
        except UnicodeDecodeError as exc:
            raise CiphertextFormatError("key_ref is not utf-8") from exc
        return Ciphertext(_BYTE_MODE[mode_b], alg, key_ref, parts[1], parts[2])


def is_ciphertext(blob: bytes) -> bool:
    return len(blob) >= 4 and blob[:4] == _CIPHER_MAGIC


def _clear_tag(mode: str, alg: int, key_ref: str, plaintext: bytes) -> bytes:
    material = bytes([_MODE_BYTE[mode], alg]) + key_ref.encode() + b"|" + plaintext
    return hashlib.sha256(_DS_CLEAR_TAG + material).digest()[:16]


# ---------------------------------------------------------------------------
# freshness bookkeeping
# ---------------------------------------------------------------------------


class FreshnessRegistry:
    """Remembers every fresh value drawn in a run; repeats are a hard error.

    The protocol's guarantees lean on nonces, keys, OTPs, and temp ids never
    repeating inside one simulation, so the suite enforces it rather than
    trusting 128-bit luck silently.
    """

    def __init__(self):
        self._seen: dict[str, set] = {}

    def record(self, kind: str, value) -> None:
        bucket = self._seen.setdefault(kind, set())
        if value in bucket:
            raise FreshnessError(f"duplicate fresh {kind}: {value!r}")
        bucket.add(value)


# ---------------------------------------------------------------------------
# the suite
# ---------------------------------------------------------------------------


@dataclass
class CryptoConfig:
    hash_alg: str = "sha2-256"
    mode: str = MODE_OPAQUE

    def __post_init__(self):
        if self.hash_alg not in HASH_ALGS:
            raise CryptoError(f"unknown hash-alg {self.hash_alg!r}")
        if self.mode not in (MODE_OPAQUE, MODE_TRANSPARENT):
            raise CryptoError(f"unknown crypto-mode {self.mode!r}")


class CryptoSuite:
    """All primitive operations the protocol actors use, mode-switched."""

    def __init__(self, config: Optional[CryptoConfig] = None):
        self.config = config or CryptoConfig()
        self.freshness = FreshnessRegistry()

    # -- hashing ------------------------------------------------------------

    @property
    def digest_size(self) -> int:
        return HASH_ALGS[self.config.hash_alg]().digest_size

    def hash(self, data: bytes) -> bytes:
        return HASH_ALGS[self.config.hash_alg](data).digest()

    # -- key generation -----------------------------------------------------

    def generate_keypair(self, seed: int, key_id: str) -> AsymKeyPair:
        """Deterministic X25519 pair: one (seed, key_id) -> one keypair."""
        scalar = hashlib.sha256(
            _DS_KEYGEN + struct.pack(">Q", seed & 0xFFFFFFFFFFFFFFFF) + key_id.encode()
        ).digest()
        priv = X25519PrivateKey.from_private_bytes(scalar)
        pub_raw = priv.public_key().public_bytes_raw()
        return AsymKeyPair(
            public=PublicKey(key_id, pub_raw),
            private=PrivateKey(key_id, scalar),
        )

    def nonce_key(self, nonce) -> SymKey:
        """Public derivation nonce -> symmetric key (keyed hash, fixed label).

        Anyone holding the nonce bytes can compute the key; the security of
        every E_N(...) message therefore rests on the nonce having traveled
        only under public-key encryption.
        """
        raw = nonce.value if isinstance(nonce, Nonce) else bytes(nonce)
        if len(raw) != NONCE_LEN:
            raise CryptoError(f"nonce must be {NONCE_LEN} bytes")
        return SymKey(hmac.new(raw, _DS_NONCE_KEY, hashlib.sha256).digest(), "nonce-derived")

    # -- fresh values (all drawn from a caller-owned seeded rng) ------------

    def fresh_nonce(self, rng, owner: str) -> Nonce:
        value = rng.randbytes(NONCE_LEN)
        self.freshness.record("nonce", value)
        return Nonce(value, owner)

    def fresh_session_key(self, rng) -> SymKey:
        value = rng.randbytes(SYM_KEY_LEN)
        self.freshness.record("session-key", value)
        return SymKey(value, "session")

    def fresh_storage_key(self, rng) -> SymKey:
        value = rng.randbytes(SYM_KEY_LEN)
        self.freshness.record("storage-key", value)
        return SymKey(value, "storage")

    def fresh_relay_secret(self, rng) -> bytes:
        value = rng.randbytes(RELAY_SECRET_LEN)
        self.freshness.record("relay-secret", value)
        return value

    def fresh_otp(self, rng) -> str:
        value = "%08d" % rng.randrange(10**8)
        self.freshness.record("otp", value)
        return value

    def fresh_temp_id(self, rng) -> str:
        value = "TID-" + rng.randbytes(8).hex()
        self.freshness.record("temp-id", value)
        return value

    # -- public-key encryption ----------------------------------------------

    def pk_encrypt(self, pk: PublicKey, plaintext: bytes) -> Ciphertext:
        if self.config.mode == MODE_TRANSPARENT:
            check = _clear_tag(MODE_TRANSPARENT, _ALG_ASYM, pk.key_id, plaintext)
            return Ciphertext(MODE_TRANSPARENT, _ALG_ASYM, pk.key_id, plaintext, check)
        # Derandomized hybrid: ephemeral scalar from (recipient, message).
        eph_scalar = hashlib.sha256(_DS_ECIES_EPH + pk.raw + plaintext).digest()
        eph_priv = X25519PrivateKey.from_private_bytes(eph_scalar)
        eph_pub = eph_priv.public_key().public_bytes_raw()
        shared = eph_priv.exchange(X25519PublicKey.from_public_bytes(pk.raw))
        kek = hashlib.sha256(_DS_ECIES_KEK + shared + eph_pub + pk.raw).digest()
        nonce12 = hashlib.sha256(_DS_GCM_NONCE + kek + plaintext).digest()[:12]
        aad = _CIPHER_MAGIC + bytes([_MODE_BYTE[MODE_OPAQUE], _ALG_ASYM]) + pk.key_id.encode()
        sealed = AESGCM(kek).encrypt(nonce12, plaintext, aad)
        return Ciphertext(MODE_OPAQUE, _ALG_ASYM, pk.key_id, eph_pub + nonce12 + sealed)

    def pk_decrypt(self, priv: PrivateKey, ct) -> bytes:
        ct = self._coerce(ct, _ALG_ASYM)
        if ct.key_ref != priv.key_id:
            raise DecryptionError(
                f"ciphertext is for key {ct.key_ref!r}, not {priv.key_id!r}"
            )
        if ct.mode == MODE_TRANSPARENT:
            if ct.check != _clear_tag(ct.mode, ct.alg, ct.key_ref, ct.body):
                raise TamperError("transparent record integrity tag mismatch")
            return ct.body
        if len(ct.body) < 32 + 12 + 16:
            raise CiphertextFormatError("opaque asym body too short")
        eph_pub, nonce12, sealed = ct.body[:32], ct.body[32:44], ct.body[44:]
        shared = X25519PrivateKey.from_private_bytes(priv.raw).exchange(
            X25519PublicKey.from_public_bytes(eph_pub)
        )
        own_pub = X25519PrivateKey.from_private_bytes(priv.raw).public_key().public_bytes_raw()
        kek = hashlib.sha256(_DS_ECIES_KEK + shared + eph_pub + own_pub).digest()
        aad = _CIPHER_MAGIC + bytes([_MODE_BYTE[MODE_OPAQUE], _ALG_ASYM]) + ct.key_ref.encode()
        try:
            return AESGCM(kek).decrypt(nonce12, sealed, aad)
        except InvalidTag as exc:
            raise TamperError("opaque asym ciphertext failed authentication") from exc

    # -- symmetric encryption -----------------------------------------------

    def sym_encrypt(self, key: SymKey, plaintext: bytes) -> Ciphertext:
        ref = key_fingerprint(key.value)
        if self.config.mode == MODE_TRANSPARENT:
            check = _clear_tag(MODE_TRANSPARENT, _ALG_SYM, ref, plaintext)
            return Ciphertext(MODE_TRANSPARENT, _ALG_SYM, ref, plaintext, check)
        return self._aead_seal(key, ref, plaintext)

    def sym_decrypt(self, key: SymKey, ct) -> bytes:
        ct = self._coerce(ct, _ALG_SYM)
        ref = key_fingerprint(key.value)
        if ct.key_ref != ref:
            raise DecryptionError("ciphertext was made under a different symmetric key")
        if ct.mode == MODE_TRANSPARENT:
            if ct.check != _clear_tag(ct.mode, ct.alg, ct.key_ref, ct.body):
                raise TamperError("transparent record integrity tag mismatch")
            return ct.body
        return self._aead_open(key, ct)

    # -- device-local sealing (always opaque, regardless of run mode) -------

    def seal_blob(self, key: SymKey, data: bytes) -> bytes:
        """Seal for local storage.  Never transparent: raw storage must not
        contain the plaintext even in transparent simulation runs."""
        return self._aead_seal(key, key_fingerprint(key.value), data).to_bytes()

    def open_blob(self, key: SymKey, blob: bytes) -> bytes:
        ct = Ciphertext.parse(blob)
        if ct.key_ref != key_fingerprint(key.value):
            raise DecryptionError("sealed blob was made under a different storage key")
        return self._aead_open(key, ct)

    # -- helpers ------------------------------------------------------------

    def _aead_seal(self, key: SymKey, ref: str, plaintext: bytes) -> Ciphertext:
        nonce12 = hashlib.sha256(_DS_GCM_NONCE + key.value + plaintext).digest()[:12]
        aad = _CIPHER_MAGIC + bytes([_MODE_BYTE[MODE_OPAQUE], _ALG_SYM]) + ref.encode()
        sealed = AESGCM(key.value).encrypt(nonce12, plaintext, aad)
        return Ciphertext(MODE_OPAQUE, _ALG_SYM, ref, nonce12 + sealed)

    def _aead_open(self, key: SymKey, ct: Ciphertext) -> bytes:
        if len(ct.body) < 12 + 16:
            raise CiphertextFormatError("opaque sym body too short")
        nonce12, sealed = ct.body[:12], ct.body[12:]
        aad = _CIPHER_MAGIC + bytes([_MODE_BYTE[MODE_OPAQUE], _ALG_SYM]) + ct.key_ref.encode()
        try:
            return AESGCM(key.value).decrypt(nonce12, sealed, aad)
        except InvalidTag as exc:
            raise TamperError("opaque sym ciphertext failed authentication") from exc

    def _coerce(self, ct, expect_alg: int) -> Ciphertext:
        if isinstance(ct, (bytes, bytearray)):
            ct = Ciphertext.parse(bytes(ct))
        if ct.alg != expect_alg:
            raise CiphertextFormatError("ciphertext algorithm does not match operation")
        if ct.mode != self.config.mode:
            raise CiphertextFormatError(
                f"ciphertext mode {ct.mode!r} does not match suite mode {self.config.mode!r}"
            )
        return ct
