"""Brute-force derivability oracle, kept independent of the verifier.

Same question as the verifier's closure ("which byte strings can an observer
compute from this base set?"), answered the slow way: repeatedly try every
expansion on every known term until nothing new appears.  No worklist, no
key index, and deliberately no imports from the verifier; the byte-level
contracts (length prefixes, the ciphertext record layout, the nonce-to-key
derivation) are restated here from scratch so a drift in either
implementation shows up as a disagreement in tests.
"""

from __future__ import annotations

import hashlib
import hmac
import struct

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

# the serialization contract, restated independently
_MAGIC = b"SCT1"
_MODE_OPAQUE_B = 0x01
_MODE_TRANSPARENT_B = 0x02
_ALG_ASYM = 0x01
_ALG_SYM = 0x02
_FP_LABEL = b"stwa:key-fp:v1"
_NONCE_KEY_LABEL = b"stwa:nonce-key:v1"
_CLEAR_TAG_LABEL = b"stwa:clear-tag:v1"
_KNOWN_TAGS = frozenset(
    [0x01, 0x02, 0x03, 0x11, 0x12, 0x13, 0x14,
     0x21, 0x22, 0x23, 0x24, 0x25, 0x26,
     0x31, 0x32, 0x33, 0x34, 0x35, 0x36, 0x41]
)


def _fingerprint(key: bytes) -> str:
    return hashlib.sha256(_FP_LABEL + key).hexdigest()[:16]


def _nonce_key(nonce: bytes) -> bytes:
    return hmac.new(nonce, _NONCE_KEY_LABEL, hashlib.sha256).digest()


def _split_lp(block: bytes):
    """Split concatenated 4-byte-length-prefixed fields; None if malformed."""
    fields, off = [], 0
    while off < len(block):
        if off + 4 > len(block):
            return None
        (n,) = struct.unpack_from(">I", block, off)
        off += 4
        if off + n > len(block):
            return None
        fields.append(block[off:off + n])
        off += n
    return fields or None


def _parse_record(blob: bytes):
    """(mode_byte, alg, key_ref, body, check) or None."""
    if len(blob) < 6 or blob[:4] != _MAGIC:
        return None
    mode_b, alg = blob[4], blob[5]
    if mode_b not in (_MODE_OPAQUE_B, _MODE_TRANSPARENT_B):
        return None
    if alg not in (_ALG_ASYM, _ALG_SYM):
        return None
    parts, off = [], 6
    for _ in range(3):
        if off + 4 > len(blob):
            return None
        (n,) = struct.unpack_from(">I", blob, off)
        off += 4
        if off + n > len(blob):
            return None
        parts.append(blob[off:off + n])
        off += n
    if off != len(blob):
        return None
    try:
        key_ref = parts[0].decode()
    except UnicodeDecodeError:
        return None
    return mode_b, alg, key_ref, parts[1], parts[2]


def _clear_tag(mode_b: int, alg: int, key_ref: str, plaintext: bytes) -> bytes:
    material = bytes([mode_b, alg]) + key_ref.encode() + b"|" + plaintext
    return hashlib.sha256(_CLEAR_TAG_LABEL + material).digest()[:16]


def _open_with(blob_parts, key: bytes):
    """Try one symmetric key against one parsed record; plaintext or None."""
    mode_b, alg, key_ref, body, check = blob_parts
    if alg != _ALG_SYM or _fingerprint(key) != key_ref:
        return None
    if mode_b == _MODE_TRANSPARENT_B:
        if check != _clear_tag(mode_b, alg, key_ref, body):
            return None
        return body
    if len(body) < 12 + 16:
        return None
    aad = _MAGIC + bytes([_MODE_OPAQUE_B, alg]) + key_ref.encode()
    try:
        return AESGCM(key).decrypt(body[:12], body[12:], aad)
    except InvalidTag:
        return None


def brute_force_closure(base, priv_ids=frozenset(), max_rounds: int = 64) -> set[bytes]:
    """Saturate by exhaustive generate-and-test sweeps."""
    known: set[bytes] = {bytes(t) for t in base}
    for _ in range(max_rounds):
        new: set[bytes] = set()

        for term in known:
            # wire message: drop the tag byte, then split the field block
            if term and term[0] in _KNOWN_TAGS:
                fields = _split_lp(term[1:])
                if fields:
                    new.update(fields)
            fields = _split_lp(term)
            if fields:
                new.update(fields)
            if len(term) == 16:
                new.add(_nonce_key(term))

        records = [(t, _parse_record(t)) for t in known]
        keys = [t for t in known if len(t) == 32]
        for blob, parts in records:
            if parts is None:
                continue
            mode_b, alg, key_ref, body, check = parts
            if alg == _ALG_ASYM:
                if key_ref in priv_ids and mode_b == _MODE_TRANSPARENT_B:
                    new.add(body)
                continue
            for key in keys:
                plain = _open_with(parts, key)
                if plain is not None:
                    new.add(plain)
                    break

        if new <= known:
            return known
        known |= new
    raise RuntimeError("closure did not stabilize within the round budget")
