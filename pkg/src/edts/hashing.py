"""Hash helpers shared by transaction ids, Merkle trees, and seed derivation."""

from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1


def double_sha256(data: bytes) -> bytes:
    """SHA256 applied twice; the 32-byte id scheme for transactions and blocks."""
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


def mix64(x: int) -> int:
    """Finalizer-style 64-bit mix (splitmix64 constants). Not cryptographic."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_u64(*parts) -> int:
    """Stable 64-bit value from a tuple of ints/strings/bytes.

    Used to fan one user-facing seed out into independent streams (per
    generation, per evaluation, per purpose) so that replaying any stage in
    isolation reproduces the original numbers.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bytes):
            h.update(b"b" + part)
        elif isinstance(part, str):
            h.update(b"s" + part.encode("utf-8"))
        elif isinstance(part, int):
            h.update(b"i" + part.to_bytes(16, "little", signed=True))
        else:
            raise TypeError(f"unsupported seed part: {type(part).__name__}")
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")
