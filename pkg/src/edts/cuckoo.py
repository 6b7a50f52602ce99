"""Space-efficient approximate set-membership filter with deletion support.

Partial-key cuckoo hashing: each stored item is reduced to a short
fingerprint kept in one of two candidate buckets.  The alternate bucket of a
fingerprint is reachable from either bucket through an XOR relation, so an
occupied slot can be relocated without knowing the original item.  Lookups
never produce false negatives; false positives occur when an unrelated item
maps to the same (bucket pair, fingerprint).

The filter travels inside block headers, so construction is deterministic:
identical parameters, seed, and insertion order produce bit-identical
serializations.  Eviction uses a counter-derived slot choice rather than an
RNG, and a failed insertion rolls back every displacement it made.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

from .hashing import mix64

__all__ = [
    "FilterError",
    "CapacityExceededError",
    "MalformedFilterError",
    "FilterParams",
    "CuckooFilter",
    "space_cost_bits",
    "space_cost_bytes",
    "fingerprint_bits",
    "MAX_KICKS",
]

# Displacement bound before an insert gives up and rolls back.
MAX_KICKS = 500

# Bucket geometry is fixed at 4 slots: with b slots per bucket a lookup
# probes 2b fingerprints, so the fingerprint needs log2(1/eps) + log2(2b)
# bits, and log2(2*4) = 3 matches the +3 in the per-item space bound.
BUCKET_SLOTS = 4

_MASK64 = (1 << 64) - 1
_SEED_TWEAK = 0x9E3779B97F4A7C15

_HEADER = struct.Struct("<BBBHQII")
_MAGIC = 0xCF
_VERSION = 1


class FilterError(Exception):
    """Base class for filter failures."""


class CapacityExceededError(FilterError):
    """Raised when inserting into a filter already holding `capacity` items."""


class MalformedFilterError(FilterError):
    """Raised when a serialized filter cannot be decoded."""


def space_cost_bits(epsilon: float, alpha: float) -> float:
    """Upper bound on storage per item, in bits: (log2(1/epsilon) + 3) / alpha.

    `epsilon` is the target false-positive rate, `alpha` the table load
    factor.  Returned as an exact real value, no rounding.
    """
    if not (0.0 < epsilon < 1.0):
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    return (math.log2(1.0 / epsilon) + 3.0) / alpha


def space_cost_bytes(epsilon: float, alpha: float) -> float:
    """Per-item storage bound in bytes."""
    return space_cost_bits(epsilon, alpha) / 8.0


def fingerprint_bits(epsilon: float) -> int:
    """Stored fingerprint width: ceil(log2(1/epsilon) + 3) bits."""
    if not (0.0 < epsilon < 1.0):
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    return math.ceil(math.log2(1.0 / epsilon) + 3.0)


@dataclass(frozen=True)
class FilterParams:
    """Construction parameters shared by sender and receiver.

    epsilon must be a negative power of ten (1e-1 .. 1e-18) and alpha a
    multiple of 1e-4: the wire format stores them as a one-byte decimal
    exponent and a two-byte fixed-point value, and both ends must rebuild
    the exact same table geometry from the header alone.
    """

    epsilon: float = 1e-6
    alpha: float = 0.955
    bucket_slots: int = BUCKET_SLOTS
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.bucket_slots != BUCKET_SLOTS:
            raise ValueError(
                f"bucket_slots is fixed at {BUCKET_SLOTS} (wire format and "
                f"fingerprint sizing assume it), got {self.bucket_slots}"
            )
        if not (0 <= self.seed <= _MASK64):
            raise ValueError("seed must fit in 64 bits")
        exp = self.epsilon_exponent  # validates the power-of-ten restriction
        if not (1 <= exp <= 18):
            raise ValueError(f"epsilon must be within [1e-18, 1e-1], got {self.epsilon}")
        self.alpha_fixed_point  # validates the 1e-4 grid

    @property
    def epsilon_exponent(self) -> int:
        exp = round(-math.log10(self.epsilon))
        if not math.isclose(self.epsilon, 10.0 ** -exp, rel_tol=1e-9):
            raise ValueError(
                f"epsilon must be a power of ten for serialization, got {self.epsilon}"
            )
        return exp

    @property
    def alpha_fixed_point(self) -> int:
        fp = round(self.alpha * 10_000)
        if not math.isclose(self.alpha, fp / 10_000.0, rel_tol=0, abs_tol=1e-12):
            raise ValueError(
                f"alpha must be a multiple of 1e-4 for serialization, got {self.alpha}"
            )
        return fp

    @property
    def fingerprint_bits(self) -> int:
        return fingerprint_bits(self.epsilon)


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def buckets_for_capacity(params: FilterParams, items: int) -> int:
    """Power-of-two bucket count whose capacity covers `items`."""
    if items < 0:
        raise ValueError("items must be nonnegative")
    per_bucket = BUCKET_SLOTS * params.alpha_fixed_point / 10_000.0
    nb = _next_pow2(max(1, math.ceil(max(items, 1) / per_bucket)))
    while nb * BUCKET_SLOTS * params.alpha_fixed_point // 10_000 < items:
        nb *= 2
    return nb


def serialized_size_for(params: FilterParams, items: int) -> int:
    """Byte length of a serialized filter sized for `items`, without building it."""
    nb = buckets_for_capacity(params, items)
    return _HEADER.size + (nb * BUCKET_SLOTS * params.fingerprint_bits + 7) // 8


class CuckooFilter:
    """Two-choice fingerprint table over 32-byte item ids.

    Single-writer: build it, then hand it out for concurrent read-only
    queries.  No internal locking.
    """

    __slots__ = (
        "params",
        "num_buckets",
        "capacity",
        "occupied",
        "_slots",
        "_fp_mask",
        "_index_mask",
        "_seed1",
        "_seed2",
    )

    def __init__(self, params: FilterParams, num_buckets: int):
        if num_buckets < 1 or num_buckets & (num_buckets - 1):
            # Power of two keeps the XOR alternate-bucket relation an involution.
            raise ValueError(f"num_buckets must be a power of two, got {num_buckets}")
        self.params = params
        self.num_buckets = num_buckets
        # Items admitted before the load factor would be exceeded.  Integer
        # arithmetic on the fixed-point alpha so both ends agree exactly.
        self.capacity = num_buckets * BUCKET_SLOTS * params.alpha_fixed_point // 10_000
        self.occupied = 0
        self._slots = [0] * (num_buckets * BUCKET_SLOTS)
        self._fp_mask = (1 << params.fingerprint_bits) - 1
        self._index_mask = num_buckets - 1
        self._seed1 = params.seed
        self._seed2 = (params.seed ^ _SEED_TWEAK) & _MASK64

    @classmethod
    def for_capacity(cls, params: FilterParams, items: int) -> "CuckooFilter":
        """Smallest power-of-two table whose capacity covers `items`."""
        return cls(params, buckets_for_capacity(params, items))

    # -- hashing ---------------------------------------------------------

    def _derive(self, item: bytes):
        """(fingerprint, primary index) for a 32-byte id. Deterministic per seed."""
        x = int.from_bytes(item, "little")
        x = (x ^ (x >> 61) ^ (x >> 133) ^ (x >> 197)) & _MASK64
        h1 = mix64(x ^ self._seed1)
        fp = mix64(h1 ^ self._seed2) & self._fp_mask
        if fp == 0:
            fp = 1  # zero marks an empty slot
        return fp, h1 & self._index_mask

    def _alt_index(self, index: int, fp: int) -> int:
        # Seed-independent so the relation is derivable from the stored
        # fingerprint alone; XOR over a power-of-two range is an involution.
        return (index ^ mix64(fp)) & self._index_mask

    def bucket_and_fingerprint(self, item: bytes):
        """Canonical ((low index, high index), fingerprint) placement of an id.

        Two ids with equal output are indistinguishable to the filter; the
        receiver groups its candidate transactions by this key to locate
        collisions.
        """
        fp, i1 = self._derive(item)
        i2 = self._alt_index(i1, fp)
        return ((i1, i2) if i1 <= i2 else (i2, i1)), fp

    # -- core operations --------------------------------------------------

    def insert(self, item: bytes) -> bool:
        """Store an item's fingerprint; True on success.

        Raises CapacityExceededError if the filter already holds `capacity`
        items.  Returns False when the displacement bound is exhausted; the
        table is rolled back to its prior state so earlier items keep their
        membership.  Either outcome tells the caller to stop adding.
        """
        if self.occupied >= self.capacity:
            raise CapacityExceededError(
                f"filter at capacity ({self.capacity} items)"
            )
        fp, i1 = self._derive(item)
        i2 = self._alt_index(i1, fp)
        slots = self._slots
        for idx in (i1, i2):
            base = idx * BUCKET_SLOTS
            for off in range(BUCKET_SLOTS):
                if slots[base + off] == 0:
                    slots[base + off] = fp
                    self.occupied += 1
                    return True

        # Both buckets full: displace residents until a hole appears.  The
        # walk is driven by a mixed counter instead of an RNG so rebuilding
        # the filter from the same insertion sequence is bit-identical.
        walk = mix64(fp ^ (i1 << 20) ^ self._seed1)
        idx = i2 if walk & 1 else i1
        trail = []
        for _ in range(MAX_KICKS):
            walk = mix64(walk)
            pos = idx * BUCKET_SLOTS + (walk & 3)
            trail.append(pos)
            slots[pos], fp = fp, slots[pos]
            idx = self._alt_index(idx, fp)
            base = idx * BUCKET_SLOTS
            for off in range(BUCKET_SLOTS):
                if slots[base + off] == 0:
                    slots[base + off] = fp
                    self.occupied += 1
                    return True
        # Undo every swap so no previously stored item loses membership.
        for pos in reversed(trail):
            slots[pos], fp = fp, slots[pos]
        return False

    def contains(self, item: bytes) -> bool:
        fp, i1 = self._derive(item)
        slots = self._slots
        base = i1 * BUCKET_SLOTS
        if (
            slots[base] == fp
            or slots[base + 1] == fp
            or slots[base + 2] == fp
            or slots[base + 3] == fp
        ):
            return True
        base = self._alt_index(i1, fp) * BUCKET_SLOTS
        return (
            slots[base] == fp
            or slots[base + 1] == fp
            or slots[base + 2] == fp
            or slots[base + 3] == fp
        )

    __contains__ = contains

    def lookup(self, item: bytes):
        """Membership plus placement in one derivation.

        Returns ((low index, high index), fingerprint) when the item tests
        positive, else None.  Receivers use this to filter a mempool and
        collect collision-group keys in a single pass.
        """
        fp, i1 = self._derive(item)
        i2 = self._alt_index(i1, fp)
        slots = self._slots
        base = i1 * BUCKET_SLOTS
        hit = (
            slots[base] == fp
            or slots[base + 1] == fp
            or slots[base + 2] == fp
            or slots[base + 3] == fp
        )
        if not hit:
            base = i2 * BUCKET_SLOTS
            hit = (
                slots[base] == fp
                or slots[base + 1] == fp
                or slots[base + 2] == fp
                or slots[base + 3] == fp
            )
        if not hit:
            return None
        return ((i1, i2) if i1 <= i2 else (i2, i1)), fp

    def delete(self, item: bytes) -> bool:
        """Remove one stored fingerprint matching the item; True if found."""
        fp, i1 = self._derive(item)
        slots = self._slots
        for idx in (i1, self._alt_index(i1, fp)):
            base = idx * BUCKET_SLOTS
            for off in range(BUCKET_SLOTS):
                if slots[base + off] == fp:
                    slots[base + off] = 0
                    self.occupied -= 1
                    return True
        return False

    # -- serialization ----------------------------------------------------
    #
    # Layout, little-endian throughout:
    #   magic (1) | version (1) | epsilon exponent (1) | alpha fixed-point (2)
    #   | seed (8) | bucket count (4) | item count (4)
    #   | fingerprint array, bit-packed LSB-first
    # 21 bytes of header overhead.

    HEADER_SIZE = _HEADER.size

    def serialize(self) -> bytes:
        p = self.params
        out = bytearray(
            _HEADER.pack(
                _MAGIC,
                _VERSION,
                p.epsilon_exponent,
                p.alpha_fixed_point,
                p.seed,
                self.num_buckets,
                self.occupied,
            )
        )
        width = p.fingerprint_bits
        acc = 0
        nbits = 0
        append = out.append
        for fp in self._slots:
            acc |= fp << nbits
            nbits += width
            while nbits >= 8:
                append(acc & 0xFF)
                acc >>= 8
                nbits -= 8
        if nbits:
            append(acc & 0xFF)
        return bytes(out)

    @classmethod
    def deserialize(cls, data: bytes) -> "CuckooFilter":
        if len(data) < _HEADER.size:
            raise MalformedFilterError("filter blob shorter than header")
        magic, version, eps_exp, alpha_fp, seed, nb, count = _HEADER.unpack_from(data)
        if magic != _MAGIC:
            raise MalformedFilterError(f"bad magic byte 0x{magic:02x}")
        if version != _VERSION:
            raise MalformedFilterError(f"unsupported filter version {version}")
        if not (1 <= eps_exp <= 18) or not (0 < alpha_fp <= 10_000):
            raise MalformedFilterError("parameter fields out of range")
        if nb < 1 or nb & (nb - 1):
            raise MalformedFilterError(f"bucket count {nb} not a power of two")
        params = FilterParams(
            epsilon=10.0 ** -eps_exp, alpha=alpha_fp / 10_000.0, seed=seed
        )
        width = params.fingerprint_bits
        total_slots = nb * BUCKET_SLOTS
        expected = _HEADER.size + (total_slots * width + 7) // 8
        if len(data) != expected:
            raise MalformedFilterError(
                f"filter blob is {len(data)} bytes, expected {expected}"
            )
        flt = cls(params, nb)
        slots = flt._slots
        mask = (1 << width) - 1
        acc = 0
        nbits = 0
        pos = _HEADER.size
        stored = 0
        for i in range(total_slots):
            while nbits < width:
                acc |= data[pos] << nbits
                pos += 1
                nbits += 8
            fp = acc & mask
            acc >>= width
            nbits -= width
            if fp:
                slots[i] = fp
                stored += 1
        if stored != count:
            raise MalformedFilterError(
                f"header claims {count} items but {stored} fingerprints stored"
            )
        flt.occupied = count
        return flt

    @property
    def serialized_size(self) -> int:
        width = self.params.fingerprint_bits
        return _HEADER.size + (self.num_buckets * BUCKET_SLOTS * width + 7) // 8

    def __len__(self) -> int:
        return self.occupied
