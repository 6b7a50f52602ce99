"""Dynamic transaction storage: fee-driven leaf-space allocation and selection.

A transaction's fee buys Merkle-leaf space through a lognormal CDF: richer
transactions occupy more of the block's leaf budget, so high-fee blocks carry
fewer transactions and stay small on the wire.  Nine strategy attributes
(a1..a9) steer how much space a fee buys and in what order the mempool is
drained.

All selection functions are pure over immutable snapshots; mempool mutation
happens single-threaded inside the simulator event loop.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import erf as _erf

from .hashing import double_sha256

__all__ = [
    "Priority",
    "Transaction",
    "DtsAttributes",
    "Mempool",
    "lognormal_cdf",
    "lognormal_cdf_array",
    "leaf_space",
    "leaf_space_from_fee",
    "leaf_space_array",
    "select_transactions",
]

_SQRT2 = math.sqrt(2.0)

# Fixed-size field prefix of a serialized transaction body; the rest of
# size_bytes is zero padding standing in for script/payload data.
_TX_FIELDS = struct.Struct("<IddIQQ")
TX_FIELDS_SIZE = _TX_FIELDS.size  # 40 bytes


class Priority(Enum):
    """Incorporation order: first-come-first-served or highest fee first."""

    TIME_BASED = "time-based"
    FEE_BASED = "fee-based"

    @classmethod
    def parse(cls, value) -> "Priority":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().replace("_", "-")
        if text in ("time-based", "time", "timebased", "0", "false"):
            return cls.TIME_BASED
        if text in ("fee-based", "fee", "feebased", "1", "true"):
            return cls.FEE_BASED
        raise ValueError(f"unknown priority {value!r}")


@dataclass(frozen=True, slots=True)
class Transaction:
    """One mempool entry: 32-byte id, nominal size, amount, derived fee.

    The id is the double SHA256 of the serialized body, so identical field
    tuples always reproduce the same txid.
    """

    txid: bytes
    size_bytes: int = 500
    amount: float = 0.0
    fee: float = 0.0
    arrival_time: int = 0
    entropy: int = 0
    version: int = 1

    @classmethod
    def create(
        cls,
        *,
        amount: float,
        fee: float,
        arrival_time: int = 0,
        size_bytes: int = 500,
        entropy: int = 0,
        version: int = 1,
    ) -> "Transaction":
        if size_bytes < TX_FIELDS_SIZE:
            raise ValueError(
                f"size_bytes must be at least {TX_FIELDS_SIZE}, got {size_bytes}"
            )
        if fee < 0:
            raise ValueError(f"fee must be nonnegative, got {fee}")
        body = _serialize_body(version, amount, fee, size_bytes, arrival_time, entropy)
        return cls(
            txid=double_sha256(body),
            size_bytes=size_bytes,
            amount=amount,
            fee=fee,
            arrival_time=arrival_time,
            entropy=entropy,
            version=version,
        )

    def serialize_body(self) -> bytes:
        return _serialize_body(
            self.version,
            self.amount,
            self.fee,
            self.size_bytes,
            self.arrival_time,
            self.entropy,
        )

    @classmethod
    def parse_body(cls, body: bytes) -> "Transaction":
        """Rebuild a transaction from its wire body, recomputing the txid."""
        if len(body) < TX_FIELDS_SIZE:
            raise ValueError("transaction body shorter than its field prefix")
        version, amount, fee, size_bytes, arrival, entropy = _TX_FIELDS.unpack_from(body)
        if size_bytes != len(body):
            raise ValueError(
                f"declared size {size_bytes} does not match body length {len(body)}"
            )
        return cls(
            txid=double_sha256(body),
            size_bytes=size_bytes,
            amount=amount,
            fee=fee,
            arrival_time=arrival,
            entropy=entropy,
            version=version,
        )


def _serialize_body(version, amount, fee, size_bytes, arrival_time, entropy) -> bytes:
    body = bytearray(size_bytes)
    _TX_FIELDS.pack_into(body, 0, version, amount, fee, size_bytes, arrival_time, entropy)
    return bytes(body)


@dataclass(frozen=True)
class DtsAttributes:
    """The nine-attribute strategy vector controlling block incorporation.

    a1  mempool size cap (pending transactions held per node)
    a2  incorporation priority (time-based or fee-based)
    a3  fee as a fraction of the transaction amount
    a4  whether block space is reserved for small-fee transactions
    a5  fee threshold below which a transaction counts as small (a4 only)
    a6  cap on small-fee transactions per block (a4 only)
    a7  maximum leaf space one transaction can occupy
    a8  scale (mu) of the lognormal fee-to-space curve
    a9  shape (sigma) of the lognormal fee-to-space curve
    """

    a1_mempool_size: int = 75_032
    a2_priority: Priority = Priority.TIME_BASED
    a3_fee_percentage: float = 0.1031
    a4_designated_small_space: bool = False
    a5_small_fee_threshold: float = 0.0
    a6_small_fee_count_threshold: int = 0
    a7_max_leaf_space: float = 36.0
    a8_scale_mu: float = 9.5
    a9_shape_sigma: float = 0.99

    def __post_init__(self):
        if self.a1_mempool_size < 1:
            raise ValueError("a1 mempool size must be positive")
        if not (0.0 < self.a3_fee_percentage <= 1.0):
            raise ValueError("a3 fee percentage must be in (0, 1]")
        if self.a7_max_leaf_space < 1.0:
            raise ValueError("a7 max leaf space must be >= 1")
        if self.a9_shape_sigma <= 0.0:
            raise ValueError("a9 shape must be positive")
        if self.a4_designated_small_space:
            if self.a5_small_fee_threshold < 0:
                raise ValueError("a5 small-fee threshold must be nonnegative")
            if self.a6_small_fee_count_threshold < 0:
                raise ValueError("a6 small-fee count must be nonnegative")

    @classmethod
    def from_dict(cls, values: dict) -> "DtsAttributes":
        """Build from config keys a1..a9 (unknown keys rejected)."""
        known = {
            "a1": ("a1_mempool_size", lambda v: int(float(v))),
            "a2": ("a2_priority", Priority.parse),
            "a3": ("a3_fee_percentage", float),
            "a4": ("a4_designated_small_space", _parse_bool),
            "a5": ("a5_small_fee_threshold", float),
            "a6": ("a6_small_fee_count_threshold", lambda v: int(float(v))),
            "a7": ("a7_max_leaf_space", float),
            "a8": ("a8_scale_mu", float),
            "a9": ("a9_shape_sigma", float),
        }
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown attribute key {key!r}")
            field_name, conv = known[key]
            kwargs[field_name] = conv(raw)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "a1": self.a1_mempool_size,
            "a2": self.a2_priority.value,
            "a3": self.a3_fee_percentage,
            "a4": self.a4_designated_small_space,
            "a5": self.a5_small_fee_threshold,
            "a6": self.a6_small_fee_count_threshold,
            "a7": self.a7_max_leaf_space,
            "a8": self.a8_scale_mu,
            "a9": self.a9_shape_sigma,
        }


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


class Mempool:
    """Bounded, insertion-ordered set of pending transactions keyed by txid."""

    __slots__ = ("max_size", "_pending")

    def __init__(self, max_size: int):
        if max_size < 1:
            raise ValueError("mempool size must be positive")
        self.max_size = max_size
        self._pending: dict[bytes, Transaction] = {}

    def add(self, tx: Transaction) -> bool:
        """Admit a transaction; False if full or the txid is already present."""
        if len(self._pending) >= self.max_size or tx.txid in self._pending:
            return False
        self._pending[tx.txid] = tx
        return True

    def remove(self, txid: bytes) -> bool:
        return self._pending.pop(txid, None) is not None

    def remove_all(self, txids) -> int:
        pop = self._pending.pop
        return sum(pop(t, None) is not None for t in txids)

    def __contains__(self, txid: bytes) -> bool:
        return txid in self._pending

    def __len__(self) -> int:
        return len(self._pending)

    def __iter__(self):
        return iter(self._pending.values())

    @property
    def free_slots(self) -> int:
        return self.max_size - len(self._pending)


# -- fee-to-space curve ----------------------------------------------------


def lognormal_cdf(x: float, mu: float, sigma: float) -> float:
    """P(X <= x) for lognormal X: 1/2 + 1/2 erf((ln x - mu) / (sigma sqrt 2))."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if x <= 0.0:
        raise ValueError(f"x must be positive, got {x}")
    return 0.5 + 0.5 * math.erf((math.log(x) - mu) / (sigma * _SQRT2))


def lognormal_cdf_array(x: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    """Vectorized twin of lognormal_cdf for hot selection paths."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if x.size and np.min(x) <= 0.0:
        raise ValueError("all fee values must be positive")
    return 0.5 + 0.5 * _erf((np.log(x) - mu) / (sigma * _SQRT2))


def leaf_space_from_fee(fee: float, attrs: DtsAttributes) -> float:
    """Leaf units a fee buys: CDF(fee; a8, a9) * a7. Always in (0, a7)."""
    return lognormal_cdf(fee, attrs.a8_scale_mu, attrs.a9_shape_sigma) * attrs.a7_max_leaf_space


def leaf_space(tx: Transaction, attrs: DtsAttributes) -> float:
    return leaf_space_from_fee(tx.fee, attrs)


def leaf_space_array(fees: np.ndarray, attrs: DtsAttributes) -> np.ndarray:
    return (
        lognormal_cdf_array(fees, attrs.a8_scale_mu, attrs.a9_shape_sigma)
        * attrs.a7_max_leaf_space
    )


# -- selection ---------------------------------------------------------------


def _priority_order(txs: list[Transaction], priority: Priority) -> list[Transaction]:
    # Total orders: ties always broken by ascending txid for determinism.
    if priority is Priority.TIME_BASED:
        return sorted(txs, key=lambda t: (t.arrival_time, t.txid))
    return sorted(txs, key=lambda t: (-t.fee, t.txid))


def _greedy_prefix(txs: list[Transaction], attrs, budget: float, max_count=None):
    """Longest prefix of `txs` whose leaf-space sum stays within budget.

    The scan stops at the first transaction that does not fit, mirroring a
    sequential admit-while-it-fits loop; a cumulative sum computes the same
    left-to-right float additions.
    """
    if not txs or budget <= 0.0:
        return [], 0.0
    fees = np.fromiter((t.fee for t in txs), dtype=np.float64, count=len(txs))
    consumed = np.cumsum(leaf_space_array(fees, attrs))
    n = int(np.searchsorted(consumed, budget, side="right"))
    if max_count is not None:
        n = min(n, max_count)
    if n == 0:
        return [], 0.0
    return txs[:n], float(consumed[n - 1])


def select_transactions_ordered(
    mempool, attrs: DtsAttributes, leaf_budget: float
) -> list[Transaction]:
    """Selection in admission order (the order candidates consumed budget).

    When small-fee space is designated (a4), transactions under the a5 fee
    threshold are admitted through a reserved sub-budget sized for a6
    threshold-fee transactions, regardless of where the a2 priority order
    would have placed them; everything else competes for the remainder.
    """
    if leaf_budget <= 0.0:
        raise ValueError(f"leaf_budget must be positive, got {leaf_budget}")
    txs = list(mempool)
    if not txs:
        return []

    if not attrs.a4_designated_small_space or attrs.a6_small_fee_count_threshold == 0:
        ordered = _priority_order(txs, attrs.a2_priority)
        chosen, _ = _greedy_prefix(ordered, attrs, leaf_budget)
        return chosen

    threshold = attrs.a5_small_fee_threshold
    small = [t for t in txs if t.fee < threshold]
    large = [t for t in txs if t.fee >= threshold]
    reserved = 0.0
    if threshold > 0:
        reserved = min(
            attrs.a6_small_fee_count_threshold * leaf_space_from_fee(threshold, attrs),
            leaf_budget,
        )
    chosen_small: list[Transaction] = []
    if small and reserved > 0.0:
        chosen_small, _ = _greedy_prefix(
            _priority_order(small, attrs.a2_priority),
            attrs,
            reserved,
            max_count=attrs.a6_small_fee_count_threshold,
        )
    main_budget = leaf_budget - reserved
    chosen_large: list[Transaction] = []
    if large and main_budget > 0.0:
        chosen_large, _ = _greedy_prefix(
            _priority_order(large, attrs.a2_priority), attrs, main_budget
        )
    return chosen_small + chosen_large


def select_transactions(
    mempool, attrs: DtsAttributes, leaf_budget: float
) -> list[Transaction]:
    """Transactions drawn for one block, returned sorted by ascending txid."""
    return sorted(
        select_transactions_ordered(mempool, attrs, leaf_budget),
        key=lambda t: t.txid,
    )
