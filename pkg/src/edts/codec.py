"""Block construction and reconstruction for filter-compressed relay.

A sender ships a block as a fixed 80-byte header, the serialized membership
filter, the coinbase transaction, and the short list of "inspector"
transactions: mempool entries that test positive in the filter without being
part of the block.  Receivers rebuild the full transaction list from their
own mempool by filtering it, pruning inspectors, and resolving any remaining
fingerprint collisions with a bounded combinatorial search verified against
the Merkle root.

Wire layout (little-endian, byte-exact):

    parent hash        32
    merkle root        32
    timestamp (ms)      8
    nonce               8          -- fixed 80-byte header ends here
    tx count            4          (committed transactions, coinbase excluded)
    filter length       4
    filter blob         variable   (see cuckoo.CuckooFilter.serialize)
    coinbase body       variable   (self-delimiting: size field at offset 20)
    inspector count     4
    inspector bodies    variable

Build and reconstruct are pure given their inputs; reconstructions may run
concurrently on immutable mempool snapshots.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from itertools import combinations

from .cuckoo import (
    CapacityExceededError,
    CuckooFilter,
    FilterParams,
    MalformedFilterError,
    serialized_size_for,
    space_cost_bytes,
)
from .dts import DtsAttributes, Transaction, TX_FIELDS_SIZE, select_transactions_ordered
from .hashing import double_sha256

__all__ = [
    "HEADER_BYTES",
    "DEFAULT_BLOCK_SIZE_CAP",
    "DEFAULT_SEARCH_CAP",
    "CodecError",
    "MalformedBlockError",
    "BlockSizeExceededError",
    "ReconstructionError",
    "NoCandidateMatchesError",
    "SearchBudgetExceededError",
    "BlockHeader",
    "EfficientBlock",
    "merkle_root",
    "leaf_budget",
    "build_block",
    "reconstruct_block",
]

HEADER_BYTES = 80
DEFAULT_BLOCK_SIZE_CAP = 1024 * 1024
DEFAULT_SEARCH_CAP = 10**6

_FIXED_HEADER = struct.Struct("<32s32sQQ")
_U32 = struct.Struct("<I")
# Byte offset of the size field inside a serialized transaction body.
_TX_SIZE_OFFSET = 20


class CodecError(Exception):
    """Base class for block codec failures."""


class MalformedBlockError(CodecError):
    """Wire bytes cannot be decoded into a block."""


class BlockSizeExceededError(CodecError):
    """A built block does not fit the configured size cap."""


class ReconstructionError(CodecError):
    """Base class for receiver-side reconstruction failures."""


class NoCandidateMatchesError(ReconstructionError):
    """No candidate transaction set reproduces the committed Merkle root.

    Signals mempool desynchronization; the caller should fall back to
    re-requesting the full block.
    """


class SearchBudgetExceededError(ReconstructionError):
    """The collision search passed its iteration cap before finding a match."""


@dataclass(frozen=True)
class BlockHeader:
    parent_hash: bytes
    merkle_root: bytes
    timestamp_ms: int
    nonce: int
    tx_count: int
    filter_bytes: bytes

    def fixed_bytes(self) -> bytes:
        return _FIXED_HEADER.pack(
            self.parent_hash, self.merkle_root, self.timestamp_ms, self.nonce
        )

    def block_hash(self) -> bytes:
        return double_sha256(self.fixed_bytes())


@dataclass(frozen=True)
class EfficientBlock:
    """A built block: wire fields plus the sender-side-only transaction list.

    `full_txs` never crosses the wire; receivers recover it from their own
    mempool, which is the entire point of the scheme.
    """

    header: BlockHeader
    coinbase: Transaction
    inspector_txs: tuple[Transaction, ...]
    full_txs: tuple[Transaction, ...] = field(repr=False)

    @property
    def wire_size(self) -> int:
        return (
            HEADER_BYTES
            + 12  # tx count, filter length, inspector count
            + len(self.header.filter_bytes)
            + self.coinbase.size_bytes
            + sum(t.size_bytes for t in self.inspector_txs)
        )

    @property
    def reward(self) -> float:
        return self.coinbase.amount

    def to_wire(self) -> bytes:
        out = bytearray(self.header.fixed_bytes())
        out += _U32.pack(self.header.tx_count)
        out += _U32.pack(len(self.header.filter_bytes))
        out += self.header.filter_bytes
        out += self.coinbase.serialize_body()
        out += _U32.pack(len(self.inspector_txs))
        for tx in self.inspector_txs:
            out += tx.serialize_body()
        return bytes(out)

    @classmethod
    def parse_wire(cls, data: bytes) -> "EfficientBlock":
        try:
            parent, root, timestamp, nonce = _FIXED_HEADER.unpack_from(data, 0)
            pos = HEADER_BYTES
            (tx_count,) = _U32.unpack_from(data, pos)
            (filter_len,) = _U32.unpack_from(data, pos + 4)
            pos += 8
            filter_bytes = bytes(data[pos : pos + filter_len])
            if len(filter_bytes) != filter_len:
                raise MalformedBlockError("truncated filter section")
            pos += filter_len
            coinbase, pos = _read_tx(data, pos)
            (n_inspectors,) = _U32.unpack_from(data, pos)
            pos += 4
            inspectors = []
            for _ in range(n_inspectors):
                tx, pos = _read_tx(data, pos)
                inspectors.append(tx)
        except struct.error as exc:
            raise MalformedBlockError(f"truncated block: {exc}") from exc
        if pos != len(data):
            raise MalformedBlockError(f"{len(data) - pos} trailing bytes after block")
        header = BlockHeader(
            parent_hash=parent,
            merkle_root=root,
            timestamp_ms=timestamp,
            nonce=nonce,
            tx_count=tx_count,
            filter_bytes=filter_bytes,
        )
        return cls(
            header=header,
            coinbase=coinbase,
            inspector_txs=tuple(inspectors),
            full_txs=(),
        )


def _read_tx(data: bytes, pos: int) -> tuple[Transaction, int]:
    if pos + TX_FIELDS_SIZE > len(data):
        raise MalformedBlockError("truncated transaction body")
    (size,) = _U32.unpack_from(data, pos + _TX_SIZE_OFFSET)
    end = pos + size
    if size < TX_FIELDS_SIZE or end > len(data):
        raise MalformedBlockError(f"transaction body size {size} out of range")
    try:
        tx = Transaction.parse_body(data[pos:end])
    except ValueError as exc:
        raise MalformedBlockError(str(exc)) from exc
    return tx, end


def merkle_root(txids) -> bytes:
    """Binary Merkle root over txids in list order.

    Internal nodes are the double SHA256 of the concatenated children; an odd
    node at any level is paired with itself.  A single txid is its own root.
    """
    level = list(txids)
    if not level:
        raise ValueError("cannot compute a Merkle root over an empty list")
    for txid in level:
        if len(txid) != 32:
            raise ValueError("txids must be 32 bytes")
    while len(level) > 1:
        if len(level) & 1:
            level.append(level[-1])
        level = [
            double_sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)
        ]
    return level[0]


def leaf_budget(block_size_cap: int, params: FilterParams) -> float:
    """Leaf units available to one block: (cap - 80) / per-item byte cost."""
    if block_size_cap <= HEADER_BYTES:
        raise ValueError(f"block size cap must exceed {HEADER_BYTES} bytes")
    return (block_size_cap - HEADER_BYTES) / space_cost_bytes(
        params.epsilon, params.alpha
    )


def build_block(
    mempool,
    attrs: DtsAttributes,
    parent_hash: bytes,
    filter_params: FilterParams,
    *,
    block_size_cap: int = DEFAULT_BLOCK_SIZE_CAP,
    timestamp_ms: int = 0,
    nonce: int = 0,
    coinbase_size_bytes: int = 500,
) -> EfficientBlock:
    """Assemble a filter-compressed block from a mempool snapshot.

    Transactions are drawn against the leaf budget, inserted into a filter
    sized for the selection, and committed via a Merkle root over the
    txid-sorted list with the coinbase as first leaf.  Mempool entries that
    test positive without being selected become inspector transactions.

    The leaf budget is the primary capacity rule; a hard byte-size check
    additionally trims the lowest-priority selections in the rare regimes
    where tiny per-transaction leaf costs would let the serialized filter
    outgrow the cap.  A filter insertion failure closes the block early with
    the transactions stored so far.
    """
    if len(parent_hash) != 32:
        raise ValueError("parent_hash must be 32 bytes")
    budget = leaf_budget(block_size_cap, filter_params)
    ordered = select_transactions_ordered(mempool, attrs, budget)

    base_overhead = HEADER_BYTES + 12 + coinbase_size_bytes
    n = len(ordered)
    while n > 0 and base_overhead + serialized_size_for(filter_params, n) > block_size_cap:
        # Filter size is a step function of n; jump straight below the step.
        over = base_overhead + serialized_size_for(filter_params, n) - block_size_cap
        shrink = max(1, math.ceil(over / space_cost_bytes(filter_params.epsilon, filter_params.alpha)))
        n = max(0, n - shrink)
    ordered = ordered[:n]

    selected = sorted(ordered, key=lambda t: t.txid)
    flt = CuckooFilter.for_capacity(filter_params, max(len(selected), 1))
    stored: list[Transaction] = []
    for tx in selected:
        try:
            if not flt.insert(tx.txid):
                break
        except CapacityExceededError:
            break
        stored.append(tx)
    full_txs = tuple(stored)

    reward = math.fsum(t.fee for t in full_txs)
    coinbase = Transaction.create(
        amount=reward,
        fee=0.0,
        arrival_time=timestamp_ms,
        size_bytes=coinbase_size_bytes,
        entropy=int.from_bytes(parent_hash[:8], "little") ^ (nonce & (2**64 - 1)),
    )
    root = merkle_root([coinbase.txid] + [t.txid for t in full_txs])

    selected_ids = {t.txid for t in full_txs}
    inspectors = tuple(
        tx
        for tx in mempool
        if tx.txid not in selected_ids and flt.contains(tx.txid)
    )

    header = BlockHeader(
        parent_hash=parent_hash,
        merkle_root=root,
        timestamp_ms=timestamp_ms,
        nonce=nonce,
        tx_count=len(full_txs),
        filter_bytes=flt.serialize(),
    )
    block = EfficientBlock(
        header=header, coinbase=coinbase, inspector_txs=inspectors, full_txs=full_txs
    )
    if block.wire_size > block_size_cap:
        raise BlockSizeExceededError(
            f"block wire size {block.wire_size} exceeds cap {block_size_cap}"
        )
    return block


def reconstruct_block(
    wire: bytes, local_mempool, *, search_cap: int = DEFAULT_SEARCH_CAP
) -> list[Transaction]:
    """Recover a block's transaction list from wire bytes and a local mempool.

    The mempool is filtered through the header's membership filter, inspector
    transactions are pruned, and the remaining candidates are grouped by
    (bucket pair, fingerprint).  Groups of one are certain members; the
    committed count then says how many entries to keep from the collided
    groups, and candidate subsets are tried in txid-lexicographic order until
    one reproduces the Merkle root.

    Raises NoCandidateMatchesError when no subset matches (the mempool is
    missing a transaction) and SearchBudgetExceededError when the number of
    subsets to try passes `search_cap`.
    """
    block = EfficientBlock.parse_wire(wire)
    try:
        flt = CuckooFilter.deserialize(block.header.filter_bytes)
    except MalformedFilterError as exc:
        raise MalformedBlockError(f"bad filter blob: {exc}") from exc

    inspector_ids = {t.txid for t in block.inspector_txs}
    entries = []
    lookup = flt.lookup
    for tx in local_mempool:
        if tx.txid in inspector_ids:
            continue
        info = lookup(tx.txid)
        if info is not None:
            entries.append((tx, info))
    entries.sort(key=lambda e: e[0].txid)

    group_sizes: dict = {}
    for _, info in entries:
        group_sizes[info] = group_sizes.get(info, 0) + 1
    singles = [tx for tx, info in entries if group_sizes[info] == 1]
    collided = [tx for tx, info in entries if group_sizes[info] > 1]

    n_committed = block.header.tx_count
    need = n_committed - len(singles)
    if need < 0 or need > len(collided):
        raise NoCandidateMatchesError(
            f"committed count {n_committed} unreachable: {len(singles)} certain "
            f"members, {len(collided)} collision candidates"
        )

    target = block.header.merkle_root
    coinbase_id = block.coinbase.txid
    single_ids = [t.txid for t in singles]
    total = math.comb(len(collided), need)
    if total > search_cap:
        raise SearchBudgetExceededError(
            f"{total} candidate subsets exceed the search cap of {search_cap}"
        )
    for subset in combinations(collided, need):
        ids = sorted(single_ids + [t.txid for t in subset])
        if merkle_root([coinbase_id] + ids) == target:
            chosen = sorted(singles + list(subset), key=lambda t: t.txid)
            return chosen
    raise NoCandidateMatchesError(
        "no candidate subset reproduces the committed Merkle root"
    )
