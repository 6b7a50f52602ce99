"""Discrete-event simulator of a PoW network relaying filter-compressed blocks.

Nodes sit in regions connected by a bandwidth/delay matrix; blocks gossip
neighbor to neighbor, and a block's propagation time is the sum of hop times
over its first-delivery spanning tree (the earliest-arrival tree rooted at
the miner).  Mining is modeled as one global exponential process with the
winner drawn by hash-power weight, which is statistically equivalent to
per-node puzzle solving and far cheaper.

All nodes share a single mempool (transaction relay is assumed ideal), so a
block is reconstructed once per propagation and the result stands for every
receiver.  Transactions arriving between two block events are synthesized in
one batch at the later event; nothing observes the mempool in between, so
the behavior is identical to per-arrival event handling.

One run is strictly single-threaded and deterministic in (attrs, scenario,
seed).  Distinct runs share no mutable state and may execute in parallel.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import codec, metrics
from .cuckoo import FilterParams
from .dts import DtsAttributes, Mempool, Transaction

__all__ = [
    "Topology",
    "NodeConfig",
    "Scenario",
    "BlockRecord",
    "SimulationOutcome",
    "hop_time",
    "build_neighbor_lists",
    "run_simulation",
]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Topology:
    """Region-to-region link characteristics: bits/second and milliseconds."""

    regions: tuple[str, ...]
    bandwidth_bps: tuple[tuple[float, ...], ...]
    delay_ms: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        n = len(self.regions)
        if n == 0:
            raise ValueError("topology needs at least one region")
        for name, matrix in (("bandwidth", self.bandwidth_bps), ("delay", self.delay_ms)):
            if len(matrix) != n or any(len(row) != n for row in matrix):
                raise ValueError(f"{name} matrix must be {n}x{n}")
            if any(v <= 0 for row in matrix for v in row):
                raise ValueError(f"{name} entries must be positive")
        for i in range(n):
            for j in range(n):
                if self.bandwidth_bps[i][j] != self.bandwidth_bps[j][i]:
                    raise ValueError("bandwidth matrix must be symmetric")

    def region_index(self, region: str) -> int:
        try:
            return self.regions.index(region)
        except ValueError:
            raise ValueError(f"unknown region {region!r}") from None

    @classmethod
    def from_dict(cls, raw: dict) -> "Topology":
        regions = tuple(raw["regions"])
        if "bandwidth_bps" in raw:
            bw = raw["bandwidth_bps"]
        else:
            bw = [[v * 1e6 for v in row] for row in raw["bandwidth_mbps"]]
        return cls(
            regions=regions,
            bandwidth_bps=tuple(tuple(float(v) for v in row) for row in bw),
            delay_ms=tuple(tuple(float(v) for v in row) for row in raw["delay_ms"]),
        )

    @classmethod
    def from_file(cls, path) -> "Topology":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "Topology":
        raw = json.loads(
            resources.files("edts.data").joinpath("regions.json").read_text()
        )
        return cls.from_dict(raw)


@dataclass(frozen=True)
class NodeConfig:
    """One simulated node: its region, mempool view, and gossip neighbors."""

    node_id: int
    region: str
    mempool: Mempool
    neighbors: tuple[int, ...]


def hop_time(block_size: int, from_region: str, to_region: str, topology: Topology) -> float:
    """One-hop relay time in ms: transfer (bytes over bits/s) plus link delay."""
    i = topology.region_index(from_region)
    j = topology.region_index(to_region)
    transfer_s = block_size * 8.0 / topology.bandwidth_bps[i][j]
    return transfer_s * 1000.0 + topology.delay_ms[i][j]


def build_neighbor_lists(node_count: int, degree: int, seed: int) -> list[tuple[int, ...]]:
    """Symmetric, connected gossip graph with roughly `degree` peers per node.

    A circulant construction: the ring offset 1 guarantees connectivity and
    the remaining offsets are drawn deterministically from the seed.  Small
    networks degrade to a complete graph.
    """
    if node_count < 1:
        raise ValueError("node_count must be positive")
    if node_count <= degree + 1:
        return [
            tuple(j for j in range(node_count) if j != i) for i in range(node_count)
        ]
    rng = np.random.Generator(np.random.PCG64(seed))
    want = max(1, degree // 2)
    pool = np.arange(2, (node_count + 1) // 2)
    extra = min(want - 1, len(pool))
    offsets = [1] + sorted(rng.choice(pool, size=extra, replace=False).tolist())
    neighbors = []
    for i in range(node_count):
        peers = set()
        for off in offsets:
            peers.add((i + off) % node_count)
            peers.add((i - off) % node_count)
        peers.discard(i)
        neighbors.append(tuple(sorted(peers)))
    return neighbors


@dataclass(frozen=True)
class Scenario:
    """Everything a run needs besides the strategy attributes and the seed."""

    node_count: int = 100
    run_blocks: int = 144
    block_interval_ms: float = 600_000.0
    tx_rate_per_s: float = 3.5
    block_size_cap: int = 1024 * 1024
    tx_size_bytes: int = 500
    amount_log_mean: float = 11.0
    amount_log_sigma: float = 1.2
    # Slow sinusoidal drift of the amount scale, for runs that need blocks at
    # mixed fee levels; 0 disables it.
    fee_cycle_amplitude: float = 0.0
    fee_cycle_period_blocks: int = 48
    blocks_per_period: int = 144
    filter_epsilon: float = 1e-6
    filter_alpha: float = 0.955
    degree: int = 8
    topology: Topology = field(default_factory=Topology.default)
    hash_power: tuple[float, ...] | None = None
    search_cap: int = codec.DEFAULT_SEARCH_CAP
    # Optional externally supplied arrival stream (e.g. from a CSV); when
    # set, the synthetic generator is bypassed and fees are still derived as
    # amount * a3 at injection time.
    tx_times_ms: tuple[int, ...] | None = None
    tx_amounts: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("node_count must be positive")
        if self.run_blocks < 1:
            raise ValueError("run_blocks must be positive")
        if self.block_interval_ms <= 0:
            raise ValueError("block_interval_ms must be positive")
        if self.tx_rate_per_s < 0:
            raise ValueError("tx_rate_per_s must be nonnegative")
        if self.block_size_cap <= codec.HEADER_BYTES:
            raise ValueError("block_size_cap too small")
        if len(self.topology.regions) == 0:
            raise ValueError("empty topology")
        if self.hash_power is not None:
            if len(self.hash_power) != self.node_count:
                raise ValueError("hash_power must list one weight per node")
            if any(w < 0 for w in self.hash_power) or sum(self.hash_power) <= 0:
                raise ValueError("hash_power weights must be nonnegative, sum > 0")
        if (self.tx_times_ms is None) != (self.tx_amounts is None):
            raise ValueError("tx_times_ms and tx_amounts must be supplied together")
        if self.tx_times_ms is not None and len(self.tx_times_ms) != len(self.tx_amounts):
            raise ValueError("tx_times_ms and tx_amounts must have equal length")

    def filter_params(self, seed: int) -> FilterParams:
        return FilterParams(
            epsilon=self.filter_epsilon, alpha=self.filter_alpha, seed=seed
        )


@dataclass(frozen=True)
class BlockRecord:
    height: int
    reward: float
    tx_count: int
    wire_bytes: int
    pt_ms: float
    mine_time_ms: int
    miner: int


@dataclass(frozen=True)
class SimulationOutcome:
    """Per-block records for the main chain plus run-level aggregates."""

    records: tuple[BlockRecord, ...]
    elapsed_ms: int
    total_tx: int
    tps: float
    reward_series: metrics.RewardSeries | None
    reconstructions: int
    reconstruction_failures: int
    orphans: int
    block_txids: tuple[tuple[bytes, ...], ...] | None = None
    wires: tuple[bytes, ...] | None = None
    debug: tuple | None = None


@dataclass
class _ChainBlock:
    index: int
    parent: int  # index into the block list, -1 for the genesis parent
    height: int
    mine_time: int
    block_hash: bytes
    arrivals: np.ndarray
    record: BlockRecord | None
    txids: tuple[bytes, ...]


class _ArrivalStream:
    """Synthesizes (or replays) transaction arrivals in batches."""

    def __init__(self, scenario: Scenario, attrs: DtsAttributes, rng: np.random.Generator):
        self.scenario = scenario
        self.attrs = attrs
        self.rng = rng
        self.cursor = 0  # replay position for externally supplied streams

    def take(self, t_from: int, t_to: int, limit: int) -> list[Transaction]:
        """Arrivals in (t_from, t_to], earliest first, at most `limit` admitted.

        Later arrivals beyond the limit bounce off the full mempool and are
        dropped for good.
        """
        sc = self.scenario
        if sc.tx_times_ms is not None:
            times, amounts = [], []
            while (
                self.cursor < len(sc.tx_times_ms)
                and sc.tx_times_ms[self.cursor] <= t_to
            ):
                times.append(sc.tx_times_ms[self.cursor])
                amounts.append(sc.tx_amounts[self.cursor])
                self.cursor += 1
            entropies = self.rng.integers(0, 2**63, size=len(times), dtype=np.int64)
        else:
            rate_per_ms = sc.tx_rate_per_s / 1000.0
            count = int(self.rng.poisson(rate_per_ms * (t_to - t_from)))
            raw = self.rng.uniform(t_from, t_to, size=count)
            raw.sort()
            times = np.floor(raw).astype(np.int64) + 1  # into (t_from, t_to]
            np.minimum(times, t_to, out=times)
            mu = np.full(count, sc.amount_log_mean)
            if sc.fee_cycle_amplitude:
                period_ms = sc.fee_cycle_period_blocks * sc.block_interval_ms
                mu += sc.fee_cycle_amplitude * np.sin(2.0 * math.pi * times / period_ms)
            amounts = np.exp(self.rng.normal(mu, sc.amount_log_sigma))
            entropies = self.rng.integers(0, 2**63, size=count, dtype=np.int64)

        admitted = []
        a3 = self.attrs.a3_fee_percentage
        size_bytes = sc.tx_size_bytes
        for i in range(min(limit, len(times))):
            amount = float(amounts[i])
            admitted.append(
                Transaction.create(
                    amount=amount,
                    fee=amount * a3,
                    arrival_time=int(times[i]),
                    size_bytes=size_bytes,
                    entropy=int(entropies[i]),
                )
            )
        return admitted


def _best_known_tip(blocks: list[_ChainBlock], node: int, now: int) -> _ChainBlock:
    # Highest block the node has received; ties go to the earliest received,
    # then the lower block hash.  The genesis block arrives everywhere at 0,
    # so there is always a candidate.
    best = None
    best_key = None
    for b in blocks:
        arr = float(b.arrivals[node])
        if arr <= now:
            key = (-b.height, arr, b.block_hash)
            if best_key is None or key < best_key:
                best = b
                best_key = key
    return best


def _propagate(
    miner: int,
    wire_size: int,
    neighbors: list[tuple[int, ...]],
    region_of: list[str],
    topology: Topology,
) -> tuple[np.ndarray, float]:
    """Earliest-arrival relay from the miner.

    Returns per-node delivery offsets (ms after mining) and the total
    propagation time: the sum of hop times over the first-delivery tree,
    i.e. one transmission per node that learns the block.
    """
    n = len(neighbors)
    dist = np.full(n, np.inf)
    tree_cost = np.zeros(n)
    dist[miner] = 0.0
    heap = [(0.0, miner)]
    done = [False] * n
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for v in neighbors[u]:
            if done[v]:
                continue
            cost = hop_time(wire_size, region_of[u], region_of[v], topology)
            nd = d + cost
            if nd < dist[v]:
                dist[v] = nd
                tree_cost[v] = cost
                heapq.heappush(heap, (nd, v))
    if not all(done):
        raise ValueError("gossip graph is not connected")
    return dist, float(np.sum(tree_cost))


def run_simulation(
    attrs: DtsAttributes,
    scenario: Scenario,
    seed: int,
    *,
    collect_block_txids: bool = False,
    collect_debug: bool = False,
    collect_wires: int = 0,
) -> SimulationOutcome:
    """Run one deterministic mining-and-relay simulation.

    The event loop alternates batched transaction arrivals with block events
    sampled at exponential intervals.  The winning miner extends the best
    tip it has actually received (late deliveries can orphan a block), builds
    a filter-compressed block from the shared mempool, and the block is
    reconstructed once on behalf of all receivers before its transactions
    leave the mempool.
    """
    ss = np.random.SeedSequence(seed)
    arr_rng, mine_rng, misc_rng = (
        np.random.Generator(np.random.PCG64(child)) for child in ss.spawn(3)
    )

    region_of = [
        scenario.topology.regions[i % len(scenario.topology.regions)]
        for i in range(scenario.node_count)
    ]
    neighbors = build_neighbor_lists(scenario.node_count, scenario.degree, seed)
    weights = None
    if scenario.hash_power is not None:
        total = sum(scenario.hash_power)
        weights = np.array([w / total for w in scenario.hash_power])

    mempool = Mempool(attrs.a1_mempool_size)
    stream = _ArrivalStream(scenario, attrs, arr_rng)

    genesis = _ChainBlock(
        index=0,
        parent=-1,
        height=0,
        mine_time=0,
        block_hash=b"\x00" * 32,
        arrivals=np.zeros(scenario.node_count),
        record=None,
        txids=(),
    )
    blocks = [genesis]
    reconstructions = 0
    failures = 0
    debug_rows = [] if collect_debug else None
    kept_wires = [] if collect_wires else None

    t = 0
    for _ in range(scenario.run_blocks):
        dt = max(1, int(round(mine_rng.exponential(scenario.block_interval_ms))))
        t_next = t + dt
        mempool_free = mempool.free_slots
        for tx in stream.take(t, t_next, mempool_free):
            mempool.add(tx)
        t = t_next

        miner = int(mine_rng.choice(scenario.node_count, p=weights))
        parent = _best_known_tip(blocks, miner, t)
        nonce = int(misc_rng.integers(0, 2**63))
        filter_seed = int(misc_rng.integers(0, 2**63))
        params = scenario.filter_params(filter_seed)

        block = codec.build_block(
            mempool,
            attrs,
            parent.block_hash,
            params,
            block_size_cap=scenario.block_size_cap,
            timestamp_ms=t,
            nonce=nonce,
            coinbase_size_bytes=scenario.tx_size_bytes,
        )
        wire = block.to_wire()
        if kept_wires is not None and len(kept_wires) < collect_wires:
            kept_wires.append(wire)

        # Shared mempool: every receiver sees the same snapshot, so one
        # reconstruction stands for all of them.
        reconstructions += 1
        try:
            recovered = codec.reconstruct_block(
                wire, mempool, search_cap=scenario.search_cap
            )
            if [x.txid for x in recovered] != [x.txid for x in block.full_txs]:
                failures += 1
        except codec.ReconstructionError:
            failures += 1

        txids = tuple(x.txid for x in block.full_txs)
        mempool.remove_all(txids)

        arrivals, pt = _propagate(
            miner, len(wire), neighbors, region_of, scenario.topology
        )
        record = BlockRecord(
            height=parent.height + 1,
            reward=block.reward,
            tx_count=len(block.full_txs),
            wire_bytes=len(wire),
            pt_ms=pt,
            mine_time_ms=t,
            miner=miner,
        )
        blocks.append(
            _ChainBlock(
                index=len(blocks),
                parent=parent.index,
                height=parent.height + 1,
                mine_time=t,
                block_hash=block.header.block_hash(),
                arrivals=t + arrivals,
                record=record,
                txids=txids if collect_block_txids else (),
            )
        )
        if collect_debug:
            debug_rows.append(
                (
                    codec.leaf_budget(scenario.block_size_cap, params),
                    tuple(x.fee for x in block.full_txs),
                    _next_candidate_fee(mempool, attrs),
                )
            )

    # Main chain: best tip by height, then earliest mined, then lower hash.
    tip = min(blocks[1:], key=lambda b: (-b.height, b.mine_time, b.block_hash))
    chain = []
    cursor = tip
    while cursor.index != 0:
        chain.append(cursor)
        cursor = blocks[cursor.parent]
    chain.reverse()

    records = tuple(b.record for b in chain)
    total_tx = sum(r.tx_count for r in records)
    elapsed_ms = chain[-1].mine_time
    outcome = SimulationOutcome(
        records=records,
        elapsed_ms=elapsed_ms,
        total_tx=total_tx,
        tps=total_tx / (elapsed_ms / 1000.0),
        reward_series=_maybe_series(records, scenario.blocks_per_period),
        reconstructions=reconstructions,
        reconstruction_failures=failures,
        orphans=len(blocks) - 1 - len(chain),
        block_txids=tuple(b.txids for b in chain) if collect_block_txids else None,
        wires=tuple(kept_wires) if kept_wires is not None else None,
        debug=tuple(debug_rows) if collect_debug else None,
    )
    return outcome


def _next_candidate_fee(mempool, attrs: DtsAttributes):
    """Fee of the first transaction the block builder would pick next."""
    from .dts import Priority

    best = None
    for tx in mempool:
        if attrs.a2_priority is Priority.TIME_BASED:
            key = (tx.arrival_time, tx.txid)
        else:
            key = (-tx.fee, tx.txid)
        if best is None or key < best[0]:
            best = (key, tx.fee)
    return None if best is None else best[1]


def _maybe_series(records, blocks_per_period: int):
    try:
        return metrics.RewardSeries.from_blocks(records, blocks_per_period)
    except ValueError:
        return None


def make_nodes(scenario: Scenario, attrs: DtsAttributes, seed: int) -> list[NodeConfig]:
    """Materialize per-node views of the network (regions, neighbors, mempool)."""
    neighbors = build_neighbor_lists(scenario.node_count, scenario.degree, seed)
    return [
        NodeConfig(
            node_id=i,
            region=scenario.topology.regions[i % len(scenario.topology.regions)],
            mempool=Mempool(attrs.a1_mempool_size),
            neighbors=neighbors[i],
        )
        for i in range(scenario.node_count)
    ]
