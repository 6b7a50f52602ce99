"""Network simulator: hop arithmetic, relay trees, chains, determinism."""

import math
import random

import numpy as np
import pytest
from scipy import stats

from edts.dts import DtsAttributes, Priority
from edts.netsim import (
    Scenario,
    Topology,
    build_neighbor_lists,
    hop_time,
    make_nodes,
    run_simulation,
)

TOY = dict(
    node_count=6,
    run_blocks=12,
    block_interval_ms=60_000.0,
    tx_rate_per_s=20.0,
    blocks_per_period=4,
)


def two_region_topology(bw_bps=8e6, delay=100.0):
    return Topology(
        regions=("a", "b"),
        bandwidth_bps=((bw_bps, bw_bps), (bw_bps, bw_bps)),
        delay_ms=((delay, delay), (delay, delay)),
    )


class TestHopTime:
    def test_zero_size_leaves_only_delay(self):
        topo = two_region_topology()
        assert hop_time(0, "a", "b", topo) == 100.0

    def test_megabyte_over_8mbit(self):
        topo = two_region_topology(bw_bps=8e6, delay=100.0)
        assert hop_time(1_048_576, "a", "b", topo) == pytest.approx(1148.576, abs=1e-9)

    def test_random_triples_match_scalar_recomputation(self):
        rnd = random.Random(14)
        for _ in range(100):
            size = rnd.randrange(0, 5_000_000)
            bw = rnd.uniform(1e5, 1e9)
            delay = rnd.uniform(0.1, 500.0)
            topo = two_region_topology(bw_bps=bw, delay=delay)
            expected = size * 8.0 / bw * 1000.0 + delay
            assert hop_time(size, "a", "b", topo) == pytest.approx(expected, rel=1e-9)

    def test_unknown_region(self):
        with pytest.raises(ValueError):
            hop_time(100, "a", "nowhere", two_region_topology())


class TestTopology:
    def test_default_table_is_consistent(self):
        topo = Topology.default()
        n = len(topo.regions)
        assert n == 6
        for i in range(n):
            for j in range(n):
                assert topo.bandwidth_bps[i][j] == topo.bandwidth_bps[j][i]
                assert topo.bandwidth_bps[i][j] > 0
                assert topo.delay_ms[i][j] > 0

    def test_validation(self):
        with pytest.raises(ValueError):
            Topology(regions=(), bandwidth_bps=(), delay_ms=())
        with pytest.raises(ValueError):
            Topology(
                regions=("a", "b"),
                bandwidth_bps=((1.0, 2.0), (3.0, 1.0)),  # asymmetric
                delay_ms=((1.0, 1.0), (1.0, 1.0)),
            )


class TestNeighbors:
    def test_symmetric_and_within_degree_band(self):
        neighbors = build_neighbor_lists(100, 8, seed=4)
        for i, peers in enumerate(neighbors):
            assert i not in peers
            assert 8 <= len(peers) <= 10
            for j in peers:
                assert i in neighbors[j]

    def test_small_networks_complete(self):
        neighbors = build_neighbor_lists(4, 8, seed=1)
        assert all(len(p) == 3 for p in neighbors)

    def test_node_views(self, default_attrs):
        sc = Scenario(node_count=12, **{k: v for k, v in TOY.items() if k != "node_count"})
        nodes = make_nodes(sc, default_attrs, seed=3)
        assert len(nodes) == 12
        for node in nodes:
            assert node.region in sc.topology.regions
            for peer in node.neighbors:
                assert node.node_id in nodes[peer].neighbors


class TestScenarioValidation:
    def test_bad_rates(self):
        with pytest.raises(ValueError):
            Scenario(node_count=0)
        with pytest.raises(ValueError):
            Scenario(block_interval_ms=0)
        with pytest.raises(ValueError):
            Scenario(tx_rate_per_s=-1)
        with pytest.raises(ValueError):
            Scenario(hash_power=(1.0,))  # wrong length

    def test_external_stream_pairing(self):
        with pytest.raises(ValueError):
            Scenario(tx_times_ms=(1, 2))


class TestRunSimulation:
    def test_single_node_no_transactions(self, default_attrs):
        sc = Scenario(node_count=1, run_blocks=10, tx_rate_per_s=0.0,
                      block_interval_ms=1000.0, blocks_per_period=5)
        out = run_simulation(default_attrs, sc, seed=1)
        assert len(out.records) == 10
        assert out.total_tx == 0
        assert out.tps == 0.0
        assert all(r.pt_ms == 0.0 for r in out.records)
        assert all(r.tx_count == 0 for r in out.records)
        assert out.reconstruction_failures == 0

    def test_two_nodes_pt_is_one_hop(self, default_attrs):
        topo = two_region_topology(bw_bps=8e6, delay=100.0)
        sc = Scenario(node_count=2, run_blocks=1, tx_rate_per_s=5.0,
                      block_interval_ms=60_000.0, topology=topo,
                      blocks_per_period=1)
        out = run_simulation(default_attrs, sc, seed=7)
        record = out.records[0]
        expected = hop_time(record.wire_bytes, "a", "b", topo)
        assert record.pt_ms == pytest.approx(expected, rel=1e-12)

    def test_deterministic(self, default_attrs):
        sc = Scenario(**TOY)
        a = run_simulation(default_attrs, sc, seed=42, collect_block_txids=True)
        b = run_simulation(default_attrs, sc, seed=42, collect_block_txids=True)
        assert a == b

    def test_seed_changes_the_run(self, default_attrs):
        sc = Scenario(**TOY)
        a = run_simulation(default_attrs, sc, seed=1)
        b = run_simulation(default_attrs, sc, seed=2)
        assert a.records != b.records

    def test_transaction_conservation(self, default_attrs):
        sc = Scenario(**TOY)
        out = run_simulation(default_attrs, sc, seed=11, collect_block_txids=True)
        seen = set()
        total = 0
        for txids in out.block_txids:
            for txid in txids:
                assert txid not in seen
                seen.add(txid)
            total += len(txids)
        assert total == out.total_tx
        assert out.reconstructions == sc.run_blocks
        assert out.reconstruction_failures == 0

    def test_heights_strictly_increasing(self, default_attrs):
        sc = Scenario(**TOY)
        out = run_simulation(default_attrs, sc, seed=19)
        heights = [r.height for r in out.records]
        assert heights == list(range(1, len(heights) + 1))

    def test_every_wire_within_cap(self, default_attrs):
        sc = Scenario(**TOY)
        out = run_simulation(default_attrs, sc, seed=23)
        assert all(r.wire_bytes <= sc.block_size_cap for r in out.records)

    def test_size_propagation_coupling(self, default_attrs):
        # Mixed fee levels force blocks of different sizes; bigger wire
        # images must tend to propagate slower.
        sc = Scenario(
            node_count=20,
            run_blocks=36,
            block_interval_ms=60_000.0,
            tx_rate_per_s=60.0,
            blocks_per_period=12,
            amount_log_mean=11.3,
            amount_log_sigma=0.8,
            fee_cycle_amplitude=1.5,
            fee_cycle_period_blocks=12,
        )
        out = run_simulation(default_attrs, sc, seed=5)
        wires = [r.wire_bytes for r in out.records]
        pts = [r.pt_ms for r in out.records]
        assert len(set(wires)) > 1
        rho = stats.spearmanr(wires, pts).statistic
        assert rho > 0

    def test_hash_power_weights_bias_the_miner(self, default_attrs):
        sc = Scenario(node_count=3, run_blocks=40, tx_rate_per_s=0.0,
                      block_interval_ms=1000.0, blocks_per_period=40,
                      hash_power=(1.0, 0.0, 0.0))
        out = run_simulation(default_attrs, sc, seed=2)
        assert all(r.miner == 0 for r in out.records)

    def test_external_arrival_stream(self, default_attrs):
        times = tuple(range(1000, 41_000, 1000))  # 40 arrivals
        amounts = tuple(10_000.0 for _ in times)
        sc = Scenario(node_count=3, run_blocks=4, block_interval_ms=20_000.0,
                      tx_times_ms=times, tx_amounts=amounts,
                      blocks_per_period=2)
        out = run_simulation(default_attrs, sc, seed=3)
        # Every supplied transaction that arrived before the last block gets
        # confirmed exactly once under the shared-mempool assumption.
        assert out.total_tx <= len(times)
        assert out.total_tx > 0
        fee = 10_000.0 * default_attrs.a3_fee_percentage
        per_block = [r.reward / r.tx_count for r in out.records if r.tx_count]
        assert all(f == pytest.approx(fee) for f in per_block)

    def test_reward_series_aggregation(self, default_attrs):
        sc = Scenario(**TOY)
        out = run_simulation(default_attrs, sc, seed=31)
        assert out.reward_series is not None
        assert len(out.reward_series) == 3  # 12 blocks / 4 per period
        assert sum(out.reward_series.counts) == 12
        assert math.fsum(out.reward_series.rewards) == pytest.approx(
            math.fsum(r.reward for r in out.records)
        )
