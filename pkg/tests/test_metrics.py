"""Reward averaging, log-return volatility, throughput, CSV interchange."""

import math
import random
from dataclasses import dataclass

import numpy as np
import pytest

from edts.metrics import (
    MAX_HIST_VOL,
    MIN_HIST_VOL,
    RewardSeries,
    average_rewards,
    read_blocks_csv,
    throughput,
    volatility,
    write_blocks_csv,
    write_summary_csv,
)


def series(rewards, counts=None):
    n = len(rewards)
    counts = counts or [1] * n
    return RewardSeries(tuple(range(n)), tuple(float(r) for r in rewards), tuple(counts))


class TestAverageRewards:
    def test_single_division(self):
        assert average_rewards(series([100.0], [4])) == [25.0]

    def test_constant_ratio(self):
        s = series([10.0, 20.0, 30.0], [1, 2, 3])
        assert average_rewards(s) == [10.0, 10.0, 10.0]

    def test_random_series_elementwise(self):
        rnd = random.Random(5)
        rewards = [rnd.uniform(1, 1e6) for _ in range(50)]
        counts = [rnd.randrange(1, 300) for _ in range(50)]
        got = average_rewards(series(rewards, counts))
        for g, r, b in zip(got, rewards, counts):
            assert g == r / b


class TestVolatility:
    def test_constant_series_is_exactly_zero(self):
        assert volatility(series([7.0] * 10)) == 0.0

    def test_alternating_closed_form(self):
        e = math.e
        s = series([1.0, e, 1.0, e, 1.0])
        # Log-returns [1, -1, 1, -1], mean 0, sample variance 4/3.
        assert volatility(s) == pytest.approx(math.sqrt(4.0 / 3.0), rel=1e-15)

    def test_year_of_synthetic_samples_vs_numpy(self):
        rng = np.random.Generator(np.random.PCG64(12))
        averages = np.exp(rng.normal(4.0, 0.3, size=365))
        s = series(averages.tolist())
        returns = np.diff(np.log(averages))
        oracle = float(np.std(returns, ddof=1))
        assert volatility(s) == pytest.approx(oracle, rel=1e-12)

    def test_scale_invariance(self):
        rnd = random.Random(9)
        base = [rnd.uniform(1, 100) for _ in range(40)]
        s1 = volatility(series(base))
        s2 = volatility(series([b * 123.456 for b in base]))
        assert s2 == pytest.approx(s1, rel=1e-12)

    def test_nonnegative_and_zero_iff_constant(self):
        rnd = random.Random(2)
        for _ in range(20):
            vals = [rnd.uniform(1, 10) for _ in range(12)]
            v = volatility(series(vals))
            assert v >= 0.0
            if len(set(vals)) > 1:
                assert v > 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            volatility(series([1.0, 0.0, 2.0]))  # non-positive average
        with pytest.raises(ValueError):
            volatility(series([1.0, 2.0]))  # one return, estimator undefined
        with pytest.raises(ValueError):
            volatility(series([5.0]))  # single period, no returns at all
        with pytest.raises(ValueError):
            RewardSeries((0, 1), (1.0, 1.0), (1, 0))  # zero block count
        with pytest.raises(ValueError):
            RewardSeries((1, 0), (1.0, 1.0), (1, 1))  # periods not increasing


class TestHistoricalBand:
    def test_constants(self):
        assert MIN_HIST_VOL == 0.037647
        assert MAX_HIST_VOL == 0.238111
        assert MIN_HIST_VOL < MAX_HIST_VOL


@dataclass(frozen=True)
class FakeRecord:
    height: int
    reward: float
    tx_count: int
    wire_bytes: int
    pt_ms: float


@dataclass(frozen=True)
class FakeOutcome:
    total_tx: int
    elapsed_ms: int


class TestThroughput:
    def test_steady_state_rate(self):
        # 2100 transactions per block at 600-second intervals.
        out = FakeOutcome(total_tx=144 * 2100, elapsed_ms=144 * 600_000)
        assert throughput(out) == pytest.approx(3.5)

    def test_zero_transactions(self):
        assert throughput(FakeOutcome(0, 10_000)) == 0.0

    def test_manual_quotient(self):
        rnd = random.Random(3)
        total = rnd.randrange(1, 10**6)
        elapsed = rnd.randrange(1, 10**9)
        assert throughput(FakeOutcome(total, elapsed)) == total / (elapsed / 1000.0)

    def test_zero_elapsed(self):
        with pytest.raises(ValueError):
            throughput(FakeOutcome(10, 0))


class TestSeriesFromBlocks:
    def _records(self, n):
        rnd = random.Random(n)
        return [
            FakeRecord(i + 1, rnd.uniform(1, 1e5), rnd.randrange(1, 100), 500, 1.0)
            for i in range(n)
        ]

    def test_chunks_and_drops_the_tail(self):
        records = self._records(10)
        s = RewardSeries.from_blocks(records, 3)
        assert len(s) == 3  # 10 // 3 periods, last record dropped
        assert s.counts == (3, 3, 3)
        assert s.rewards[0] == pytest.approx(sum(r.reward for r in records[:3]))

    def test_too_few_blocks_for_one_period(self):
        with pytest.raises(ValueError):
            RewardSeries.from_blocks(self._records(4), 5)


class TestCsv:
    def test_blocks_roundtrip(self, tmp_path):
        records = [
            FakeRecord(1, 10.5, 3, 700, 12.25),
            FakeRecord(2, 0.125, 0, 650, 9.5),
        ]
        path = tmp_path / "blocks.csv"
        write_blocks_csv(records, path)
        assert path.read_text().splitlines()[0] == "height,reward,tx_count,wire_bytes,pt_ms"
        rows = read_blocks_csv(path)
        assert [(r.height, r.reward, r.tx_count, r.wire_bytes, r.pt_ms) for r in rows] == [
            (1, 10.5, 3, 700, 12.25),
            (2, 0.125, 0, 650, 9.5),
        ]

    def test_schema_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("height,reward\n1,2\n")
        with pytest.raises(ValueError):
            read_blocks_csv(path)

    def test_summary_layout(self, tmp_path):
        path = tmp_path / "summary.csv"
        write_summary_csv(path, tps=3.5, vol=0.05, mean_wire_bytes=900.0, mean_pt_ms=10.0)
        lines = path.read_text().splitlines()
        assert lines[0] == "tps,volatility,mean_wire_bytes,mean_pt_ms"
        assert lines[1] == "3.5,0.05,900.0,10.0"
