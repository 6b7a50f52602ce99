"""Reward-volatility and throughput metrics over simulated block series.

Volatility is the sample standard deviation of log-returns of per-period
average block rewards; the historical reference band below brackets a decade
of observed values and marks which optimizer solutions count as feasible.
All functions here are pure and stateless.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

__all__ = [
    "MIN_HIST_VOL",
    "MAX_HIST_VOL",
    "RewardSeries",
    "average_rewards",
    "volatility",
    "throughput",
    "write_blocks_csv",
    "read_blocks_csv",
    "write_summary_csv",
    "BLOCKS_CSV_COLUMNS",
]

# Observed yearly reward-volatility extremes, 2012-2021; used as the
# feasibility band for optimizer output.
MIN_HIST_VOL = 0.037647
MAX_HIST_VOL = 0.238111

BLOCKS_CSV_COLUMNS = ("height", "reward", "tx_count", "wire_bytes", "pt_ms")


@dataclass(frozen=True)
class RewardSeries:
    """Per-period totals: period indices, summed rewards, block counts."""

    periods: tuple[int, ...]
    rewards: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.periods) == len(self.rewards) == len(self.counts)):
            raise ValueError("periods, rewards, counts must have equal length")
        if len(self.periods) < 1:
            raise ValueError("a reward series needs at least one period")
        if any(b < 1 for b in self.counts):
            raise ValueError("every period must contain at least one block")
        if any(b <= a for a, b in zip(self.periods, self.periods[1:])):
            raise ValueError("period indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.periods)

    @classmethod
    def from_blocks(cls, records, blocks_per_period: int) -> "RewardSeries":
        """Aggregate block records into full periods of `blocks_per_period`.

        A trailing partial period is dropped so period totals stay comparable.
        """
        if blocks_per_period < 1:
            raise ValueError("blocks_per_period must be positive")
        records = list(records)
        n_full = len(records) // blocks_per_period
        if n_full < 1:
            raise ValueError(
                f"{len(records)} blocks do not fill one period of {blocks_per_period}"
            )
        periods, rewards, counts = [], [], []
        for p in range(n_full):
            chunk = records[p * blocks_per_period : (p + 1) * blocks_per_period]
            periods.append(p)
            rewards.append(math.fsum(r.reward for r in chunk))
            counts.append(len(chunk))
        return cls(tuple(periods), tuple(rewards), tuple(counts))


def average_rewards(series: RewardSeries) -> list[float]:
    """Per-period average reward: total reward / block count, elementwise."""
    if any(b == 0 for b in series.counts):
        raise ValueError("block count of zero in series")
    return [r / b for r, b in zip(series.rewards, series.counts)]


def volatility(series: RewardSeries) -> float:
    """Sample standard deviation of log-returns of period-average rewards.

    With returns r_i = ln(A_i / A_{i-1}), the result is
    sqrt(sum((r_i - mean)^2) / (n - 1)) over the n returns, so the series
    needs at least three periods (two returns) for the estimator to exist.
    """
    if len(series) < 2:
        raise ValueError("series too short: volatility needs at least two periods")
    averages = average_rewards(series)
    if any(a <= 0.0 for a in averages):
        raise ValueError("volatility undefined: non-positive average reward")
    returns = [math.log(b / a) for a, b in zip(averages, averages[1:])]
    n = len(returns)
    if n < 2:
        raise ValueError("series too short: need at least two log-returns")
    mean = math.fsum(returns) / n
    var = math.fsum((r - mean) ** 2 for r in returns) / (n - 1)
    return math.sqrt(var)


def throughput(outcome) -> float:
    """Main-chain transactions per simulated second."""
    if outcome.elapsed_ms <= 0:
        raise ValueError("throughput undefined for zero elapsed time")
    return outcome.total_tx / (outcome.elapsed_ms / 1000.0)


# -- CSV interchange ---------------------------------------------------------


def _fmt(value) -> str:
    # repr keeps the shortest roundtrip form; output must be byte-stable.
    return repr(value) if isinstance(value, float) else str(value)


def write_blocks_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BLOCKS_CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    _fmt(r.height),
                    _fmt(r.reward),
                    _fmt(r.tx_count),
                    _fmt(r.wire_bytes),
                    _fmt(r.pt_ms),
                ]
            )


@dataclass(frozen=True)
class BlockRow:
    """One row of a blocks CSV, mirroring the simulator's per-block record."""

    height: int
    reward: float
    tx_count: int
    wire_bytes: int
    pt_ms: float


def read_blocks_csv(path) -> list[BlockRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != BLOCKS_CSV_COLUMNS:
            raise ValueError(
                f"expected columns {','.join(BLOCKS_CSV_COLUMNS)}, "
                f"got {reader.fieldnames}"
            )
        for row in reader:
            rows.append(
                BlockRow(
                    height=int(row["height"]),
                    reward=float(row["reward"]),
                    tx_count=int(row["tx_count"]),
                    wire_bytes=int(row["wire_bytes"]),
                    pt_ms=float(row["pt_ms"]),
                )
            )
    return rows


def write_summary_csv(path, *, tps, vol, mean_wire_bytes, mean_pt_ms) -> None:
    """One-line run summary: throughput, volatility, mean size, mean PT."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tps", "volatility", "mean_wire_bytes", "mean_pt_ms"])
        writer.writerow([_fmt(tps), _fmt(vol), _fmt(mean_wire_bytes), _fmt(mean_pt_ms)])
