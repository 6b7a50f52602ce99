"""Command-line front end: single runs, the four-experiment protocol,
filter benchmarks, volatility summaries, and plot-data export.

Every run writes a manifest capturing the resolved configuration and seed;
`edts rerun --manifest <file>` replays it and reproduces the output tree
byte for byte.  Exit codes: 0 success, 2 configuration error, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, codec, metrics, moo, netsim
from .config import (
    ALL_KEYS,
    ATTRIBUTE_KEYS,
    ConfigError,
    LOADER_KEYS,
    OPTIMIZER_KEYS,
    SCENARIO_KEYS,
    attrs_from_config,
    optimizer_from_config,
    parse_kv_file,
    scenario_from_config,
    typed_config,
)
from .cuckoo import CuckooFilter, FilterParams, space_cost_bits
from .dts import Priority, Transaction
from .hashing import derive_u64
from .metrics import MAX_HIST_VOL, MIN_HIST_VOL

__all__ = [
    "LoadResult",
    "load_transactions",
    "ExperimentSpec",
    "run_experiment",
    "emit_plot_data",
    "main",
]

# Experiment grid over the two discrete attributes: (a2 gene, a4 gene).
EXPERIMENT_GRID = {
    1: (0.0, 0.0),  # time-based, no small-fee reservation
    2: (0.0, 1.0),  # time-based, reserved
    3: (1.0, 0.0),  # fee-based, no reservation
    4: (1.0, 1.0),  # fee-based, reserved
}

BLOCK_SIZE_CHOICES = (1_050_000, 2_100_000, 4_200_000)


# -- transaction data loading -------------------------------------------------


@dataclass(frozen=True)
class LoadResult:
    transactions: tuple[Transaction, ...]
    skipped: int


def load_transactions(
    path,
    *,
    a3: float = 0.1031,
    amount_column: str = "amount",
    timestamp_column: str = "timestamp",
    timestamp_unit: str = "s",
    size_bytes: int = 500,
) -> LoadResult:
    """Read user-supplied market data into transactions.

    Arrival times come from the timestamp column, shifted so the earliest row
    arrives at 1 ms; fees are synthesized as amount * a3.  Rows with a
    missing or unparsable amount or timestamp are skipped and counted.
    """
    scale = {"s": 1000.0, "ms": 1.0}.get(timestamp_unit)
    if scale is None:
        raise ConfigError(f"timestamp_unit must be 's' or 'ms', got {timestamp_unit!r}")
    rows = []
    skipped = 0
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read transaction data {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{path}: missing header row")
        for col in (amount_column, timestamp_column):
            if col not in reader.fieldnames:
                raise ConfigError(f"{path}: no column named {col!r}")
        for row in reader:
            try:
                amount = float(row[amount_column])
                stamp = float(row[timestamp_column])
            except (TypeError, ValueError):
                skipped += 1
                continue
            if amount <= 0:
                skipped += 1
                continue
            rows.append((stamp, amount))
    if not rows:
        raise ConfigError(f"{path}: no usable rows")
    rows.sort()
    t0 = rows[0][0]
    txs = []
    for i, (stamp, amount) in enumerate(rows):
        arrival = int(round((stamp - t0) * scale)) + 1
        txs.append(
            Transaction.create(
                amount=amount,
                fee=amount * a3,
                arrival_time=arrival,
                size_bytes=size_bytes,
                entropy=i,
            )
        )
    return LoadResult(transactions=tuple(txs), skipped=skipped)


# -- output helpers -----------------------------------------------------------


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def _write_manifest(out_dir: Path, command: str, seed: int, cfg: dict, extra=None):
    payload = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": {k: cfg[k] for k in sorted(cfg)},
    }
    if extra:
        payload.update(extra)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_checkpoint(path: Path, gen: int, points) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["generation", "index"]
            + [f"g{i + 1}" for i in range(len(points[0].position))]
            + ["f1", "f2"]
        )
        for i, p in enumerate(points):
            writer.writerow(
                [gen, i]
                + [_fmt(float(v)) for v in p.position]
                + [_fmt(p.objectives[0]), _fmt(p.objectives[1])]
            )


def read_checkpoint(path) -> tuple[int, list, list]:
    """Load (generation, positions, objectives) from a checkpoint CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        gens, positions, objectives = [], [], []
        for row in reader:
            gens.append(int(row["generation"]))
            genes = [float(row[k]) for k in reader.fieldnames if re.fullmatch(r"g\d+", k)]
            positions.append(np.array(genes))
            objectives.append((float(row["f1"]), float(row["f2"])))
    if not gens or len(set(gens)) != 1:
        raise ConfigError(f"{path}: not a single-generation checkpoint")
    return gens[0], positions, objectives


def _write_front_csv(path: Path, experiment_id: int, front) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["experiment", "a1", "a2", "a3", "a4", "a5", "a6", "a7", "a8", "a9",
             "volatility", "tps", "feasible"]
        )
        for p in front:
            attrs = moo.attrs_from_position(p.position)
            vol, neg_tps = p.objectives
            writer.writerow(
                [
                    experiment_id,
                    attrs.a1_mempool_size,
                    attrs.a2_priority.value,
                    _fmt(attrs.a3_fee_percentage),
                    attrs.a4_designated_small_space,
                    _fmt(attrs.a5_small_fee_threshold),
                    attrs.a6_small_fee_count_threshold,
                    _fmt(attrs.a7_max_leaf_space),
                    _fmt(attrs.a8_scale_mu),
                    _fmt(attrs.a9_shape_sigma),
                    _fmt(vol),
                    _fmt(-neg_tps),
                    MIN_HIST_VOL <= vol <= MAX_HIST_VOL,
                ]
            )


def _write_experiment_summary(path: Path, experiment_id: int, front) -> None:
    vols = [p.objectives[0] for p in front]
    tpss = [-p.objectives[1] for p in front]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["experiment", "tps_min", "tps_max", "volatility_min", "volatility_max"])
        if front:
            writer.writerow(
                [experiment_id, _fmt(min(tpss)), _fmt(max(tpss)), _fmt(min(vols)), _fmt(max(vols))]
            )


# -- experiment orchestration -------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    """One cell of the strategy grid plus everything needed to run it."""

    experiment_id: int
    scenario: netsim.Scenario
    optimizer: moo.OptimizerConfig
    out_dir: Path
    jobs: int = 1
    resume_from: str | None = None

    def __post_init__(self):
        if self.experiment_id not in EXPERIMENT_GRID:
            raise ConfigError(f"experiment id must be 1..4, got {self.experiment_id}")


def _pin_experiment_genes(cfg: moo.OptimizerConfig, experiment_id: int) -> moo.OptimizerConfig:
    a2, a4 = EXPERIMENT_GRID[experiment_id]
    lower = list(cfg.lower_bounds)
    upper = list(cfg.upper_bounds)
    lower[1] = upper[1] = a2
    lower[3] = upper[3] = a4
    return moo.OptimizerConfig(
        population=cfg.population,
        generations=cfg.generations,
        lower_bounds=tuple(lower),
        upper_bounds=tuple(upper),
        sbx_eta=cfg.sbx_eta,
        sbx_prob=cfg.sbx_prob,
        pm_eta=cfg.pm_eta,
        pm_prob=cfg.pm_prob,
        seed=cfg.seed,
        direction_count=cfg.direction_count,
        objective_count=cfg.objective_count,
    )


def run_experiment(spec: ExperimentSpec) -> moo.OptimizeResult:
    """Optimize one experiment and write its result files.

    Produces checkpoints/gen_*.csv per generation, front.csv with the final
    rank-1 set, summary.csv with the TPS and volatility ranges, and a
    manifest.  On failure, whatever was written stays on disk next to a
    FAILED marker describing the error.
    """
    out = spec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    cfg = _pin_experiment_genes(spec.optimizer, spec.experiment_id)
    problem = moo.EdtsProblem(scenario=spec.scenario)

    resume = None
    if spec.resume_from is not None:
        resume = read_checkpoint(spec.resume_from)

    def checkpoint(gen, points):
        _write_checkpoint(ckpt_dir / f"gen_{gen:04d}.csv", gen, points)

    try:
        if spec.jobs > 1:
            with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
                result = moo.optimize(
                    cfg, problem, pool_map=pool.map, checkpoint=checkpoint, resume=resume
                )
        else:
            result = moo.optimize(cfg, problem, checkpoint=checkpoint, resume=resume)
        _write_front_csv(out / "front.csv", spec.experiment_id, result.front)
        _write_experiment_summary(out / "summary.csv", spec.experiment_id, result.front)
    except Exception as exc:
        (out / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    return result


def emit_plot_data(run_dir, out_dir) -> dict[str, int]:
    """Convert run outputs into plot-ready CSVs.

    front.csv becomes scatter.csv (volatility, tps, feasibility, and the
    historical band for shading); blocks.csv becomes propagation.csv
    (block index, transaction count, propagation time).  Returns row counts
    per emitted file.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts: dict[str, int] = {}

    front_path = run_dir / "front.csv"
    if front_path.exists():
        with open(front_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        with open(out_dir / "scatter.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["volatility", "tps", "feasible", "min_hist_vol", "max_hist_vol"])
            for row in rows:
                writer.writerow(
                    [row["volatility"], row["tps"], row["feasible"],
                     _fmt(MIN_HIST_VOL), _fmt(MAX_HIST_VOL)]
                )
        counts["scatter.csv"] = len(rows)

    blocks_path = run_dir / "blocks.csv"
    if blocks_path.exists():
        records = metrics.read_blocks_csv(blocks_path)
        with open(out_dir / "propagation.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block_index", "tx_count", "pt_ms"])
            for i, r in enumerate(records):
                writer.writerow([i, r.tx_count, _fmt(r.pt_ms)])
        counts["propagation.csv"] = len(records)

    if not counts:
        raise ConfigError(f"{run_dir}: neither front.csv nor blocks.csv found")
    return counts


# -- subcommands ----------------------------------------------------------------


def _collect_config(args):
    cfg = parse_kv_file(args.config) if args.config else {}
    for key in ALL_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    if getattr(args, "block_size", None) is not None:
        cfg["block_size"] = str(args.block_size)
    return typed_config(cfg)


def _tx_stream_from_args(args, cfg):
    if not getattr(args, "tx_data", None):
        return None
    attrs = attrs_from_config(cfg)
    loaded = load_transactions(
        args.tx_data,
        a3=attrs.a3_fee_percentage,
        amount_column=cfg.get("amount_column", "amount"),
        timestamp_column=cfg.get("timestamp_column", "timestamp"),
        timestamp_unit=cfg.get("timestamp_unit", "s"),
        size_bytes=cfg.get("tx_size_bytes", 500),
    )
    if loaded.skipped:
        print(f"warning: skipped {loaded.skipped} unusable rows in {args.tx_data}",
              file=sys.stderr)
    times = [t.arrival_time for t in loaded.transactions]
    amounts = [t.amount for t in loaded.transactions]
    return times, amounts


def _cmd_simulate(args) -> int:
    cfg = _collect_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    attrs = attrs_from_config(cfg)
    scenario = scenario_from_config(cfg, tx_stream=_tx_stream_from_args(args, cfg))
    outcome = netsim.run_simulation(
        attrs, scenario, args.seed, collect_wires=args.dump_blocks
    )
    metrics.write_blocks_csv(outcome.records, out_dir / "blocks.csv")
    vol = float("nan")
    if outcome.reward_series is not None:
        try:
            vol = metrics.volatility(outcome.reward_series)
        except ValueError:
            pass  # too few periods for an estimate; summary keeps nan
    n = len(outcome.records)
    metrics.write_summary_csv(
        out_dir / "summary.csv",
        tps=outcome.tps,
        vol=vol,
        mean_wire_bytes=sum(r.wire_bytes for r in outcome.records) / n,
        mean_pt_ms=sum(r.pt_ms for r in outcome.records) / n,
    )
    if args.dump_blocks and outcome.wires:
        dump_dir = out_dir / "blocks"
        dump_dir.mkdir(exist_ok=True)
        for i, wire in enumerate(outcome.wires, start=1):
            (dump_dir / f"block_{i:04d}.bin").write_bytes(wire)
            block = codec.EfficientBlock.parse_wire(wire)
            with open(dump_dir / f"block_{i:04d}.json", "w") as fh:
                json.dump(
                    {
                        "tx_count": block.header.tx_count,
                        "wire_bytes": len(wire),
                        "filter_bytes": len(block.header.filter_bytes),
                        "inspectors": len(block.inspector_txs),
                        "reward": block.reward,
                        "merkle_root": block.header.merkle_root.hex(),
                        "parent_hash": block.header.parent_hash.hex(),
                    },
                    fh,
                    indent=2,
                    sort_keys=True,
                )
                fh.write("\n")
    _write_manifest(out_dir, "simulate", args.seed, cfg,
                    extra={"tx_data": args.tx_data, "dump_blocks": args.dump_blocks})
    print(f"simulated {n} blocks: tps={outcome.tps:.3f} "
          f"reconstruction_failures={outcome.reconstruction_failures} "
          f"orphans={outcome.orphans}")
    return 0


def _experiment_seed(base: int, experiment_id: int) -> int:
    return derive_u64(base, "experiment", experiment_id)


def _run_one_experiment(args, cfg, experiment_id: int, out_dir: Path) -> None:
    scenario = scenario_from_config(cfg, tx_stream=_tx_stream_from_args(args, cfg))
    opt = optimizer_from_config(cfg, _experiment_seed(args.seed, experiment_id))
    spec = ExperimentSpec(
        experiment_id=experiment_id,
        scenario=scenario,
        optimizer=opt,
        out_dir=out_dir,
        jobs=args.jobs,
        resume_from=getattr(args, "resume_from", None),
    )
    result = run_experiment(spec)
    _write_manifest(out_dir, "optimize", args.seed, cfg,
                    extra={"experiment": experiment_id, "tx_data": getattr(args, "tx_data", None)})
    front_vols = [p.objectives[0] for p in result.front]
    front_tps = [-p.objectives[1] for p in result.front]
    print(
        f"experiment {experiment_id}: front={len(result.front)} "
        f"tps=[{min(front_tps):.2f}, {max(front_tps):.2f}] "
        f"volatility=[{min(front_vols):.6f}, {max(front_vols):.6f}] "
        f"failures={result.failures}"
    )


def _cmd_optimize(args) -> int:
    cfg = _collect_config(args)
    out_dir = Path(args.out_dir)
    _run_one_experiment(args, cfg, args.experiment, out_dir)
    return 0


def _cmd_experiments(args) -> int:
    cfg = _collect_config(args)
    root = Path(args.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for experiment_id in (1, 2, 3, 4):
        _run_one_experiment(args, cfg, experiment_id, root / f"experiment_{experiment_id}")
    _write_manifest(root, "experiments", args.seed, cfg,
                    extra={"tx_data": getattr(args, "tx_data", None)})
    return 0


def _cmd_filter_bench(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    rng = np.random.Generator(np.random.PCG64(args.seed))
    for epsilon in args.epsilon:
        params = FilterParams(epsilon=epsilon, alpha=args.alpha, seed=args.seed)
        flt = CuckooFilter.for_capacity(params, args.items)
        inserted = {rng.bytes(32) for _ in range(args.items)}
        for item in inserted:
            if not flt.insert(item):
                raise RuntimeError("filter refused an insert below capacity")
        false_pos = 0
        probes = 0
        while probes < args.probes:
            probe = rng.bytes(32)
            if probe in inserted:
                continue
            probes += 1
            false_pos += flt.contains(probe)
        misses = sum(not flt.contains(x) for x in inserted)
        rows.append(
            {
                "epsilon": epsilon,
                "alpha": args.alpha,
                "items": args.items,
                "probes": probes,
                "false_positives": false_pos,
                "observed_fpr": false_pos / probes,
                "false_negatives": misses,
                "bits_per_item_bound": space_cost_bits(epsilon, args.alpha),
                "serialized_bytes": flt.serialized_size,
            }
        )
    with open(out_dir / "filter_bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    for row in rows:
        print(
            f"epsilon={row['epsilon']:g} fpr={row['observed_fpr']:.3e} "
            f"false_negatives={row['false_negatives']} "
            f"bytes={row['serialized_bytes']}"
        )
    return 0


def _cmd_volatility(args) -> int:
    records = metrics.read_blocks_csv(args.blocks_csv)
    series = metrics.RewardSeries.from_blocks(records, args.blocks_per_period)
    vol = metrics.volatility(series)
    tps = float("nan")
    if args.elapsed_ms is not None:
        total = sum(r.tx_count for r in records)
        tps = total / (args.elapsed_ms / 1000.0)
    n = len(records)
    metrics.write_summary_csv(
        args.out,
        tps=tps,
        vol=vol,
        mean_wire_bytes=sum(r.wire_bytes for r in records) / n,
        mean_pt_ms=sum(r.pt_ms for r in records) / n,
    )
    print(f"volatility={vol!r} over {len(series)} periods")
    return 0


def _cmd_plot_data(args) -> int:
    counts = emit_plot_data(args.run_dir, args.out_dir)
    for name, n in sorted(counts.items()):
        print(f"{name}: {n} rows")
    return 0


def _cmd_rerun(args) -> int:
    try:
        with open(args.manifest) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {args.manifest}: {exc}") from exc
    command = manifest.get("command")
    argv = [command, "--seed", str(manifest["seed"]), "--out-dir", args.out_dir]
    for key, value in manifest.get("config", {}).items():
        argv += [f"--{key.replace('_', '-')}", str(value)]
    if manifest.get("tx_data"):
        argv += ["--tx-data", manifest["tx_data"]]
    if manifest.get("experiment"):
        argv += ["--experiment", str(manifest["experiment"])]
    if command not in ("simulate", "optimize", "experiments"):
        raise ConfigError(f"manifest command {command!r} is not replayable")
    return main(argv)


# -- argument parsing -----------------------------------------------------------


def _add_config_flags(parser, keys) -> None:
    for key in sorted(keys):
        if key == "block_size":
            continue  # dedicated flag with pinned choices
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                            metavar="V", help=f"override config key {key}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edts",
        description="Filter-compressed block simulator and strategy optimizer",
    )
    parser.add_argument("--version", action="version", version=f"edts {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, jobs=False):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=0, help="master random seed")
        p.add_argument("--out-dir", required=True, help="output directory")
        if jobs:
            p.add_argument("--jobs", type=int, default=1,
                           help="parallel simulation evaluations")

    p = sub.add_parser("simulate", help="run one simulation with fixed attributes")
    common(p)
    p.add_argument("--tx-data", default=None, help="CSV of timestamped amounts")
    p.add_argument("--block-size", type=int, choices=BLOCK_SIZE_CHOICES, default=None)
    p.add_argument("--dump-blocks", type=int, default=0, metavar="N",
                   help="dump the first N block wire images")
    _add_config_flags(p, {**SCENARIO_KEYS, **ATTRIBUTE_KEYS, **LOADER_KEYS})
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("optimize", help="run one optimization experiment")
    common(p, jobs=True)
    p.add_argument("--experiment", type=int, choices=(1, 2, 3, 4), required=True)
    p.add_argument("--tx-data", default=None)
    p.add_argument("--block-size", type=int, choices=BLOCK_SIZE_CHOICES, default=None)
    p.add_argument("--resume-from", default=None, metavar="CSV",
                   help="continue from a generation checkpoint")
    _add_config_flags(p, {**SCENARIO_KEYS, **ATTRIBUTE_KEYS, **OPTIMIZER_KEYS, **LOADER_KEYS})
    p.set_defaults(func=_cmd_optimize)

    p = sub.add_parser("experiments", help="run all four experiments")
    common(p, jobs=True)
    p.add_argument("--tx-data", default=None)
    p.add_argument("--block-size", type=int, choices=BLOCK_SIZE_CHOICES, default=None)
    _add_config_flags(p, {**SCENARIO_KEYS, **ATTRIBUTE_KEYS, **OPTIMIZER_KEYS, **LOADER_KEYS})
    p.set_defaults(func=_cmd_experiments)

    p = sub.add_parser("filter-bench", help="false-positive and space benchmark")
    common(p)
    p.add_argument("--epsilon", type=float, nargs="+", default=[1e-2, 1e-3])
    p.add_argument("--alpha", type=float, default=0.955)
    p.add_argument("--items", type=int, default=100_000)
    p.add_argument("--probes", type=int, default=1_000_000)
    p.set_defaults(func=_cmd_filter_bench)

    p = sub.add_parser("volatility", help="volatility summary over a blocks CSV")
    p.add_argument("--blocks-csv", required=True)
    p.add_argument("--blocks-per-period", type=int, default=144)
    p.add_argument("--elapsed-ms", type=float, default=None,
                   help="simulated run length, for the TPS column")
    p.add_argument("--out", required=True, help="summary CSV path")
    p.set_defaults(func=_cmd_volatility)

    p = sub.add_parser("plot-data", help="emit plot-ready CSVs from a run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_plot_data)

    p = sub.add_parser("rerun", help="replay a previous run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_rerun)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: distinct exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
