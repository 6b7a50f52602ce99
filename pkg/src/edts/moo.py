"""Reference-direction evolutionary optimizer over the strategy attributes.

Unified NSGA-III: niching-based tournament selection over parents associated
with well-spaced reference directions, simulated-binary crossover and
polynomial mutation, nondominated sorting of the merged population, and a
niche-preserving survival stage that fills the last front direction by
direction.  Two objectives are minimized: reward volatility and negated
throughput.

Every stochastic stage draws from its own generator derived from
(seed, purpose, generation), so a run checkpointed after any generation can
be resumed and will finish bit-identically.  Population evaluation is a pure
map over independent simulation runs and may execute in parallel; the
evolutionary loop itself is sequential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics, netsim
from .dts import DtsAttributes, Priority
from .hashing import derive_u64

__all__ = [
    "ReferenceDirections",
    "ParetoPoint",
    "OptimizerConfig",
    "OptimizeResult",
    "s_energy_directions",
    "nondominated_sort",
    "niching_tournament",
    "normalize_objectives",
    "associate_and_survive",
    "optimize",
    "hypervolume_2d",
    "EdtsProblem",
    "attrs_from_position",
    "default_bounds",
    "ATTRIBUTE_ORDER",
]

_EPS = 1e-14
WORST_OBJECTIVE = float("inf")


@dataclass(frozen=True)
class ReferenceDirections:
    """Unit-simplex direction vectors; `converged` is False when the energy
    descent hit its iteration cap before settling."""

    directions: np.ndarray
    converged: bool = True

    def __len__(self) -> int:
        return len(self.directions)


@dataclass
class ParetoPoint:
    """One population member: position, objectives, and niching state."""

    position: np.ndarray
    objectives: tuple[float, ...] | None = None
    rank: int | None = None
    associated_direction: int | None = None
    perp_distance: float | None = None
    failed: bool = False
    eval_seed: int | None = None


@dataclass(frozen=True)
class OptimizerConfig:
    population: int = 100
    generations: int = 100
    lower_bounds: tuple[float, ...] = ()
    upper_bounds: tuple[float, ...] = ()
    sbx_eta: float = 30.0
    sbx_prob: float = 0.9
    pm_eta: float = 20.0
    pm_prob: float | None = None  # default 1 / gene count
    seed: int = 0
    direction_count: int | None = None  # default: population size
    objective_count: int = 2

    def __post_init__(self):
        if self.population < 2 or self.population % 2:
            raise ValueError("population must be even and at least 2")
        if self.generations < 0:
            raise ValueError("generations must be nonnegative")
        lo, hi = np.asarray(self.lower_bounds), np.asarray(self.upper_bounds)
        if lo.size == 0 or lo.shape != hi.shape:
            raise ValueError("lower/upper bounds must be nonempty and matched")
        if np.any(lo > hi):
            raise ValueError("each lower bound must not exceed its upper bound")

    @property
    def n_genes(self) -> int:
        return len(self.lower_bounds)

    @property
    def mutation_prob(self) -> float:
        return self.pm_prob if self.pm_prob is not None else 1.0 / self.n_genes


# -- reference directions -----------------------------------------------------


def s_energy_directions(
    objective_count: int,
    direction_count: int,
    *,
    seed: int = 0,
    iterations: int = 2000,
    tol: float = 1e-10,
) -> ReferenceDirections:
    """Well-spaced unit-simplex directions by pairwise-energy descent.

    Pairwise repulsion 1 / ||zi - zj||^s with s equal to the space dimension
    pushes a random simplex sample toward an even spread; the unit vectors
    are kept fixed as anchors.  Returns the best configuration found, with
    `converged` False if the iteration cap was reached while the energy was
    still moving.
    """
    m, count = objective_count, direction_count
    if m < 2:
        raise ValueError("objective_count must be at least 2")
    if count < m:
        raise ValueError("direction_count must be at least objective_count")
    anchors = np.eye(m)
    if count == m:
        return ReferenceDirections(anchors.copy(), converged=True)

    rng = np.random.Generator(np.random.PCG64(seed))
    free = rng.dirichlet(np.ones(m), size=count - m)
    s = float(m)
    step = 0.01
    energy = _pair_energy(np.vstack([anchors, free]), s)
    converged = False
    for _ in range(iterations):
        grad = _free_gradient(anchors, free, s)
        # Steepest descent inside the simplex: remove the component normal to
        # the plane sum(z) = 1, step, then project back onto the simplex.
        grad -= grad.mean(axis=1, keepdims=True)
        gnorm = np.max(np.abs(grad))
        if gnorm < tol:
            converged = True
            break
        trial_step = step
        improved = False
        for _ in range(30):
            candidate = _project_rows_to_simplex(free - trial_step * grad / gnorm)
            cand_energy = _pair_energy(np.vstack([anchors, candidate]), s)
            if cand_energy < energy:
                improved = True
                break
            trial_step *= 0.5
        if not improved:
            converged = True  # no descent direction left at float resolution
            break
        if abs(energy - cand_energy) < tol * abs(energy):
            free, energy = candidate, cand_energy
            converged = True
            break
        free, energy = candidate, cand_energy
        step = min(trial_step * 1.5, 0.1)
    return ReferenceDirections(np.vstack([anchors, free]), converged=converged)


def _pair_energy(points: np.ndarray, s: float) -> float:
    diff = points[:, None, :] - points[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))
    iu = np.triu_indices(len(points), k=1)
    dist = np.maximum(d[iu], 1e-12)
    return float(np.sum(dist**-s))


def _free_gradient(anchors: np.ndarray, free: np.ndarray, s: float) -> np.ndarray:
    pts = np.vstack([anchors, free])
    diff = free[:, None, :] - pts[None, :, :]
    d2 = np.sum(diff * diff, axis=2)
    # Self-distances (free point vs itself in pts) are zeroed out.
    w = np.where(d2 > 1e-24, np.maximum(d2, 1e-24) ** (-(s + 2) / 2.0), 0.0)
    return -s * np.sum(w[:, :, None] * diff, axis=1)


def _project_rows_to_simplex(rows: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the unit simplex."""
    n = rows.shape[1]
    sorted_rows = np.sort(rows, axis=1)[:, ::-1]
    cumsum = np.cumsum(sorted_rows, axis=1) - 1.0
    k = np.arange(1, n + 1)
    cond = sorted_rows - cumsum / k > 0
    rho = n - np.argmax(cond[:, ::-1], axis=1) - 1
    theta = cumsum[np.arange(len(rows)), rho] / (rho + 1)
    return np.maximum(rows - theta[:, None], 0.0)


# -- nondominated sorting -----------------------------------------------------


def _dominates(a, b) -> bool:
    better = False
    for x, y in zip(a, b):
        if x > y:
            return False
        if x < y:
            better = True
    return better


def nondominated_sort(points: list[ParetoPoint]) -> list[list[ParetoPoint]]:
    """Partition points into fronts and stamp 1-based ranks on them.

    Rank 1 holds points dominated by nobody; rank r points are dominated
    only by earlier ranks.  Domination means no-worse in every objective and
    strictly better in at least one (all objectives minimized).
    """
    for p in points:
        if p.objectives is None:
            raise ValueError("cannot sort unevaluated points")
    n = len(points)
    dominated_by: list[list[int]] = [[] for _ in range(n)]
    domination_count = [0] * n
    for i in range(n):
        oi = points[i].objectives
        for j in range(i + 1, n):
            oj = points[j].objectives
            if _dominates(oi, oj):
                dominated_by[i].append(j)
                domination_count[j] += 1
            elif _dominates(oj, oi):
                dominated_by[j].append(i)
                domination_count[i] += 1
    fronts: list[list[ParetoPoint]] = []
    current = [i for i in range(n) if domination_count[i] == 0]
    rank = 1
    while current:
        for i in current:
            points[i].rank = rank
        fronts.append([points[i] for i in current])
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                domination_count[j] -= 1
                if domination_count[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
        rank += 1
    return fronts


# -- selection ----------------------------------------------------------------


def _tournament(a: ParetoPoint, b: ParetoPoint, rng: np.random.Generator) -> ParetoPoint:
    if a.associated_direction != b.associated_direction:
        return a if rng.integers(2) == 0 else b
    if a.rank != b.rank:
        return a if a.rank < b.rank else b
    return a if a.perp_distance <= b.perp_distance else b


def niching_tournament(
    parents: list[ParetoPoint], rng: np.random.Generator
) -> list[ParetoPoint]:
    """Mating pool of len(parents) via two traversals of pairwise tournaments.

    Points paired across different reference directions meet a coin flip;
    within a niche the lower nondomination rank wins, and rank ties go to the
    point closer to the direction.  The first traversal uses the given order,
    the second a shuffled one, each contributing half the pool.
    """
    n = len(parents)
    if n % 2:
        raise ValueError("parent population must be even")
    for p in parents:
        if p.rank is None or p.associated_direction is None:
            raise ValueError("parents must be ranked and associated before selection")
    pool = [
        _tournament(parents[i], parents[i + 1], rng) for i in range(0, n, 2)
    ]
    order = rng.permutation(n)
    pool += [
        _tournament(parents[order[i]], parents[order[i + 1]], rng)
        for i in range(0, n, 2)
    ]
    return pool


# -- normalization and survival ----------------------------------------------


def normalize_objectives(points: list[ParetoPoint]) -> np.ndarray:
    """Min-translate objectives and scale by per-objective intercepts.

    The ideal point is the per-objective minimum; the extreme point of
    objective j is the population member with the largest translated value
    there, and the hyperplane through the extreme points yields the
    intercepts.  A degenerate axis falls back to the plain per-objective
    spread, or 1 if the spread is zero.  Failed evaluations normalize to a
    large constant so they never beat a finite point.
    """
    if not points:
        raise ValueError("population must be nonempty")
    objs = np.array([p.objectives for p in points], dtype=np.float64)
    finite = np.all(np.isfinite(objs), axis=1)
    out = np.full_like(objs, 1e9)
    if not np.any(finite):
        return out
    f = objs[finite]
    ideal = f.min(axis=0)
    translated = f - ideal
    m = objs.shape[1]
    intercepts = _intercepts(translated, m)
    out[finite] = translated / intercepts
    return out


def _intercepts(translated: np.ndarray, m: int) -> np.ndarray:
    fallback = translated.max(axis=0)
    fallback = np.where(fallback > _EPS, fallback, 1.0)
    if len(translated) < m:
        return fallback
    extreme_rows = [int(np.argmax(translated[:, j])) for j in range(m)]
    extremes = translated[extreme_rows]
    try:
        plane = np.linalg.solve(extremes, np.ones(m))
    except np.linalg.LinAlgError:
        return fallback
    with np.errstate(divide="ignore", over="ignore"):
        a = 1.0 / plane
    bad = ~np.isfinite(a) | (a <= _EPS)
    return np.where(bad, fallback, a)


def _associate(points: list[ParetoPoint], normalized: np.ndarray, directions: np.ndarray):
    """Attach each point to its nearest direction by perpendicular distance.

    d(s, w) = ||s - (w' s / ||w||^2) w||, the distance from s to the ray
    through the origin along w.
    """
    d_norm2 = np.sum(directions * directions, axis=1)
    coeff = normalized @ directions.T / d_norm2
    rejection = normalized[:, None, :] - coeff[:, :, None] * directions[None, :, :]
    dists = np.sqrt(np.sum(rejection * rejection, axis=2))
    nearest = np.argmin(dists, axis=1)
    for p, j, row in zip(points, nearest, dists):
        p.associated_direction = int(j)
        p.perp_distance = float(row[j])


def associate_and_survive(
    fronts: list[list[ParetoPoint]],
    directions: ReferenceDirections,
    K: int,
    rng: np.random.Generator,
) -> list[ParetoPoint]:
    """Select the next parent set from whole fronts plus K members of the last.

    All candidate points are normalized and associated first.  Niche counts
    over the already-accepted fronts steer which direction gets served next:
    an empty niche takes its closest last-front point, an occupied one a
    random associated point, and directions with no candidates drop out for
    the generation.  Each acceptance increments the niche count.
    """
    everyone = [p for front in fronts for p in front]
    normalized = normalize_objectives(everyone)
    _associate(everyone, normalized, directions.directions)

    accepted = [p for front in fronts[:-1] for p in front]
    last = list(fronts[-1])
    if K == 0:
        return accepted
    if K > len(last):
        raise AssertionError(f"cannot draw {K} survivors from a front of {len(last)}")

    rho: dict[int, int] = {}
    for p in accepted:
        rho[p.associated_direction] = rho.get(p.associated_direction, 0) + 1
    candidates: dict[int, list[ParetoPoint]] = {}
    for p in last:
        candidates.setdefault(p.associated_direction, []).append(p)

    survivors: list[ParetoPoint] = []
    for _ in range(K):
        live = list(candidates.keys())
        counts = [rho.get(j, 0) for j in live]
        low = min(counts)
        pool = [j for j, c in zip(live, counts) if c == low]
        j = pool[int(rng.integers(len(pool)))]
        group = candidates[j]
        if rho.get(j, 0) == 0:
            idx = min(range(len(group)), key=lambda i: group[i].perp_distance)
        else:
            idx = int(rng.integers(len(group)))
        survivors.append(group.pop(idx))
        if not group:
            del candidates[j]
        rho[j] = rho.get(j, 0) + 1
    return accepted + survivors


# -- variation ----------------------------------------------------------------


def _sbx_pair(x1, x2, lo, hi, eta, rng):
    c1, c2 = x1.copy(), x2.copy()
    for j in range(len(x1)):
        span = hi[j] - lo[j]
        if span <= 0 or rng.random() > 0.5 or abs(x1[j] - x2[j]) < _EPS:
            continue
        y1, y2 = min(x1[j], x2[j]), max(x1[j], x2[j])
        rand = rng.random()
        beta = 1.0 + 2.0 * (y1 - lo[j]) / (y2 - y1)
        alpha = 2.0 - beta ** -(eta + 1.0)
        if rand <= 1.0 / alpha:
            betaq = (rand * alpha) ** (1.0 / (eta + 1.0))
        else:
            betaq = (1.0 / (2.0 - rand * alpha)) ** (1.0 / (eta + 1.0))
        child1 = 0.5 * ((y1 + y2) - betaq * (y2 - y1))
        beta = 1.0 + 2.0 * (hi[j] - y2) / (y2 - y1)
        alpha = 2.0 - beta ** -(eta + 1.0)
        if rand <= 1.0 / alpha:
            betaq = (rand * alpha) ** (1.0 / (eta + 1.0))
        else:
            betaq = (1.0 / (2.0 - rand * alpha)) ** (1.0 / (eta + 1.0))
        child2 = 0.5 * ((y1 + y2) + betaq * (y2 - y1))
        child1 = min(max(child1, lo[j]), hi[j])
        child2 = min(max(child2, lo[j]), hi[j])
        if rng.random() < 0.5:
            child1, child2 = child2, child1
        c1[j], c2[j] = child1, child2
    return c1, c2


def _polynomial_mutation(x, lo, hi, eta, prob, rng):
    y = x.copy()
    for j in range(len(x)):
        span = hi[j] - lo[j]
        if span <= 0 or rng.random() > prob:
            continue
        u = rng.random()
        mut_pow = 1.0 / (eta + 1.0)
        if u <= 0.5:
            delta = (y[j] - lo[j]) / span
            val = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - delta) ** (eta + 1.0)
            deltaq = val**mut_pow - 1.0
        else:
            delta = (hi[j] - y[j]) / span
            val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - delta) ** (eta + 1.0)
            deltaq = 1.0 - val**mut_pow
        y[j] = min(max(y[j] + deltaq * span, lo[j]), hi[j])
    return y


def _make_offspring(pool, config: OptimizerConfig, rng) -> list[np.ndarray]:
    lo = np.asarray(config.lower_bounds, dtype=np.float64)
    hi = np.asarray(config.upper_bounds, dtype=np.float64)
    children: list[np.ndarray] = []
    for i in range(0, len(pool), 2):
        p1, p2 = pool[i].position, pool[i + 1].position
        if rng.random() <= config.sbx_prob:
            c1, c2 = _sbx_pair(p1, p2, lo, hi, config.sbx_eta, rng)
        else:
            c1, c2 = p1.copy(), p2.copy()
        children.append(_polynomial_mutation(c1, lo, hi, config.pm_eta, config.mutation_prob, rng))
        children.append(_polynomial_mutation(c2, lo, hi, config.pm_eta, config.mutation_prob, rng))
    return children


# -- main loop ----------------------------------------------------------------


@dataclass
class OptimizeResult:
    front: list[ParetoPoint]
    population: list[ParetoPoint]
    generations_run: int
    directions: ReferenceDirections
    evaluations: int = 0
    failures: int = 0


def _evaluate(positions, seeds, objective, pool_map) -> list[tuple]:
    mapper = pool_map if pool_map is not None else map
    return list(mapper(_eval_one, [(objective, p, s) for p, s in zip(positions, seeds)]))


def _eval_one(task):
    objective, position, seed = task
    try:
        return tuple(float(v) for v in objective(position, seed)), False
    except Exception:
        return None, True


def _rank_and_associate(points, directions):
    nondominated_sort(points)
    normalized = normalize_objectives(points)
    _associate(points, normalized, directions.directions)


def optimize(
    config: OptimizerConfig,
    objective,
    *,
    pool_map=None,
    checkpoint=None,
    resume=None,
) -> OptimizeResult:
    """Run the evolutionary loop and return the final rank-1 front.

    `objective(position, seed) -> (f1, f2)` must be pure; a raised exception
    marks the point failed and it is carried with worst-case objectives.
    `pool_map` may be an executor map for parallel evaluation; per-point
    seeds depend only on (config.seed, generation, index), so evaluation
    order cannot change results.  `checkpoint(gen, points)` fires after every
    generation; `resume=(gen, positions, objectives)` restarts from a stored
    checkpoint and finishes identically to the uninterrupted run.
    """
    directions = s_energy_directions(
        config.objective_count,
        config.direction_count or config.population,
        seed=derive_u64(config.seed, "directions"),
    )
    n = config.population
    evaluations = 0
    failures = 0

    if resume is not None:
        start_gen, positions, objs = resume
        if len(positions) != n or len(objs) != n:
            raise ValueError("resume population size does not match config")
        points = [
            ParetoPoint(position=np.array(p, dtype=np.float64), objectives=tuple(o))
            for p, o in zip(positions, objs)
        ]
        for p in points:
            p.failed = not all(math.isfinite(v) for v in p.objectives)
    else:
        start_gen = 0
        rng_init = np.random.Generator(np.random.PCG64(derive_u64(config.seed, "init")))
        lo = np.asarray(config.lower_bounds, dtype=np.float64)
        hi = np.asarray(config.upper_bounds, dtype=np.float64)
        positions = [lo + rng_init.random(config.n_genes) * (hi - lo) for _ in range(n)]
        seeds = [derive_u64(config.seed, "eval", 0, i) for i in range(n)]
        results = _evaluate(positions, seeds, objective, pool_map)
        evaluations += n
        points = []
        for pos, seed, (objs_i, failed) in zip(positions, seeds, results):
            failures += failed
            points.append(
                ParetoPoint(
                    position=pos,
                    objectives=objs_i if not failed else (WORST_OBJECTIVE,) * config.objective_count,
                    failed=failed,
                    eval_seed=seed,
                )
            )
        if checkpoint is not None:
            _rank_and_associate(points, directions)
            checkpoint(0, points)

    _rank_and_associate(points, directions)

    for gen in range(start_gen + 1, config.generations + 1):
        rng_tour = np.random.Generator(
            np.random.PCG64(derive_u64(config.seed, "tournament", gen))
        )
        rng_var = np.random.Generator(
            np.random.PCG64(derive_u64(config.seed, "variation", gen))
        )
        rng_surv = np.random.Generator(
            np.random.PCG64(derive_u64(config.seed, "survival", gen))
        )

        pool = niching_tournament(points, rng_tour)
        child_positions = _make_offspring(pool, config, rng_var)
        seeds = [derive_u64(config.seed, "eval", gen, i) for i in range(n)]
        results = _evaluate(child_positions, seeds, objective, pool_map)
        evaluations += n
        offspring = []
        for pos, seed, (objs_i, failed) in zip(child_positions, seeds, results):
            failures += failed
            offspring.append(
                ParetoPoint(
                    position=pos,
                    objectives=objs_i if not failed else (WORST_OBJECTIVE,) * config.objective_count,
                    failed=failed,
                    eval_seed=seed,
                )
            )

        merged = points + offspring
        fronts = nondominated_sort(merged)
        taken: list[list[ParetoPoint]] = []
        size = 0
        for front in fronts:
            taken.append(front)
            size += len(front)
            if size >= n:
                break
        K = n - (size - len(taken[-1]))
        points = associate_and_survive(taken, directions, K, rng_surv)
        # Survivors keep the ranks of the merged sort; refresh both rank and
        # association so the next tournament sees a consistent view.
        _rank_and_associate(points, directions)
        if checkpoint is not None:
            checkpoint(gen, points)

    front = [p for p in points if p.rank == 1]
    front.sort(key=lambda p: p.objectives)
    return OptimizeResult(
        front=front,
        population=points,
        generations_run=config.generations,
        directions=directions,
        evaluations=evaluations,
        failures=failures,
    )


# -- indicators ----------------------------------------------------------------


def hypervolume_2d(objectives, ref: tuple[float, float]) -> float:
    """Dominated hypervolume for a biobjective minimization front.

    Points at or beyond the reference contribute nothing.  The dominated
    region is summed as vertical strips between consecutive steps of the
    nondominated staircase.
    """
    pts = [
        (f1, f2)
        for f1, f2 in objectives
        if f1 < ref[0] and f2 < ref[1] and math.isfinite(f1) and math.isfinite(f2)
    ]
    if not pts:
        return 0.0
    pts.sort()
    stair: list[tuple[float, float]] = []
    best_f2 = math.inf
    for f1, f2 in pts:
        if f2 < best_f2:
            stair.append((f1, f2))
            best_f2 = f2
    hv = 0.0
    for i, (f1, f2) in enumerate(stair):
        next_x = stair[i + 1][0] if i + 1 < len(stair) else ref[0]
        hv += (next_x - f1) * (ref[1] - f2)
    return hv


# -- the strategy-search problem ------------------------------------------------

ATTRIBUTE_ORDER = ("a1", "a2", "a3", "a4", "a5", "a6", "a7", "a8", "a9")


def default_bounds() -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Search box per attribute; a2/a4 ride as reals thresholded at 0.5."""
    lower = (1e3, 0.0, 0.001, 0.0, 0.0, 0.0, 1.0, 0.0, 0.05)
    upper = (1e6, 1.0, 1.0, 1.0, 5e4, 5e3, 128.0, 15.0, 3.0)
    return lower, upper


def attrs_from_position(position) -> DtsAttributes:
    """Decode a 9-gene vector into strategy attributes.

    The discrete genes (priority, small-fee reservation) threshold at 0.5 so
    one real-coded variation pipeline serves all nine genes.
    """
    p = np.asarray(position, dtype=np.float64)
    if p.shape != (9,):
        raise ValueError(f"expected 9 genes, got shape {p.shape}")
    return DtsAttributes(
        a1_mempool_size=max(1, int(round(p[0]))),
        a2_priority=Priority.FEE_BASED if p[1] >= 0.5 else Priority.TIME_BASED,
        a3_fee_percentage=float(p[2]),
        a4_designated_small_space=bool(p[3] >= 0.5),
        a5_small_fee_threshold=float(p[4]),
        a6_small_fee_count_threshold=max(0, int(round(p[5]))),
        a7_max_leaf_space=float(p[6]),
        a8_scale_mu=float(p[7]),
        a9_shape_sigma=float(p[8]),
    )


@dataclass(frozen=True)
class EdtsProblem:
    """Objective adapter: run one simulation, score (volatility, -TPS)."""

    scenario: netsim.Scenario

    def __call__(self, position, seed: int) -> tuple[float, float]:
        attrs = attrs_from_position(position)
        outcome = netsim.run_simulation(attrs, self.scenario, seed)
        if outcome.reward_series is None:
            raise ValueError("run too short for a volatility estimate")
        vol = metrics.volatility(outcome.reward_series)
        return (vol, -outcome.tps)
