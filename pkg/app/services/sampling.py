"""
app/services/sampling.py - Design-of-Experiments Sampling

Sample plans live in the unit hypercube [0, 1)^d and are mapped onto the
design space afterwards:

- uniform_random: i.i.d. uniform points
- lhs_maximin: Latin hypercube maximizing the minimum pairwise distance
- lhs_mincorr: Latin hypercube minimizing the largest column correlation

All randomness comes from numpy's PCG64 bit generator seeded with the plan
seed, so (method, n, d, seed, iters) fully determines a plan.

Latin hypercube points sit at stratum centers (k + 0.5) / n. Internally a
design is an integer matrix of stratum indices (one permutation of 0..n-1
per column), which keeps both objectives exact.

Improvement loop (both LHS methods), per iteration:
1. pick a column at random and a row at random (for maximin, a row of a
   closest pair)
2. evaluate swapping that row's stratum with every other row in the column
3. keep the best swap only if it strictly improves the objective
"""

from dataclasses import dataclass

import numpy as np
from loguru import logger

from app.core.errors import DimensionLimitExceededError, DimensionMismatchError
from app.core.run_config import MAX_DIMENSIONS, DesignSpaceSpec, SamplingMethod


@dataclass(frozen=True, eq=False)
class SamplePlan:
    points: np.ndarray  # (n, d) in [0, 1)
    method: SamplingMethod
    seed: int
    iters: int = 0
    # Primary objective at the start and after every accepted swap
    # (min pairwise distance for maximin, max |correlation| for mincorr)
    trace: tuple[float, ...] = ()

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _check(n: int, d: int) -> None:
    if not 1 <= d <= MAX_DIMENSIONS:
        raise DimensionLimitExceededError(d, MAX_DIMENSIONS)
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")


def uniform_random(n: int, d: int, seed: int) -> SamplePlan:
    """
    i.i.d. uniform points.

    Example:
        plan = uniform_random(100, 6, seed=7)
        plan.points.shape  # (100, 6)
    """
    _check(n, d)
    return SamplePlan(points=_rng(seed).random((n, d)), method=SamplingMethod.UNIFORM_RANDOM, seed=seed)


def random_lhs(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Random Latin hypercube as stratum indices (n, d)."""
    return np.column_stack([rng.permutation(n) for _ in range(d)]).astype(np.int64)


def lhs_points(strata: np.ndarray) -> np.ndarray:
    return (strata + 0.5) / strata.shape[0]


def is_latin_hypercube(points: np.ndarray) -> bool:
    """Each column has exactly one coordinate in each stratum [k/n, (k+1)/n)."""
    n = points.shape[0]
    if np.any(points < 0) or np.any(points >= 1):
        return False
    strata = np.floor(points * n).astype(np.int64)
    return all(np.array_equal(np.sort(strata[:, j]), np.arange(n)) for j in range(points.shape[1]))


# ============ Objectives ============

# Masks self-distances; far above any squared distance, with headroom for the swap deltas
_FAR = 1 << 62


def _pair_distances(strata: np.ndarray) -> np.ndarray:
    """Squared pairwise distances in stratum units with the diagonal masked, (n, n)."""
    d2 = np.zeros((len(strata), len(strata)), dtype=np.int64)
    for column in strata.T:
        d2 += (column[:, None] - column[None, :]) ** 2
    np.fill_diagonal(d2, _FAR)
    return d2


def _covariances(strata: np.ndarray) -> np.ndarray:
    """Column cross products of the doubled, centered strata, (d, d) integers."""
    x = 2 * strata - (strata.shape[0] - 1)
    return x.T @ x


def _covariance_scale(n: int) -> int:
    """Shared diagonal of _covariances; every column is a permutation of 0..n-1."""
    k = 2 * np.arange(n, dtype=np.int64) - (n - 1)
    return int(k @ k)


def _mincorr_key(cov: np.ndarray) -> tuple[int, float]:
    """(max |cov|, sum cov^2) over column pairs; smaller is better."""
    off = cov[np.triu_indices(cov.shape[0], k=1)]
    return int(np.abs(off).max()), float((off.astype(float) ** 2).sum())


def _best(first: np.ndarray, second: np.ndarray) -> int:
    """Index of the lexicographically largest (first, second) key."""
    return int(np.lexsort((second, first))[-1])


# ============ Latin Hypercubes ============


def _min_pairs(d2: np.ndarray) -> tuple[int, int]:
    """Smallest pair distance of a symmetric masked matrix and how many pairs attain it."""
    low = int(d2.min())
    if low >= _FAR:
        return _FAR, 0
    return low, int((d2 == low).sum()) // 2


def _maximin_swaps(d2: np.ndarray, v: np.ndarray, row: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Score every swap of v[row] with another entry of one column.

    Only the pairs touching one of the two swapped points change, and the
    distance between them does not. Those are rebuilt per partner from two
    rows; the untouched pairs are summarized once, so memory stays O(n^2).

    Returns:
        (partners (m,), minimum distance (m,), pairs at that distance (m,))
    """
    n = len(v)
    partners = np.delete(np.arange(n), row)
    idx = np.arange(len(partners))
    # Change of squared distance from `row` to every k when it takes the partner's value;
    # the partner's change is the negation
    delta = (v[partners, None] - v[None, :]) ** 2 - (v[row] - v[None, :]) ** 2

    # Pairs touching `row`, the swapped pair included
    rows_a = d2[row][None, :] + delta
    rows_a[idx, partners] = d2[row, partners]
    rows_a[:, row] = _FAR
    # Pairs touching the partner but not `row`
    rows_b = d2[partners] - delta
    rows_b[idx, row] = _FAR
    rows_b[idx, partners] = _FAR

    # Pairs touching neither point
    rest = d2.copy()
    rest[row, :] = _FAR
    rest[:, row] = _FAR
    rest_low, rest_total = _min_pairs(rest)
    rest_lows = np.full(len(partners), rest_low, dtype=np.int64)
    if rest_total:
        rest_counts = rest_total - (rest == rest_low).sum(axis=1)[partners]
        # Every closest pair touches this partner: at most two of them
        for k in np.flatnonzero(rest_counts == 0):
            b = partners[k]
            saved = rest[b].copy()
            rest[b, :] = _FAR
            rest[:, b] = _FAR
            rest_lows[k], rest_counts[k] = _min_pairs(rest)
            rest[b, :] = saved
            rest[:, b] = saved
    else:
        rest_counts = np.zeros(len(partners), dtype=np.int64)

    lows = np.minimum(np.minimum(rows_a.min(axis=1), rows_b.min(axis=1)), rest_lows)
    counts = (
        (rows_a == lows[:, None]).sum(axis=1)
        + (rows_b == lows[:, None]).sum(axis=1)
        + np.where(rest_lows == lows, rest_counts, 0)
    )
    return partners, lows, counts


def _refresh_distances(d2: np.ndarray, strata: np.ndarray, points: tuple[int, ...]) -> None:
    """Recompute the rows and columns of `points` in place."""
    for p in points:
        diff = strata - strata[p]
        dist = (diff * diff).sum(axis=1)
        d2[p, :] = dist
        d2[:, p] = dist
        d2[p, p] = _FAR


def lhs_maximin(n: int, d: int, seed: int, iters: int = 1000) -> SamplePlan:
    """
    Maximin Latin hypercube.

    Objective (maximized, lexicographic): minimum pairwise distance, then the
    negated number of pairs at that distance. Swaps always move a point of a
    closest pair, and the minimum distance never decreases along the trace.

    Example:
        plan = lhs_maximin(4, 2, seed=0)
        np.sort(np.floor(plan.points * 4), axis=0)  # [[0, 0], [1, 1], [2, 2], [3, 3]]
    """
    _check(n, d)
    rng = _rng(seed)
    strata = random_lhs(n, d, rng)
    if n < 2:
        return SamplePlan(lhs_points(strata), SamplingMethod.LHS_MAXIMIN, seed, iters, (0.0,))

    d2 = _pair_distances(strata)
    low, count = _min_pairs(d2)
    current = (low, -count)
    trace = [float(np.sqrt(low)) / n]

    for _ in range(iters):
        column = int(rng.integers(d))
        critical = np.unique(np.argwhere(d2 == d2.min()))
        row = int(critical[rng.integers(len(critical))])

        partners, lows, counts = _maximin_swaps(d2, strata[:, column], row)
        best = _best(lows, -counts)
        key = (int(lows[best]), -int(counts[best]))
        if key > current:
            b = int(partners[best])
            strata[[row, b], column] = strata[[b, row], column]
            _refresh_distances(d2, strata, (row, b))
            current = key
            trace.append(float(np.sqrt(key[0])) / n)

    logger.debug(f"lhs_maximin n={n} d={d} accepted={len(trace) - 1} min_distance={trace[-1]:.4f}")
    return SamplePlan(lhs_points(strata), SamplingMethod.LHS_MAXIMIN, seed, iters, tuple(trace))


def _mincorr_swaps(strata: np.ndarray, cov: np.ndarray, column: int, row: int) -> tuple[np.ndarray, ...]:
    """
    Score every swap of strata[row, column] with another entry of the column.

    A swap only moves the covariances of `column` with the other columns.

    Returns:
        (partners (m,), changed covariances (m, d - 1), max |cov| (m,), sum cov^2 (m,))
    """
    n, d = strata.shape
    partners = np.delete(np.arange(n), row)
    others = np.delete(np.arange(d), column)
    x = 2 * strata - (n - 1)

    shift = (x[partners, column] - x[row, column])[:, None] * (x[row, others][None, :] - x[partners][:, others])
    changed = cov[column, others][None, :] + shift

    rest = cov[np.ix_(others, others)][np.triu_indices(d - 1, k=1)]
    rest_top = int(np.abs(rest).max()) if rest.size else 0
    rest_total = float((rest.astype(float) ** 2).sum())

    tops = np.maximum(np.abs(changed).max(axis=1), rest_top)
    totals = (changed.astype(float) ** 2).sum(axis=1) + rest_total
    return partners, changed, tops, totals


def lhs_mincorr(n: int, d: int, seed: int, iters: int = 1000) -> SamplePlan:
    """
    Minimum-correlation Latin hypercube.

    Objective (minimized, lexicographic): largest absolute off-diagonal
    Pearson correlation between columns, then the sum of squared
    correlations. With d = 1 there are no pairs and the random LHS is returned.
    """
    _check(n, d)
    rng = _rng(seed)
    strata = random_lhs(n, d, rng)
    if d == 1 or n < 2:
        return SamplePlan(lhs_points(strata), SamplingMethod.LHS_MIN_CORR, seed, iters, (0.0,))

    # Integer covariances keep the incremental updates exact
    cov = _covariances(strata)
    scale = _covariance_scale(n)
    current = _mincorr_key(cov)
    trace = [current[0] / scale]

    for _ in range(iters):
        column = int(rng.integers(d))
        row = int(rng.integers(n))

        partners, changed, tops, totals = _mincorr_swaps(strata, cov, column, row)
        best = _best(-tops, -totals)
        key = (int(tops[best]), float(totals[best]))
        if key < current:
            b = int(partners[best])
            strata[[row, b], column] = strata[[b, row], column]
            others = np.delete(np.arange(d), column)
            cov[column, others] = changed[best]
            cov[others, column] = changed[best]
            current = key
            trace.append(key[0] / scale)

    logger.debug(f"lhs_mincorr n={n} d={d} accepted={len(trace) - 1} max_corr={trace[-1]:.4f}")
    return SamplePlan(lhs_points(strata), SamplingMethod.LHS_MIN_CORR, seed, iters, tuple(trace))


def sample(method: SamplingMethod, n: int, d: int, seed: int, iters: int = 1000) -> SamplePlan:
    match method:
        case SamplingMethod.UNIFORM_RANDOM:
            return uniform_random(n, d, seed)
        case SamplingMethod.LHS_MAXIMIN:
            return lhs_maximin(n, d, seed, iters)
        case SamplingMethod.LHS_MIN_CORR:
            return lhs_mincorr(n, d, seed, iters)
    raise ValueError(f"unknown sampling method {method}")


# ============ Design-space mapping ============


def _bounds(space: DesignSpaceSpec) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([p.min for p in space.parameters], dtype=np.float64)
    hi = np.array([p.max for p in space.parameters], dtype=np.float64)
    return lo, hi


def to_space(unit: np.ndarray, space: DesignSpaceSpec) -> np.ndarray:
    """Affine map of unit coordinates (n, d) onto [min, max] per parameter."""
    unit = np.atleast_2d(np.asarray(unit, dtype=np.float64))
    if unit.shape[1] != space.dimension:
        raise DimensionMismatchError(f"points have {unit.shape[1]} columns, design space has {space.dimension}")
    lo, hi = _bounds(space)
    # Clipped so u = 1 never lands one ulp past max
    return np.clip(lo + unit * (hi - lo), lo, hi)


def scale_to_space(plan: SamplePlan, space: DesignSpaceSpec) -> list[dict[str, float]]:
    """
    Parameter assignments (mm) for every point of the plan, in space order.

    Raises:
        DimensionMismatchError: If the plan's d differs from the space's dimension
    """
    values = to_space(plan.points, space)
    return [dict(zip(space.names, (float(v) for v in row))) for row in values]


def unit_from_space(values: np.ndarray, space: DesignSpaceSpec) -> np.ndarray:
    """Inverse of to_space."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[1] != space.dimension:
        raise DimensionMismatchError(f"values have {values.shape[1]} columns, design space has {space.dimension}")
    lo, hi = _bounds(space)
    return (values - lo) / (hi - lo)
