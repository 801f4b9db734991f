"""
app/services/bo.py - Sequential Bayesian Optimization

Minimizes drag over the design space with a GP surrogate and the Lower
Confidence Bound acquisition:

    LCB(x) = mean(x) - kappa * sqrt(variance(x))

Loop (bo_loop):
1. Maximin LHS of `initial_samples` points, each evaluated
2. Until `budget` evaluations: fit GP → propose argmin LCB → evaluate → record

Evaluations that fail (mesh or solver errors) are recorded with their error
code and left out of the GP data. A run whose model-driven evaluations all
fail raises AllEvaluationsFailedError even when the initial design succeeded.
Work happens in unit-cube coordinates; the evaluator receives physical
parameter assignments (mm).
"""

import csv
import json
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel
from scipy.optimize import minimize_scalar
from scipy.stats import qmc

from app.core.errors import AllEvaluationsFailedError, AnvilError, IoFailureError, NonFiniteObjectiveError
from app.core.run_config import BoSpec, DesignSpaceSpec
from app.services.gp import GpModel, gp_fit
from app.services.sampling import lhs_maximin, to_space

# Proposals closer than this to an evaluated point are nudged away
DUPLICATE_TOL = 1e-9
POLISH_STARTS = 8
POLISH_SWEEPS = 3

Evaluator = Callable[[dict[str, float]], float]


# ============ Acquisition ============


def acquire_lcb(model: GpModel, x: np.ndarray, kappa: float) -> float:
    """
    LCB at one point (minimization convention).

    Example:
        mean 1.0, variance 4.0, kappa 2  ->  1 - 2 * 2 = -3
    """
    return float(lcb_batch(model, np.asarray(x, dtype=np.float64).reshape(1, -1), kappa)[0])


def lcb_batch(model: GpModel, X: np.ndarray, kappa: float) -> np.ndarray:
    mean, var = model.predict(X)
    return mean - kappa * np.sqrt(var)


@dataclass(frozen=True)
class Proposal:
    point: np.ndarray  # (d,) unit cube
    acquisition: float


def _nudge(x: np.ndarray, existing: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if len(existing) == 0:
        return x
    while np.min(np.linalg.norm(existing - x, axis=1)) <= DUPLICATE_TOL:
        x = np.clip(x + rng.normal(scale=1e-6, size=x.shape), 0.0, 1.0)
    return x


def propose_next(
    model: GpModel,
    kappa: float,
    seed: int,
    candidates: int = 2048,
    existing: np.ndarray | None = None,
) -> Proposal:
    """
    Approximate argmin of LCB over the unit cube.

    Args:
        model: Trained GP
        kappa: Exploration weight (>= 0)
        seed: Seed of the scrambled Sobol candidates and of any nudge
        candidates: Number of quasi-random candidates
        existing: Extra rows (besides the training rows) the proposal must avoid

    Returns:
        The proposal, never within 1e-9 of a training or existing row
    """
    d = model.X.shape[1]

    # 1. Quasi-random screen
    sobol = qmc.Sobol(d, scramble=True, seed=seed)
    power_of_two = candidates & (candidates - 1) == 0
    pool = sobol.random_base2(int(math.log2(candidates))) if power_of_two else sobol.random(candidates)
    values = lcb_batch(model, pool, kappa)
    starts = np.argsort(values, kind="stable")[:POLISH_STARTS]

    # 2. Coordinate-descent polish from the best candidates
    best_x, best_value = pool[starts[0]].copy(), float(values[starts[0]])
    for start in starts:
        x, value = pool[start].copy(), float(values[start])
        for _ in range(POLISH_SWEEPS):
            improved = False
            for i in range(d):
                def along(t: float, i: int = i) -> float:
                    trial = x.copy()
                    trial[i] = t
                    return acquire_lcb(model, trial, kappa)

                result = minimize_scalar(along, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-6})
                if result.fun < value:
                    x[i], value, improved = float(result.x), float(result.fun), True
            if not improved:
                break
        if value < best_value:
            best_x, best_value = x, value

    # 3. Keep away from evaluated points
    avoid = model.X if existing is None else np.vstack([model.X, np.atleast_2d(existing)])
    rng = np.random.Generator(np.random.PCG64(seed))
    best_x = _nudge(best_x, avoid, rng)
    return Proposal(point=best_x, acquisition=acquire_lcb(model, best_x, kappa))


# ============ History ============


class BoRecord(BaseModel):
    iteration: int  # 1-based evaluation index
    phase: str  # "initial" or "bo"
    unit: list[float]
    params: dict[str, float]  # mm
    drag: float | None = None  # N, None on failure
    best: float | None = None  # best drag so far, None until the first success
    acquisition: float | None = None
    status: str = "ok"  # "ok" or an error code
    hyperparameters: dict | None = None


@dataclass
class BoHistory:
    names: list[str]
    records: list[BoRecord] = field(default_factory=list)

    @property
    def evaluations(self) -> int:
        return len(self.records)

    @property
    def failures(self) -> int:
        return sum(1 for r in self.records if r.status != "ok")

    @property
    def incumbent(self) -> BoRecord | None:
        """Lowest-drag successful record (earliest on ties)."""
        ok = [r for r in self.records if r.drag is not None]
        return min(ok, key=lambda r: r.drag) if ok else None

    def successful(self) -> tuple[np.ndarray, np.ndarray]:
        ok = [r for r in self.records if r.drag is not None]
        d = len(self.names)
        X = np.array([r.unit for r in ok], dtype=np.float64).reshape(-1, d)
        y = np.array([r.drag for r in ok], dtype=np.float64)
        return X, y


def bo_loop(
    evaluator: Evaluator,
    space: DesignSpaceSpec,
    spec: BoSpec,
    seed: int,
    on_record: Callable[[BoRecord], None] | None = None,
) -> BoHistory:
    """
    Sequential Bayesian optimization (minimization).

    Args:
        evaluator: Maps a parameter assignment (mm) to drag (N)
        space: Design space; the GP works on its unit cube
        spec: Budget, initial samples, kappa and GP options
        seed: Run seed
        on_record: Called after every evaluation

    Returns:
        The full history; best-so-far is non-increasing

    Raises:
        AllEvaluationsFailedError: If no evaluation succeeded, or every evaluation
            after the initial design failed (history attached)
    """
    history = BoHistory(names=space.names)
    rng = np.random.Generator(np.random.PCG64(seed))

    def evaluate(unit: np.ndarray, phase: str, acquisition: float | None, hyper: dict | None) -> None:
        params = dict(zip(space.names, (float(v) for v in to_space(unit, space)[0])))
        iteration = history.evaluations + 1
        drag: float | None = None
        status = "ok"
        try:
            value = float(evaluator(params))
            if not math.isfinite(value):
                raise NonFiniteObjectiveError(f"evaluator returned {value}")
            drag = value
        except AnvilError as e:
            status = e.code
            logger.warning(f"evaluation {iteration} failed: {e.code}: {e}")

        previous = history.records[-1].best if history.records else None
        best = previous if drag is None else (drag if previous is None else min(previous, drag))
        record = BoRecord(
            iteration=iteration,
            phase=phase,
            unit=[float(v) for v in unit],
            params=params,
            drag=drag,
            best=best,
            acquisition=acquisition,
            status=status,
            hyperparameters=hyper,
        )
        history.records.append(record)
        logger.info(f"bo iteration={iteration} phase={phase} drag={drag} best={best}")
        if on_record is not None:
            on_record(record)

    # 1. Initial design
    initial = lhs_maximin(spec.initial_samples, space.dimension, seed, spec.lhs_iters).points
    for unit in initial:
        evaluate(unit, "initial", None, None)

    # 2. Model-driven proposals
    while history.evaluations < spec.budget:
        step_seed = seed + history.evaluations
        X, y = history.successful()
        evaluated = np.array([r.unit for r in history.records], dtype=np.float64)
        if len(y) == 0:
            evaluate(_nudge(rng.random(space.dimension), evaluated, rng), "bo", None, None)
            continue
        try:
            model = gp_fit(
                X,
                y,
                noise_variance=spec.noise_variance,
                isotropic=spec.isotropic,
                seed=step_seed,
                restarts=spec.restarts,
            )
        except AnvilError as e:
            logger.warning(f"surrogate fit failed ({e.code}); proposing a random point")
            evaluate(_nudge(rng.random(space.dimension), evaluated, rng), "bo", None, None)
            continue
        proposal = propose_next(model, spec.kappa, step_seed, spec.candidates, existing=evaluated)
        evaluate(proposal.point, "bo", proposal.acquisition, model.hyper.as_dict())

    if history.incumbent is None:
        raise AllEvaluationsFailedError(history)
    proposed = [r for r in history.records if r.phase == "bo"]
    if proposed and all(r.status != "ok" for r in proposed):
        raise AllEvaluationsFailedError(history, f"all {len(proposed)} model-driven evaluations failed")
    return history


# ============ Synthetic drag proxy ============

SYNTHETIC_OPTIMUM = np.array([0.30, 0.55, 0.40, 0.65, 0.50, 0.35, 0.60])
_SYNTHETIC_WEIGHTS = np.array([3.0, 2.5, 2.0, 1.5, 1.0, 0.8, 0.6])


def synthetic_drag(x: np.ndarray) -> float:
    """
    Smooth 7-d drag proxy on the unit cube (N).

    A weighted quadratic bowl with a mild periodic ripple; the global minimum
    of 1.0 sits at SYNTHETIC_OPTIMUM.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (7,):
        raise ValueError(f"synthetic_drag takes a 7-vector, got shape {x.shape}")
    delta = x - SYNTHETIC_OPTIMUM
    return float(1.0 + (_SYNTHETIC_WEIGHTS * delta**2).sum() + 0.05 * (np.sin(2 * np.pi * delta) ** 2).sum())


# ============ Writers ============


def write_history_csv(history: BoHistory, path: str | Path) -> Path:
    """One row per evaluation: iteration, phase, parameters..., drag_N, best_N, acquisition, status."""
    path = Path(path)
    header = ["iteration", "phase", *history.names, "drag_N", "best_N", "acquisition", "status"]

    def fmt(value: float | None) -> str:
        return "" if value is None else repr(float(value))

    try:
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for r in history.records:
                writer.writerow(
                    [r.iteration, r.phase, *(fmt(r.params[n]) for n in history.names),
                     fmt(r.drag), fmt(r.best), fmt(r.acquisition), r.status]
                )
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e
    return path


def write_history_summary(history: BoHistory, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    best = history.incumbent
    last_model = next((r.hyperparameters for r in reversed(history.records) if r.hyperparameters), None)
    summary = {
        "evaluations": history.evaluations,
        "failures": history.failures,
        "incumbent": (
            None if best is None else {"iteration": best.iteration, "params": best.params, "drag_N": best.drag}
        ),
        "hyperparameters": last_model,
        **(extra or {}),
    }
    try:
        path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e
    return path
