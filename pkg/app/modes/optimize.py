"""
app/modes/optimize.py - Optimization Mode

Drives bo_loop with the drag pipeline as the objective and writes:

    {out}/history.csv        one row per evaluation ("initial" then "bo")
    {out}/summary.json       incumbent, failure count, last GP hyperparameters
    {out}/best_design.stl    surface of the incumbent
    {out}/cases/eval_NNNN/   external case directories (external backend)

The loop is sequential. When every evaluation fails, history.csv and
summary.json are still written before AllEvaluationsFailedError propagates.
"""

from pathlib import Path

from app.core.errors import AllEvaluationsFailedError
from app.core.logging import stage
from app.core.run_config import Mode, RunConfig
from app.services.bo import BoHistory, BoRecord, bo_loop, write_history_csv, write_history_summary
from app.services.pipeline import DesignEvaluator
from app.services.stl_io import save_stl
from app.services.storage import RunRecorder, run_session

HISTORY_FILE = "history.csv"
SUMMARY_FILE = "summary.json"
BEST_DESIGN_FILE = "best_design.stl"


def _write_history(history: BoHistory, root: Path, run: RunRecorder, config: RunConfig) -> None:
    run.artifact(write_history_csv(history, root / HISTORY_FILE))
    extra = {"rng_seed": config.rng_seed, "kappa": config.optimizer.kappa if config.optimizer else None}
    run.artifact(write_history_summary(history, root / SUMMARY_FILE, extra))


def run_optimize(config: RunConfig, out_dir: str | Path | None = None) -> BoHistory:
    """
    Minimize drag over the design space with Bayesian optimization.

    Args:
        config: Run configuration with mode=Optimize
        out_dir: Overrides config.output_dir

    Returns:
        The BoHistory (exactly optimizer.budget records)

    Raises:
        AllEvaluationsFailedError: If no design could be evaluated
    """
    if config.mode != Mode.OPTIMIZE or config.optimizer is None:
        raise ValueError(f"run_optimize needs mode=Optimize, got {config.mode.value}")
    root = Path(out_dir or config.output_dir)

    with run_session(config, root) as run:
        evaluator = DesignEvaluator(config)
        evaluations = 0

        def objective(params: dict[str, float]) -> float:
            nonlocal evaluations
            evaluations += 1
            result = evaluator.evaluate(params, root / "cases" / f"eval_{evaluations:04d}")
            run.add_timings(result.timings)
            return result.drag

        def on_record(record: BoRecord) -> None:
            if record.status != "ok":
                run.failed(record.status)

        try:
            with stage("optimize", run.timings):
                history = bo_loop(objective, config.design, config.optimizer, config.rng_seed, on_record)
        except AllEvaluationsFailedError as e:
            _write_history(e.history, root, run, config)
            raise

        _write_history(history, root, run, config)
        incumbent = history.incumbent
        if incumbent is not None:
            run.artifact(save_stl(evaluator.build(incumbent.params), root / BEST_DESIGN_FILE))

    return history
