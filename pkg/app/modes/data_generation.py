"""
app/modes/data_generation.py - Data Generation Mode

Samples the design space and evaluates every sample:

    SamplePlan → parameters → DesignEvaluator → dataset.csv

- Per-sample failures become rows with the failure code; they never abort
  the run.
- Rows are flushed every sampling.batch_size samples.
- Samples run in a process pool when sampling.workers > 1; dataset rows
  stay ordered by sample index regardless of completion order.
- Re-running into the same output directory skips samples already present.
"""

import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

from loguru import logger

from app.core.config import settings
from app.core.errors import AnvilError
from app.core.logging import stage
from app.core.run_config import Mode, RunConfig
from app.services.pipeline import DesignEvaluator, attempt_count
from app.services.sampling import sample, scale_to_space
from app.services.storage import COLUMNS_FILE, DatasetRow, DatasetWriter, run_session


def evaluate_sample(
    evaluator: DesignEvaluator, index: int, params: dict[str, float], case_root: Path
) -> tuple[DatasetRow, dict[str, float]]:
    """Evaluate one sample into a dataset row; never raises AnvilError."""
    start = time.perf_counter()
    try:
        result = evaluator.evaluate(params, case_root / f"sample_{index:05d}")
    except AnvilError as e:
        logger.warning(f"sample {index} failed: {e.code}: {e}")
        row = DatasetRow(
            index=index,
            params=params,
            mesh_attempts=attempt_count(e),
            status=e.code,
            wall_time=time.perf_counter() - start,
        )
        return row, {}

    row = DatasetRow(
        index=index,
        params=params,
        mesh_attempts=len(result.attempts),
        drag=result.drag,
        wall_time=time.perf_counter() - start,
    )
    return row, result.timings


def run_data_generation(config: RunConfig, out_dir: str | Path | None = None) -> Path:
    """
    Generate a drag dataset over the configured design space.

    Args:
        config: Run configuration with mode=DataGeneration
        out_dir: Overrides config.output_dir

    Returns:
        Path of dataset.csv

    Raises:
        ValueError: If the config is not a data-generation config
        IoFailureError: If the output directory cannot be written
    """
    if config.mode != Mode.DATA_GENERATION or config.sampling is None:
        raise ValueError(f"run_data_generation needs mode=DataGeneration, got {config.mode.value}")
    sampling = config.sampling
    space = config.design
    root = Path(out_dir or config.output_dir)

    with run_session(config, root) as run:
        # 1. Sample plan
        with stage("sample", run.timings):
            plan = sample(sampling.method, sampling.count, space.dimension, config.rng_seed, sampling.iters)
            assignments = scale_to_space(plan, space)

        # 2. Evaluate what is not on disk yet
        evaluator = DesignEvaluator(config)
        writer = DatasetWriter(root, space.names, sampling.batch_size)
        todo = [i for i in range(sampling.count) if i not in writer.done]
        case_root = root / "cases"
        workers = min(sampling.workers, settings.max_workers)
        logger.info(f"data generation: {len(todo)} of {sampling.count} samples to evaluate, workers={workers}")

        def record(row: DatasetRow, timings: dict[str, float]) -> None:
            writer.add(row)
            run.add_timings(timings)
            if row.status != "ok":
                run.failed(row.status)

        if workers == 1:
            for i in todo:
                record(*evaluate_sample(evaluator, i, assignments[i], case_root))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(evaluate_sample, evaluator, i, assignments[i], case_root) for i in todo]
                for future in as_completed(futures):
                    record(*future.result())

        # 3. Final flush
        writer.close()
        run.artifact(writer.path)
        run.artifact(root / COLUMNS_FILE)

    return writer.path
