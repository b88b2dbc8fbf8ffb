import gc
import logging
from pathlib import Path
from typing import Dict, Optional

from .celery_app import celery
from ..crud import create_checkpoint, get_checkpoint
from ..exceptions import S2SError
from ..schemas import RunConfig, TrainTaskResult
from ..services.grid import Normalizer, compute_climatology, split_years
from ..services.gridded_file import load_split
from ..services.training import train_lead_model

log = logging.getLogger(__name__)


def loss_path(output_dir, lead: int) -> Path:
    return Path(output_dir) / f"loss_pm_{lead:02d}.csv"


def _train_lead(config: RunConfig, lead: int, resume: bool, steps: Optional[int], task_id: str) -> TrainTaskResult:
    series = load_split(config.paths.data_dir, "train")
    train_years = split_years(config.grid.start_year, config.grid.years)["train"]
    climatology = compute_climatology(series, train_years)

    previous = get_checkpoint(config.paths.checkpoint_dir, lead) if resume else None
    if resume and previous is None:
        log.warning(f"[Task ID: {task_id}] No checkpoint for PM_{lead}; training from scratch")
    normalizer = previous.model.normalizer if previous is not None else Normalizer.fit(series.values)

    result = train_lead_model(series, climatology, lead, config, normalizer, resume=previous, steps=steps)
    path = create_checkpoint(config.paths.checkpoint_dir, result.model, config, result.step, result.optimizer)

    losses = loss_path(config.paths.output_dir, lead)
    losses.parent.mkdir(parents=True, exist_ok=True)
    append = previous is not None and losses.is_file()
    result.loss_frame().to_csv(losses, mode="a" if append else "w", header=not append, index=False)

    return TrainTaskResult(
        status="SUCCESS",
        lead=lead,
        checkpoint=str(path),
        final_loss=result.final_loss if result.losses else None,
        steps=result.step,
    )


@celery.task(bind=True, name="train_lead_model")
def train_lead_task(self, config: Dict, lead: int, resume: bool = False, steps: Optional[int] = None) -> Dict:
    """Trains one PM_K from the run config (as a JSON dict), writes its
    checkpoint and loss rows, and returns a TrainTaskResult dict."""
    task_id = self.request.id
    log.info(f"[Task ID: {task_id}] Starting training of PM_{lead} (resume={resume})")
    try:
        result = _train_lead(RunConfig.model_validate(config), lead, resume, steps, task_id)
        log.info(f"[Task ID: {task_id}] PM_{lead} finished at step {result.steps}, loss {result.final_loss}")
    except S2SError as e:
        log.error(f"[Task ID: {task_id}] PM_{lead} failed: {e}")
        result = TrainTaskResult(status="FAILURE", lead=lead, error=str(e),
                                 error_type=type(e).__name__, exit_code=e.exit_code)
    except Exception as e:
        log.error(f"[Task ID: {task_id}] Unhandled exception training PM_{lead}: {e}", exc_info=True)
        result = TrainTaskResult(status="FAILURE", lead=lead, error=str(e)[:200],
                                 error_type=type(e).__name__, exit_code=1)

    gc.collect()
    return result.model_dump()
