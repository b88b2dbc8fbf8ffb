from celery import Celery
from app.config import settings
import logging

logging.basicConfig(level=settings.log_level)
log = logging.getLogger(__name__)

log.info(f"Initializing Celery with broker: {settings.broker_url}")

celery = Celery(
    __name__,
    broker=settings.broker_url,
    backend=settings.result_backend,
)

celery.conf.update(
    task_track_started=True,
    broker_connection_retry_on_startup=True,
    task_serializer='json',
    result_serializer='json',
    accept_content=['json'],
    # One PM_K training per worker process; trainings are long and memory-heavy.
    worker_concurrency=1,
    worker_prefetch_multiplier=1,
    worker_max_tasks_per_child=1,
    task_acks_late=True,
    result_expires=7 * 24 * 3600,
    # The in-memory broker has no worker behind it: run tasks in-process.
    task_always_eager=settings.eager,
    task_eager_propagates=False,
)

celery.autodiscover_tasks(['app.worker'])

log.info("Celery instance configured and ready.")
