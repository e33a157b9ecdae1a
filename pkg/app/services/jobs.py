import logging
from datetime import datetime, timezone
from os import getenv
from pathlib import Path

from sqlmodel import Session

from app.config import build_run_config
from app.db import engine
from app.models import RunJob
from app.schemas import EpisodeResult
from app.services.experiment import execute_run

logger = logging.getLogger("fewshot_lab.jobs")

RUNS_DIR = Path(getenv("FEWSHOT_RUNS_DIR", "./runs"))


class JobNotFound(Exception):
    """Raised when a run job id is unknown."""


def _touch(session: Session, job: RunJob) -> None:
    job.updated_at = datetime.now(timezone.utc)
    session.add(job)
    session.commit()


def run_job(job_id: str) -> None:
    """
    Execute a queued RunJob: mark it running, run every episode, bump
    `processed` after each one and store the summary (or the error).
    Artifacts land in RUNS_DIR/<job_id>/.
    """
    with Session(engine) as session:
        job = session.get(RunJob, job_id)
        if job is None:
            raise JobNotFound(job_id)
        job.status = "running"
        _touch(session, job)

        try:
            cfg = build_run_config(job.config)
            job.total = cfg.run_episodes
            job.processed = 0
            _touch(session, job)

            def progress(_: EpisodeResult) -> None:
                job.processed += 1
                _touch(session, job)

            report = execute_run(cfg, RUNS_DIR / job_id, on_episode=progress)
            job.summary = {"E": report.episodes, "mean": report.mean, "ci95": report.ci95}
            job.status = "complete"
            _touch(session, job)
            logger.info(f"✅ job {job_id} complete: mean={report.mean:.4f}")
        except Exception as e:
            job.status = "failed"
            job.error = str(e)
            _touch(session, job)
            logger.error(f"❌ job {job_id} failed: {e}")
