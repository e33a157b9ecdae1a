from datetime import datetime, timezone

from fastapi import APIRouter, BackgroundTasks, Depends, HTTPException
from sqlmodel import Session

from app.config import build_run_config
from app.db import get_session
from app.errors import ConfigError
from app.models import RunJob
from app.schemas import RunRequest, RunResponse, RunStatusResponse
from app.services.jobs import run_job

router = APIRouter()


@router.post("/runs", response_model=RunResponse)
def submit_run(
    req: RunRequest,
    bg: BackgroundTasks,
    session: Session = Depends(get_session),
):
    # 1) reject bad configs before anything is queued
    raw = dict(req.config)
    try:
        build_run_config(raw)
    except ConfigError as e:
        raise HTTPException(400, str(e))

    # 2) create the job record
    job = RunJob(
        status="queued",
        config=raw,
        created_at=datetime.now(timezone.utc),
        updated_at=datetime.now(timezone.utc),
    )
    session.add(job)
    session.commit()  # now job.id is populated

    # 3) enqueue background work, passing job.id
    bg.add_task(run_job, job.id)

    return RunResponse(job_id=job.id)


@router.get("/runs/{job_id}", response_model=RunStatusResponse)
def run_status(job_id: str, session: Session = Depends(get_session)):
    job = session.get(RunJob, job_id)
    if not job:
        raise HTTPException(404, "Job not found")
    return RunStatusResponse(
        job_id=job.id,
        status=job.status,
        total=job.total,
        processed=job.processed,
        error=job.error,
        summary=job.summary,
    )
