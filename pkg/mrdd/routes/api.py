from fastapi import APIRouter, HTTPException, BackgroundTasks
from fastapi.responses import FileResponse
from pydantic import BaseModel, ValidationError
from typing import List, Optional, Dict, Any
from datetime import datetime
import json
import os
import logging

from mrdd import __version__
from mrdd.config import ExperimentConfig, config_hash
from mrdd.database import (
    create_run, get_run, get_run_history, get_epoch_losses, get_metric_results, log_audit_event,
)
from mrdd.services.pipeline import generate_report, run_full

router = APIRouter()
logger = logging.getLogger(__name__)


class RunRequest(BaseModel):
    config: Dict[str, Any]
    run_id: Optional[str] = None


class RunResponse(BaseModel):
    run_id: str
    name: str
    dataset: Optional[str]
    config_hash: str
    status: str
    failed_stage: Optional[str]
    run_dir: Optional[str]
    started_at: Optional[datetime]
    completed_at: Optional[datetime]
    duration_seconds: Optional[float]
    peak_rss_mb: Optional[float]
    error_message: Optional[str]
    report_path: Optional[str]


class EpochLossResponse(BaseModel):
    stage: str
    epoch: int
    total: float
    kl: Optional[float]
    club: Optional[float]
    recon: List[float]
    lr: Optional[float]


class MetricResponse(BaseModel):
    task: str
    selector: str
    metric: str
    mean: float
    variance: Optional[float]
    std: Optional[float]
    values: List[float]


def _run_response(run) -> RunResponse:
    return RunResponse(
        run_id=run.run_id,
        name=run.name,
        dataset=run.dataset,
        config_hash=run.config_hash,
        status=run.status.value,
        failed_stage=run.failed_stage,
        run_dir=run.run_dir,
        started_at=run.started_at,
        completed_at=run.completed_at,
        duration_seconds=run.duration_seconds,
        peak_rss_mb=run.peak_rss_mb,
        error_message=run.error_message,
        report_path=run.report_path
    )


def _require_run(run_id: str):
    run = get_run(run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return run


@router.get("/health")
def api_health():
    """Health check endpoint"""
    return {"status": "healthy", "version": __version__, "timestamp": datetime.utcnow()}


@router.get("/runs", response_model=List[RunResponse])
def api_list_runs(limit: int = 50):
    """Run history, most recent first"""
    try:
        return [_run_response(run) for run in get_run_history(limit)]
    except Exception as e:
        logger.error(f"Failed to list runs: {e}")
        raise HTTPException(status_code=500, detail=str(e))


@router.get("/runs/{run_id}", response_model=RunResponse)
def api_get_run(run_id: str):
    return _run_response(_require_run(run_id))


@router.get("/runs/{run_id}/losses", response_model=List[EpochLossResponse])
def api_get_losses(run_id: str, stage: Optional[str] = None):
    _require_run(run_id)
    if stage is not None and stage not in ("stage1", "stage2"):
        raise HTTPException(status_code=400, detail="stage must be stage1 or stage2")
    return [EpochLossResponse(
        stage=row.stage.value,
        epoch=row.epoch,
        total=row.total,
        kl=row.kl,
        club=row.club,
        recon=json.loads(row.recon or "[]"),
        lr=row.lr
    ) for row in get_epoch_losses(run_id, stage)]


@router.get("/runs/{run_id}/metrics", response_model=List[MetricResponse])
def api_get_metrics(run_id: str):
    _require_run(run_id)
    return [MetricResponse(
        task=row.task,
        selector=row.selector,
        metric=row.metric,
        mean=row.mean,
        variance=row.variance,
        std=row.std,
        values=json.loads(row.values or "[]")
    ) for row in get_metric_results(run_id)]


def _run_in_background(config: ExperimentConfig, run_id: str):
    try:
        record = run_full(config, run_id=run_id)
        log_audit_event("api_run_finished", "run", run_id, details=f"status={record.status}")
    except Exception as e:
        logger.error(f"Background run {run_id} crashed: {e}")


@router.post("/runs", status_code=202)
def api_start_run(req: RunRequest, background_tasks: BackgroundTasks):
    """Validate a config and start run_full in the background"""
    try:
        config = ExperimentConfig.model_validate(req.config)
    except ValidationError as e:
        raise HTTPException(status_code=422, detail=json.loads(e.json()))
    digest = config_hash(config)
    run_id = req.run_id or f"{config.name}-{digest[:8]}-{datetime.utcnow().strftime('%Y%m%d_%H%M%S_%f')}"
    if get_run(run_id):
        raise HTTPException(status_code=409, detail="Run id already exists")
    # registered up front so the run is visible before the worker starts
    create_run(run_id, config.name, digest, dataset=config.dataset)
    log_audit_event("api_run_requested", "run", run_id, details=f"config_hash={digest}")
    background_tasks.add_task(_run_in_background, config, run_id)
    return {"run_id": run_id, "config_hash": digest, "status": "pending"}


@router.post("/runs/{run_id}/report")
def api_generate_report(run_id: str):
    run = _require_run(run_id)
    if not run.run_dir or not os.path.exists(os.path.join(run.run_dir, "record.json")):
        raise HTTPException(status_code=409, detail="Run has not produced a record yet")
    try:
        return generate_report(run.run_dir)
    except Exception as e:
        logger.error(f"Failed to generate report: {e}")
        raise HTTPException(status_code=500, detail=str(e))


@router.get("/runs/{run_id}/report")
def api_download_report(run_id: str):
    """Download the PDF report of a run"""
    run = _require_run(run_id)
    if not run.report_path:
        raise HTTPException(status_code=404, detail="Report not found")
    if not os.path.exists(run.report_path):
        raise HTTPException(status_code=404, detail="Report file not found")
    return FileResponse(
        run.report_path,
        media_type="application/pdf",
        filename=f"mrdd_report_{run_id}.pdf"
    )
