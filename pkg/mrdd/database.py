import os
import json
import logging
from typing import Optional

from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from mrdd.config import output_root
from mrdd.models import Base, Run, RunStatus, Stage, StageCheckpoint, EpochLoss, MetricResult, AuditLog

logger = logging.getLogger(__name__)

engine = None
SessionLocal = None


def default_database_url() -> str:
    return os.getenv("DATABASE_URL", f"sqlite:///{output_root() / 'mrdd.db'}")


def configure_database(url: Optional[str] = None):
    """Create the engine and session factory; call again to point at another database"""
    global engine, SessionLocal
    url = url or default_database_url()
    if url.startswith("sqlite"):
        path = url[len("sqlite:///"):] if url.startswith("sqlite:///") else ""
        if path and path != ":memory:":
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        engine = create_engine(
            url,
            connect_args={"check_same_thread": False},
            poolclass=StaticPool,
            echo=False
        )
    else:
        engine = create_engine(url, echo=False)
    SessionLocal = sessionmaker(autocommit=False, autoflush=False, expire_on_commit=False, bind=engine)
    return engine


def init_database(url: Optional[str] = None):
    """Initialize the database and create all tables"""
    try:
        if engine is None or url:
            configure_database(url)
        Base.metadata.create_all(bind=engine)
        logger.info("Run registry initialized")
        return True
    except Exception as e:
        logger.error(f"Failed to initialize database: {e}")
        return False


def get_db_session():
    """Get database session for direct use"""
    if SessionLocal is None:
        init_database()
    return SessionLocal()


def _stage(stage):
    return stage if isinstance(stage, Stage) else Stage(str(getattr(stage, "value", stage)))


def _status(status):
    return status if isinstance(status, RunStatus) else RunStatus(str(getattr(status, "value", status)))


def create_run(run_id, name, config_hash, **kwargs):
    """Create a new run record"""
    db = get_db_session()
    try:
        run = Run(run_id=run_id, name=name, config_hash=config_hash, **kwargs)
        db.add(run)
        db.commit()
        db.refresh(run)
        return run
    except Exception as e:
        db.rollback()
        logger.error(f"Failed to create run: {e}")
        return None
    finally:
        db.close()


def get_run(run_id):
    db = get_db_session()
    try:
        return db.query(Run).filter(Run.run_id == run_id).first()
    except Exception as e:
        logger.error(f"Failed to get run: {e}")
        return None
    finally:
        db.close()


def update_run(run_id, **kwargs):
    """Update run fields; status may be given as a RunStatus or its value"""
    db = get_db_session()
    try:
        run = db.query(Run).filter(Run.run_id == run_id).first()
        if run:
            if "status" in kwargs:
                kwargs["status"] = _status(kwargs["status"])
            for key, value in kwargs.items():
                setattr(run, key, value)
            db.commit()
            return run
        return None
    except Exception as e:
        db.rollback()
        logger.error(f"Failed to update run: {e}")
        return None
    finally:
        db.close()


def _run_pk(db, run_id):
    run = db.query(Run).filter(Run.run_id == run_id).first()
    if run is None:
        raise ValueError(f"Unknown run '{run_id}'")
    return run.id


def add_checkpoint(run_id, stage, path, parameter_hash=None):
    db = get_db_session()
    try:
        checkpoint = StageCheckpoint(run_pk=_run_pk(db, run_id), stage=_stage(stage), path=str(path),
                                     parameter_hash=parameter_hash)
        db.add(checkpoint)
        db.commit()
        return checkpoint
    except Exception as e:
        db.rollback()
        logger.error(f"Failed to add checkpoint: {e}")
        return None
    finally:
        db.close()


def add_epoch_loss(run_id, stage, record):
    """Store one loss-curve row; per-view recon_<i> keys are packed into a JSON list"""
    db = get_db_session()
    try:
        recon = [record[k] for k in sorted((k for k in record if k.startswith("recon_")), key=lambda k: int(k[6:]))]
        club = [v for k, v in record.items() if k.startswith("club_")]
        row = EpochLoss(
            run_pk=_run_pk(db, run_id),
            stage=_stage(stage),
            epoch=int(record["epoch"]),
            total=float(record["total"]),
            kl=record.get("kl"),
            club=float(sum(club) / len(club)) if club else None,
            recon=json.dumps(recon),
            lr=record.get("lr"),
        )
        db.add(row)
        db.commit()
        return row
    except Exception as e:
        db.rollback()
        logger.error(f"Failed to add epoch loss: {e}")
        return None
    finally:
        db.close()


def add_metric_result(run_id, task, selector, metric, mean, variance=None, std=None, values=None):
    db = get_db_session()
    try:
        row = MetricResult(
            run_pk=_run_pk(db, run_id),
            task=task,
            selector=selector,
            metric=metric,
            mean=mean,
            variance=variance,
            std=std,
            values=json.dumps(list(values)) if values is not None else None,
        )
        db.add(row)
        db.commit()
        return row
    except Exception as e:
        db.rollback()
        logger.error(f"Failed to add metric result: {e}")
        return None
    finally:
        db.close()


def log_audit_event(action, resource_type, resource_id, **kwargs):
    """Log audit event"""
    db = get_db_session()
    try:
        audit_log = AuditLog(
            action=action,
            resource_type=resource_type,
            resource_id=resource_id,
            **kwargs
        )
        db.add(audit_log)
        db.commit()
        return audit_log
    except Exception as e:
        db.rollback()
        logger.error(f"Failed to log audit event: {e}")
        return None
    finally:
        db.close()


def get_run_history(limit=50):
    """Most recent runs first"""
    db = get_db_session()
    try:
        return db.query(Run).order_by(Run.created_at.desc(), Run.id.desc()).limit(limit).all()
    except Exception as e:
        logger.error(f"Failed to get run history: {e}")
        return []
    finally:
        db.close()


def get_epoch_losses(run_id, stage=None):
    db = get_db_session()
    try:
        query = db.query(EpochLoss).join(Run).filter(Run.run_id == run_id)
        if stage is not None:
            query = query.filter(EpochLoss.stage == _stage(stage))
        return query.order_by(EpochLoss.stage, EpochLoss.epoch).all()
    except Exception as e:
        logger.error(f"Failed to get epoch losses: {e}")
        return []
    finally:
        db.close()


def get_metric_results(run_id):
    db = get_db_session()
    try:
        return db.query(MetricResult).join(Run).filter(Run.run_id == run_id).order_by(MetricResult.id).all()
    except Exception as e:
        logger.error(f"Failed to get metric results: {e}")
        return []
    finally:
        db.close()


def get_checkpoints(run_id):
    db = get_db_session()
    try:
        return db.query(StageCheckpoint).join(Run).filter(Run.run_id == run_id).order_by(StageCheckpoint.id).all()
    except Exception as e:
        logger.error(f"Failed to get checkpoints: {e}")
        return []
    finally:
        db.close()
