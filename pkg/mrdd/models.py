from sqlalchemy import Column, Integer, String, DateTime, Text, Float, ForeignKey, Enum
from sqlalchemy.orm import declarative_base, relationship
from datetime import datetime
import enum

Base = declarative_base()


class RunStatus(enum.Enum):
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"
    FAILED = "failed"


class Stage(enum.Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(String(255), unique=True, index=True, nullable=False)
    name = Column(String(255), nullable=False)
    dataset = Column(String(500), nullable=True)
    config_hash = Column(String(64), index=True, nullable=False)
    status = Column(Enum(RunStatus), default=RunStatus.PENDING)
    failed_stage = Column(String(50), nullable=True)
    run_dir = Column(String(500), nullable=True)
    started_at = Column(DateTime, nullable=True)
    completed_at = Column(DateTime, nullable=True)
    duration_seconds = Column(Float, nullable=True)
    peak_rss_mb = Column(Float, nullable=True)
    error_message = Column(Text, nullable=True)
    report_path = Column(String(500), nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)

    # Relationships
    checkpoints = relationship("StageCheckpoint", back_populates="run")
    epoch_losses = relationship("EpochLoss", back_populates="run")
    metrics = relationship("MetricResult", back_populates="run")


class StageCheckpoint(Base):
    __tablename__ = "stage_checkpoints"

    id = Column(Integer, primary_key=True, index=True)
    run_pk = Column(Integer, ForeignKey("runs.id"), nullable=False)
    stage = Column(Enum(Stage), nullable=False)
    path = Column(String(500), nullable=False)
    parameter_hash = Column(String(64), nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)

    run = relationship("Run", back_populates="checkpoints")


class EpochLoss(Base):
    __tablename__ = "epoch_losses"

    id = Column(Integer, primary_key=True, index=True)
    run_pk = Column(Integer, ForeignKey("runs.id"), nullable=False)
    stage = Column(Enum(Stage), nullable=False)
    epoch = Column(Integer, nullable=False)
    total = Column(Float, nullable=False)
    kl = Column(Float, nullable=True)
    club = Column(Float, nullable=True)
    recon = Column(Text, nullable=True)  # JSON list, one entry per view
    lr = Column(Float, nullable=True)
    timestamp = Column(DateTime, default=datetime.utcnow)

    run = relationship("Run", back_populates="epoch_losses")


class MetricResult(Base):
    __tablename__ = "metric_results"

    id = Column(Integer, primary_key=True, index=True)
    run_pk = Column(Integer, ForeignKey("runs.id"), nullable=False)
    task = Column(String(50), nullable=False)  # 'clustering', 'classification', 'mi_audit'
    selector = Column(String(50), nullable=False)
    metric = Column(String(50), nullable=False)
    mean = Column(Float, nullable=False)
    variance = Column(Float, nullable=True)
    std = Column(Float, nullable=True)
    values = Column(Text, nullable=True)  # JSON list of per-run values
    created_at = Column(DateTime, default=datetime.utcnow)

    run = relationship("Run", back_populates="metrics")


class AuditLog(Base):
    __tablename__ = "audit_logs"

    id = Column(Integer, primary_key=True, index=True)
    action = Column(String(100), nullable=False)
    resource_type = Column(String(50), nullable=False)  # 'run', 'dataset', 'report'
    resource_id = Column(String(255), nullable=False)
    details = Column(Text, nullable=True)
    timestamp = Column(DateTime, default=datetime.utcnow)
