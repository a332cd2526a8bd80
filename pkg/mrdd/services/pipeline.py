"""
End-to-end orchestration: stage I, freeze, stage II, extraction, evaluation
and the MI audit, with every artifact written under one run directory and
recorded in the run registry. Sweeps and ablations are lists of run_full
cells executed through a bounded process pool.
"""

import json
import time
import logging
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import psutil
import torch
from pydantic import BaseModel, Field

from mrdd.config import ExperimentConfig, config_hash, output_root, override, save_config
from mrdd.database import (
    add_checkpoint, add_epoch_loss, add_metric_result, create_run, get_run, log_audit_event, update_run,
)
from mrdd.models import RunStatus
from mrdd.services.consistency import ConsistentModel, save_stage1, train_stage1
from mrdd.services.data import MultiViewDataset
from mrdd.services.disentangle import SpecificModel, save_stage2, train_stage2
from mrdd.services.evaluation import all_selectors, classify_eval, cluster_eval
from mrdd.services.latents import extract_latents
from mrdd.services.mi_audit import audit_redundancy
from mrdd.services.training import seed_everything
from mrdd.utils.report import (
    AUDIT_COLUMNS, COMPONENT_COLUMNS, DIMS_SWEEP_COLUMNS, MASK_SWEEP_COLUMNS, METRIC_COLUMNS,
    REPRESENTATION_COLUMNS, STRATEGY_COLUMNS, generate_json_report, generate_pdf_report, loss_columns, write_table,
)

logger = logging.getLogger(__name__)

RECORD_FILE = "record.json"
DEFAULT_MASK_RATIOS = [round(0.1 * k, 1) for k in range(10)]
DEFAULT_DC_LIST = [5, 10, 15, 20]
DEFAULT_DS_LIST = [5, 10, 15, 20, 40]


class RunRecord(BaseModel):
    run_id: str
    name: str
    config_hash: str
    status: Literal["completed", "failed"] = "completed"
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    run_dir: str
    dataset: str
    config_path: str
    checkpoints: Dict[str, str] = Field(default_factory=dict)
    encoder_hash: Optional[str] = None
    loss_curves: Dict[str, str] = Field(default_factory=dict)
    final_losses: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    latents_path: Optional[str] = None
    metrics: List[Dict[str, Any]] = Field(default_factory=list)
    metrics_path: Optional[str] = None
    mi_audit: List[Dict[str, Any]] = Field(default_factory=list)
    audit_path: Optional[str] = None
    started_at: str
    duration_seconds: float = 0.0
    peak_rss_mb: Optional[float] = None

    @property
    def success(self) -> bool:
        return self.status == "completed"

    def metric(self, task: str, metric: str, selector: Optional[str] = None) -> Optional[Dict[str, Any]]:
        for m in self.metrics:
            if m["task"] == task and m["metric"] == metric and (selector is None or m["selector"] == selector):
                return m
        return None

    def save(self) -> str:
        path = Path(self.run_dir) / RECORD_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.model_dump(mode="json"), f, indent=2)
        return str(path)

    @classmethod
    def load(cls, run_dir: Union[str, Path]) -> "RunRecord":
        path = Path(run_dir) / RECORD_FILE
        if not path.exists():
            raise FileNotFoundError(f"Run record not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls.model_validate(json.load(f))


def _registry(fn, *args, **kwargs):
    """Registry writes never abort a run"""
    try:
        return fn(*args, **kwargs)
    except Exception as e:
        logger.warning(f"Run registry unavailable ({fn.__name__}): {e}")
        return None


def _rss_mb() -> float:
    return psutil.Process().memory_info().rss / (1024 * 1024)


def _make_run_id(config: ExperimentConfig, digest: str) -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d_%H%M%S_%f")
    return f"{config.name}-{digest[:8]}-{stamp}"


def run_full(config: ExperimentConfig, progress_callback: Optional[Callable[[float, str], None]] = None,
             run_id: Optional[str] = None, stage1_mode: Literal["train", "random"] = "train",
             run_stage2: bool = True) -> RunRecord:
    """Stage I -> freeze -> stage II -> extract -> evaluate -> MI audit.

    stage1_mode="random" freezes an untrained consistent encoder and
    run_stage2=False evaluates c alone; both exist for the component
    ablations. A failing stage yields a RunRecord with status "failed".
    """
    digest = config_hash(config)
    run_id = run_id or _make_run_id(config, digest)
    run_dir = Path(config.output_dir or output_root()) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    config_path = save_config(config, run_dir / "config.json")
    start = time.time()
    peak = _rss_mb()
    record = RunRecord(run_id=run_id, name=config.name, config_hash=digest, run_dir=str(run_dir),
                       dataset=config.dataset, config_path=config_path,
                       started_at=datetime.now(timezone.utc).isoformat())

    if _registry(get_run, run_id) is None:
        _registry(create_run, run_id, config.name, digest, dataset=config.dataset, run_dir=str(run_dir))
    _registry(update_run, run_id, run_dir=str(run_dir))
    _registry(update_run, run_id, status=RunStatus.IN_PROGRESS, started_at=datetime.utcnow())
    _registry(log_audit_event, "run_started", "run", run_id, details=json.dumps({"config_hash": digest}))

    def progress(pct: float, msg: str):
        if progress_callback:
            progress_callback(pct, msg)
        logger.debug(f"Run {run_id}: {pct:.0f}% - {msg}")

    def scaled(offset: float, span: float):
        return lambda pct, msg: progress(offset + span * pct / 100.0, msg)

    stage = "data"
    try:
        dataset = MultiViewDataset.load(config.dataset)
        ckpt_dir = run_dir / "checkpoints"

        stage = "stage1"
        seed_everything(config.seed)
        consistent = ConsistentModel.from_dataset(dataset, config)
        if stage1_mode == "random":
            consistent.freeze()
            path = save_stage1(consistent, ckpt_dir / "stage1.pt", meta={"random_init": True})
            curve1 = []
        else:
            consistent, curve1 = train_stage1(
                consistent, dataset, config, device=config.device, checkpoint_dir=ckpt_dir,
                progress_callback=scaled(0, 40),
                epoch_callback=lambda rec: _registry(add_epoch_loss, run_id, "stage1", rec),
            )
            path = str(ckpt_dir / "stage1.pt")
        record.checkpoints["stage1"] = path
        record.encoder_hash = consistent.encoder_hash()
        _registry(add_checkpoint, run_id, "stage1", path, record.encoder_hash)
        if curve1:
            record.loss_curves["stage1"] = write_table(curve1, loss_columns(curve1), run_dir / "stage1_losses.csv",
                                                       config)
            record.final_losses["stage1"] = curve1[-1]
        peak = max(peak, _rss_mb())

        stage = "stage2"
        seed_everything(config.seed + 1)
        specific = SpecificModel.from_config(consistent, config)
        if run_stage2:
            specific, curve2 = train_stage2(
                specific, dataset, config, device=config.device, checkpoint_dir=ckpt_dir,
                progress_callback=scaled(40, 40),
                epoch_callback=lambda rec: _registry(add_epoch_loss, run_id, "stage2", rec),
            )
            path = str(ckpt_dir / "stage2.pt")
            record.loss_curves["stage2"] = write_table(curve2, loss_columns(curve2), run_dir / "stage2_losses.csv",
                                                       config)
            record.final_losses["stage2"] = curve2[-1]
        else:
            path = save_stage2(specific, ckpt_dir / "stage2.pt", meta={"untrained": True})
        record.checkpoints["stage2"] = path
        _registry(add_checkpoint, run_id, "stage2", path, specific.consistent.encoder_hash())
        peak = max(peak, _rss_mb())

        stage = "extract"
        latents = extract_latents(specific, dataset, batch_size=config.stage2.batch_size, device=config.device,
                                  meta={"config_hash": digest, "checkpoints": record.checkpoints})
        record.latents_path = str(latents.save(run_dir / "latents"))

        stage = "eval"
        progress(80, "Evaluating representations")
        selectors = config.eval.selectors if run_stage2 else ["c"]
        for selector in selectors:
            reports = {}
            reports.update({("clustering", k): v for k, v in cluster_eval(
                latents, selector, runs=config.eval.runs, seed=config.seed,
                max_iter=config.eval.kmeans_max_iter).items()})
            reports.update({("classification", k): v for k, v in classify_eval(
                latents, selector, runs=config.eval.runs, seed=config.seed, C=config.eval.svm_c).items()})
            for report in reports.values():
                row = report.model_dump()
                record.metrics.append(row)
                _registry(add_metric_result, run_id, row["task"], row["selector"], row["metric"], row["mean"],
                          row["variance"], row["std"], row["values"])
        record.metrics_path = write_table(record.metrics, METRIC_COLUMNS, run_dir / "metrics.csv", config)

        stage = "mi_audit"
        if config.audit_mi and run_stage2:
            if len(latents) >= 2 * config.mine.batch_size:
                rows = audit_redundancy(latents, config.mine, seed=config.seed, progress_callback=scaled(90, 10))
                record.mi_audit = [r.model_dump() for r in rows]
                record.audit_path = write_table(record.mi_audit, AUDIT_COLUMNS, run_dir / "mi_audit.csv", config)
                for r in rows:
                    _registry(add_metric_result, run_id, "mi_audit", f"s{r.view}", "mi_nats", r.mi_nats,
                              r.std ** 2, r.std, r.repeats)
            else:
                logger.warning(f"Skipping MI audit: {len(latents)} samples < 2 x MINE batch {config.mine.batch_size}")

        record.duration_seconds = time.time() - start
        record.peak_rss_mb = max(peak, _rss_mb())
        record.save()
        _registry(update_run, run_id, status=RunStatus.COMPLETED, completed_at=datetime.utcnow(),
                  duration_seconds=record.duration_seconds, peak_rss_mb=record.peak_rss_mb)
        _registry(log_audit_event, "run_completed", "run", run_id)
        progress(100, "Run complete")
        logger.info(f"Run {run_id} completed in {record.duration_seconds:.1f}s")
        return record

    except Exception as e:
        logger.error(f"Run {run_id} failed during {stage}: {e}")
        record.status = "failed"
        record.failed_stage = stage
        record.error = str(e)
        record.duration_seconds = time.time() - start
        record.peak_rss_mb = max(peak, _rss_mb())
        record.save()
        _registry(update_run, run_id, status=RunStatus.FAILED, failed_stage=stage, error_message=str(e),
                  completed_at=datetime.utcnow(), duration_seconds=record.duration_seconds,
                  peak_rss_mb=record.peak_rss_mb)
        _registry(log_audit_event, "run_failed", "run", run_id, details=json.dumps({"stage": stage, "error": str(e)}))
        return record


def _run_cell(config_data: Dict[str, Any], kwargs: Dict[str, Any]) -> Dict[str, Any]:
    # process-pool entry point: plain dicts in and out
    torch.set_num_threads(1)
    record = run_full(ExperimentConfig.model_validate(config_data), **kwargs)
    return record.model_dump(mode="json")


def run_cells(cells: Sequence[Tuple[ExperimentConfig, Dict[str, Any]]], max_parallel: int = 1) -> List[RunRecord]:
    """Execute independent run_full cells, at most `max_parallel` at a time; results keep cell order"""
    if max_parallel <= 1 or len(cells) <= 1:
        return [run_full(cfg, **kwargs) for cfg, kwargs in cells]
    with ProcessPoolExecutor(max_workers=max_parallel) as pool:
        futures = [pool.submit(_run_cell, cfg.model_dump(mode="json"), kwargs) for cfg, kwargs in cells]
        return [RunRecord.model_validate(f.result()) for f in futures]


def _sweep_dir(config: ExperimentConfig, kind: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d_%H%M%S")
    return Path(config.output_dir or output_root()) / f"{config.name}-{kind}-{stamp}"


def _with_output(config: ExperimentConfig, out_dir: Path, updates: Dict[str, Any]) -> ExperimentConfig:
    return override(config, {**updates, "output_dir": str(out_dir)})


def _mean_var(record: RunRecord, task: str, metric: str, selector: Optional[str]) -> Tuple[Any, Any]:
    m = record.metric(task, metric, selector) or record.metric(task, metric)
    return (m["mean"], m["variance"]) if m else (None, None)


def primary_selector(config: ExperimentConfig) -> str:
    """MRDD-cs when evaluated, otherwise the first configured selector"""
    return "cs1" if "cs1" in config.eval.selectors else config.eval.selectors[0]


def sweep_mask_ratio(config: ExperimentConfig, ratios: Optional[Sequence[float]] = None,
                     out_dir: Optional[Union[str, Path]] = None) -> str:
    """Classification ACC per mask ratio; returns the table path"""
    ratios = list(DEFAULT_MASK_RATIOS if ratios is None else ratios)
    out_dir = Path(out_dir) if out_dir else _sweep_dir(config, "mask")
    cells = [(_with_output(config, out_dir, {"mask.ratio": r}), {"run_id": f"{out_dir.name}_ratio_{r:g}"})
             for r in ratios]
    records = run_cells(cells, config.max_parallel)
    selector = primary_selector(config)
    rows = []
    for ratio, record in zip(ratios, records):
        acc, var = _mean_var(record, "classification", "acc", selector)
        rows.append({"ratio": ratio, "acc_cls": acc, "acc_cls_var": var, "run_dir": record.run_dir,
                     "status": record.status})
    return write_table(rows, MASK_SWEEP_COLUMNS, out_dir / "sweep_mask.csv", config,
                       extra={"ratios": ratios, "selector": selector})


def sweep_dims(config: ExperimentConfig, dc_list: Optional[Sequence[int]] = None,
               ds_list: Optional[Sequence[int]] = None, out_dir: Optional[Union[str, Path]] = None) -> str:
    """Clustering ACC over the (d_c, d_s) grid; returns the table path"""
    dc_list = list(DEFAULT_DC_LIST if dc_list is None else dc_list)
    ds_list = list(DEFAULT_DS_LIST if ds_list is None else ds_list)
    out_dir = Path(out_dir) if out_dir else _sweep_dir(config, "dims")
    grid = [(dc, ds) for dc in dc_list for ds in ds_list]
    cells = [(_with_output(config, out_dir, {"d_c": dc, "d_s": ds}), {"run_id": f"{out_dir.name}_dc{dc}_ds{ds}"})
             for dc, ds in grid]
    records = run_cells(cells, config.max_parallel)
    selector = primary_selector(config)
    rows = []
    for (dc, ds), record in zip(grid, records):
        acc, var = _mean_var(record, "clustering", "acc", selector)
        rows.append({"d_c": dc, "d_s": ds, "acc_clu": acc, "acc_clu_var": var, "run_dir": record.run_dir,
                     "status": record.status})
    return write_table(rows, DIMS_SWEEP_COLUMNS, out_dir / "sweep_dims.csv", config,
                       extra={"dc_list": dc_list, "ds_list": ds_list, "selector": selector})


COMPONENT_VARIANTS = {
    "full": ({}, {}),
    "only_stage1": ({}, {"run_stage2": False}),
    "only_stage2": ({}, {"stage1_mode": "random"}),
    "wo_mcp": ({"mask.ratio": 0.0}, {}),
    "wo_ld": ({"weights.lambda_d": 0.0}, {}),
    "wo_lr": ({"weights.lambda_r": 0.0}, {}),
}


def ablate_components(config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> str:
    out_dir = Path(out_dir) if out_dir else _sweep_dir(config, "components")
    names = list(COMPONENT_VARIANTS)
    cells = [(_with_output(config, out_dir, COMPONENT_VARIANTS[n][0]),
              {**COMPONENT_VARIANTS[n][1], "run_id": f"{out_dir.name}_{n}"})
             for n in names]
    records = run_cells(cells, config.max_parallel)
    selector = primary_selector(config)
    rows = []
    for name, record in zip(names, records):
        sel = "c" if name == "only_stage1" else selector
        acc, var = _mean_var(record, "classification", "acc", sel)
        clu, _ = _mean_var(record, "clustering", "acc", sel)
        nmi_mean, _ = _mean_var(record, "clustering", "nmi", sel)
        rows.append({"variant": name, "acc_cls": acc, "acc_cls_var": var, "acc_clu": clu, "nmi": nmi_mean,
                     "run_dir": record.run_dir, "status": record.status})
    return write_table(rows, COMPONENT_COLUMNS, out_dir / "ablate_components.csv", config,
                       extra={"variants": {n: {"overrides": COMPONENT_VARIANTS[n][0],
                                               "options": COMPONENT_VARIANTS[n][1]} for n in names}})


def ablate_mask_strategy(config: ExperimentConfig, ratio: float = 0.7,
                         out_dir: Optional[Union[str, Path]] = None) -> str:
    strategies = ["random", "block", "grid"]
    out_dir = Path(out_dir) if out_dir else _sweep_dir(config, "strategy")
    cells = [(_with_output(config, out_dir, {"mask.strategy": s, "mask.ratio": ratio}),
              {"run_id": f"{out_dir.name}_{s}"})
             for s in strategies]
    records = run_cells(cells, config.max_parallel)
    selector = primary_selector(config)
    rows = []
    for strategy, record in zip(strategies, records):
        acc, var = _mean_var(record, "classification", "acc", selector)
        rows.append({"strategy": strategy, "ratio": ratio, "acc_cls": acc, "acc_cls_var": var,
                     "run_dir": record.run_dir, "status": record.status})
    return write_table(rows, STRATEGY_COLUMNS, out_dir / "ablate_strategy.csv", config,
                       extra={"strategies": strategies})


def ablate_representations(config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> str:
    """Clustering ACC/NMI for c, every s^i, every [c, s^i] and the full concatenation"""
    dataset = MultiViewDataset.load(config.dataset, mmap=True)
    selectors = all_selectors(dataset.manifest.n_views)
    out_dir = Path(out_dir) if out_dir else _sweep_dir(config, "representations")
    cfg = _with_output(config, out_dir, {"eval.selectors": selectors})
    record = run_full(cfg, run_id=f"{out_dir.name}_run")
    rows = []
    for selector in selectors:
        acc, acc_var = _mean_var(record, "clustering", "acc", selector) if record.success else (None, None)
        nmi_mean, nmi_var = _mean_var(record, "clustering", "nmi", selector) if record.success else (None, None)
        dim = {"c": config.d_c, "concat": config.d_c + dataset.manifest.n_views * config.d_s}.get(
            selector, config.d_s if selector.startswith("s") else config.d_c + config.d_s)
        rows.append({"selector": selector, "dim": dim, "acc_clu": acc, "acc_clu_var": acc_var, "nmi": nmi_mean,
                     "nmi_var": nmi_var, "run_dir": record.run_dir})
    return write_table(rows, REPRESENTATION_COLUMNS, out_dir / "ablate_representations.csv", cfg,
                       extra={"status": record.status})


def run_summary(record: RunRecord) -> Dict[str, Any]:
    """JSON-native view of a run used by the PDF/JSON reports"""
    checkpoints = {}
    for stage, path in record.checkpoints.items():
        checkpoints[stage] = {"path": path, "encoder_hash": record.encoder_hash}
    return {
        "run_id": record.run_id,
        "name": record.name,
        "status": record.status,
        "failed_stage": record.failed_stage,
        "error": record.error,
        "dataset": record.dataset,
        "run_dir": record.run_dir,
        "config_hash": record.config_hash,
        "duration_seconds": record.duration_seconds,
        "peak_rss_mb": record.peak_rss_mb,
        "checkpoints": checkpoints,
        "final_losses": record.final_losses,
        "metrics": [{k: m[k] for k in ("task", "selector", "metric", "mean", "variance", "std")}
                    for m in record.metrics],
        "mi_audit": [{k: r[k] for k in ("view", "mi_nats", "std")} for r in record.mi_audit],
    }


def generate_report(run_dir: Union[str, Path]) -> Dict[str, Optional[str]]:
    """PDF + fingerprinted JSON report for a finished (or failed) run"""
    record = RunRecord.load(run_dir)
    summary = run_summary(record)
    pdf_path = generate_pdf_report(summary, Path(run_dir) / "reports")
    json_path = generate_json_report(summary, Path(run_dir) / "reports")
    if _registry(get_run, record.run_id) is not None:
        _registry(update_run, record.run_id, report_path=pdf_path)
    _registry(log_audit_event, "report_generated", "report", record.run_id,
              details=json.dumps({"pdf": pdf_path, "json": json_path}))
    return {"pdf": pdf_path, "json": json_path}
