import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

from mrdd.config import ExperimentConfig, config_hash
from mrdd.utils.report_generator import RunReportGenerator

logger = logging.getLogger(__name__)

# Column schemas of every table the pipeline emits
LOSS_COLUMNS = ["epoch", "total", "kl", "lr"]
METRIC_COLUMNS = ["task", "selector", "metric", "mean", "variance", "std", "values"]
AUDIT_COLUMNS = ["view", "mi_nats", "std", "repeats"]
MASK_SWEEP_COLUMNS = ["ratio", "acc_cls", "acc_cls_var", "run_dir", "status"]
DIMS_SWEEP_COLUMNS = ["d_c", "d_s", "acc_clu", "acc_clu_var", "run_dir", "status"]
COMPONENT_COLUMNS = ["variant", "acc_cls", "acc_cls_var", "acc_clu", "nmi", "run_dir", "status"]
STRATEGY_COLUMNS = ["strategy", "ratio", "acc_cls", "acc_cls_var", "run_dir", "status"]
REPRESENTATION_COLUMNS = ["selector", "dim", "acc_clu", "acc_clu_var", "nmi", "nmi_var", "run_dir"]


def sidecar_path(table_path: Union[str, Path]) -> Path:
    table_path = Path(table_path)
    return table_path.with_name(f"{table_path.stem}.config.json")


def _cell(value: Any) -> Any:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return json.dumps(list(value))
    return "" if value is None else value


def write_table(rows: Iterable[Dict[str, Any]], columns: Sequence[str], path: Union[str, Path],
                config: Union[ExperimentConfig, Dict[str, Any], None] = None, extra: Dict[str, Any] = None) -> str:
    """Write a CSV with a fixed column order plus a sidecar holding the producing config"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(col)) for col in columns])
    sidecar = {"columns": list(columns), **(extra or {})}
    if config is not None:
        data = config.model_dump(mode="json") if isinstance(config, ExperimentConfig) else config
        sidecar["config"] = data
        sidecar["config_hash"] = config_hash(data)
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    logger.info(f"Wrote table {path} ({len(rows)} rows)")
    return str(path)


def read_table(path: Union[str, Path]) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Table not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def loss_columns(curve: List[Dict[str, float]]) -> List[str]:
    keys = {k for row in curve for k in row}
    per_view = sorted((k for k in keys if k.startswith(("recon_", "club_"))),
                      key=lambda k: (k.split("_")[0], int(k.split("_")[1])))
    known = [c for c in LOSS_COLUMNS if c in keys]
    rest = sorted(keys - set(known) - set(per_view))
    return known[:2] + per_view + known[2:] + rest


def generate_pdf_report(run_data: Dict[str, Any], reports_dir=None):
    try:
        return RunReportGenerator(reports_dir).generate_pdf_report(run_data)
    except Exception as e:
        logger.error(f"Failed to generate PDF report: {e}")
        return None


def generate_json_report(run_data: Dict[str, Any], reports_dir=None):
    try:
        return RunReportGenerator(reports_dir).generate_json_report(run_data)
    except Exception as e:
        logger.error(f"Failed to generate JSON report: {e}")
        return None
