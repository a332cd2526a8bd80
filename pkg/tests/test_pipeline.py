import json
from pathlib import Path

import pytest

from mrdd.config import EvalConfig, ExperimentConfig, MineConfig, NetConfig, StageConfig, override
from mrdd.database import get_checkpoints, get_epoch_losses, get_metric_results, get_run
from mrdd.models import RunStatus
from mrdd.services.data import build_dataset, make_synthetic_dataset
from mrdd.services.pipeline import (
    COMPONENT_VARIANTS, RunRecord, ablate_components, ablate_mask_strategy, ablate_representations,
    generate_report, primary_selector, run_full, sweep_dims, sweep_mask_ratio,
)
from mrdd.utils.report import (
    COMPONENT_COLUMNS, DIMS_SWEEP_COLUMNS, MASK_SWEEP_COLUMNS, REPRESENTATION_COLUMNS, read_table, sidecar_path,
)
from mrdd.utils.report_generator import RunReportGenerator


@pytest.fixture
def quick_config(tiny_config):
    return override(tiny_config, {"stage1.epochs": 1, "stage2.epochs": 1, "audit_mi": False, "eval.runs": 1})


class TestRunFull:
    def test_artifacts_and_registry(self, tiny_config):
        record = run_full(tiny_config, run_id="full")
        assert record.success, record.error
        run_dir = Path(record.run_dir)
        for name in ["config.json", "record.json", "stage1_losses.csv", "stage2_losses.csv", "metrics.csv",
                     "mi_audit.csv", "checkpoints/stage1.pt", "checkpoints/stage2.pt", "latents/latents.json"]:
            assert (run_dir / name).exists(), name
        assert sidecar_path(run_dir / "metrics.csv").exists()
        assert len(record.metrics) == 8
        assert {m["selector"] for m in record.metrics} == {"c", "cs1"}
        assert [row["view"] for row in record.mi_audit] == [1, 2]

        run = get_run("full")
        assert run.status == RunStatus.COMPLETED
        assert run.peak_rss_mb > 0
        assert len(get_epoch_losses("full")) == 4
        assert len(get_checkpoints("full")) == 2
        assert len(get_metric_results("full")) == 8 + 2

    def test_record_round_trip(self, quick_config):
        record = run_full(quick_config, run_id="rt")
        loaded = RunRecord.load(record.run_dir)
        assert loaded == record
        assert loaded.metric("clustering", "acc", "c")["task"] == "clustering"
        assert loaded.metric("clustering", "acc", "s9") is None

    def test_deterministic(self, quick_config):
        a = run_full(quick_config, run_id="det_a")
        b = run_full(quick_config, run_id="det_b")
        assert a.encoder_hash == b.encoder_hash
        assert a.config_hash == b.config_hash
        assert [m["values"] for m in a.metrics] == [m["values"] for m in b.metrics]

    def test_failed_stage_is_recorded(self, quick_config, tmp_path):
        config = override(quick_config, {"dataset": str(tmp_path / "missing")})
        record = run_full(config, run_id="broken")
        assert not record.success
        assert record.failed_stage == "data"
        assert "missing" in record.error
        assert RunRecord.load(record.run_dir).status == "failed"
        assert get_run("broken").status == RunStatus.FAILED

    def test_only_stage1_evaluates_c(self, quick_config):
        record = run_full(quick_config, run_id="only1", run_stage2=False)
        assert record.success, record.error
        assert {m["selector"] for m in record.metrics} == {"c"}
        assert "stage2" not in record.loss_curves
        assert Path(record.checkpoints["stage2"]).exists()

    def test_random_stage1(self, quick_config):
        record = run_full(quick_config, run_id="only2", stage1_mode="random")
        assert record.success, record.error
        assert "stage1" not in record.loss_curves
        assert "stage2" in record.loss_curves

    def test_primary_selector(self, quick_config):
        assert primary_selector(quick_config) == "cs1"
        assert primary_selector(override(quick_config, {"eval.selectors": ["s2", "c"]})) == "s2"


class TestSweeps:
    def test_mask_ratio_sweep(self, quick_config, tmp_path):
        path = sweep_mask_ratio(quick_config, ratios=[0.0, 0.5], out_dir=tmp_path / "mask")
        rows = read_table(path)
        assert [float(r["ratio"]) for r in rows] == [0.0, 0.5]
        assert list(rows[0]) == MASK_SWEEP_COLUMNS
        assert all(r["status"] == "completed" for r in rows)
        sidecar = json.loads(sidecar_path(path).read_text())
        assert sidecar["ratios"] == [0.0, 0.5]
        assert sidecar["selector"] == "cs1"

    def test_dims_sweep(self, quick_config, tmp_path):
        path = sweep_dims(quick_config, dc_list=[2], ds_list=[2, 3], out_dir=tmp_path / "dims")
        rows = read_table(path)
        assert [(r["d_c"], r["d_s"]) for r in rows] == [("2", "2"), ("2", "3")]
        assert list(rows[0]) == DIMS_SWEEP_COLUMNS

    def test_component_ablation(self, quick_config, tmp_path):
        path = ablate_components(quick_config, out_dir=tmp_path / "components")
        rows = read_table(path)
        assert [r["variant"] for r in rows] == list(COMPONENT_VARIANTS)
        assert list(rows[0]) == COMPONENT_COLUMNS
        assert all(r["status"] == "completed" for r in rows)
        assert all(r["acc_cls"] != "" for r in rows)

    def test_strategy_ablation(self, quick_config, tmp_path):
        path = ablate_mask_strategy(quick_config, ratio=0.5, out_dir=tmp_path / "strategy")
        assert [r["strategy"] for r in read_table(path)] == ["random", "block", "grid"]

    def test_representation_ablation(self, quick_config, tmp_path):
        path = ablate_representations(quick_config, out_dir=tmp_path / "reps")
        rows = read_table(path)
        assert [r["selector"] for r in rows] == ["c", "s1", "s2", "cs1", "cs2", "concat"]
        assert [int(r["dim"]) for r in rows] == [4, 3, 3, 7, 7, 10]
        assert list(rows[0]) == REPRESENTATION_COLUMNS


class TestReports:
    def test_pdf_and_json(self, quick_config):
        record = run_full(quick_config, run_id="rep")
        paths = generate_report(record.run_dir)
        assert Path(paths["pdf"]).exists()
        assert RunReportGenerator().verify_report(paths["json"])["valid"]
        assert get_run("rep").report_path == paths["pdf"]

    def test_report_for_failed_run(self, quick_config, tmp_path):
        record = run_full(override(quick_config, {"dataset": str(tmp_path / "gone")}), run_id="rep_failed")
        paths = generate_report(record.run_dir)
        assert Path(paths["pdf"]).exists()

    def test_tampered_json_fails_verification(self, quick_config):
        record = run_full(quick_config, run_id="tamper")
        path = Path(generate_report(record.run_dir)["json"])
        report = json.loads(path.read_text())
        report["run"]["status"] = "edited"
        path.write_text(json.dumps(report))
        assert not RunReportGenerator().verify_report(str(path))["valid"]


@pytest.fixture(scope="module")
def desk_dataset_dir(tmp_path_factory):
    views, labels, names = make_synthetic_dataset(n_samples=10_000, n_classes=10, image_size=32, seed=0)
    dataset = build_dataset("desk", views, labels, names, ["identity", "edge"], recipe="synthetic", split_seed=0)
    return dataset.save(tmp_path_factory.mktemp("desk") / "desk")


@pytest.fixture
def desk_config(desk_dataset_dir, output_root):
    stage = StageConfig(epochs=50, batch_size=256, lr=1e-3)
    return ExperimentConfig(
        name="desk",
        dataset=str(desk_dataset_dir),
        stage1=stage,
        stage2=stage,
        nets=NetConfig(base_channels=8, club_hidden=[64]),
        mine=MineConfig(hidden=[64, 64], batch_size=128, epochs=100, repeats=1, patience=20),
        eval=EvalConfig(runs=3, selectors=["c", "cs1"]),
        audit_mi=False,
        output_dir=str(output_root),
    )


def _wins(pairs):
    return sum(a > b for a, b in pairs)


@pytest.mark.slow
class TestDeskScaleDirections:
    SEEDS = range(10)

    def test_specific_codes_help_clustering(self, desk_config):
        pairs = []
        for seed in self.SEEDS:
            record = run_full(override(desk_config, {"seed": seed}), run_id=f"cs_{seed}")
            assert record.success, record.error
            pairs.append((record.metric("clustering", "acc", "cs1")["mean"],
                          record.metric("clustering", "acc", "c")["mean"]))
        assert _wins(pairs) >= 8, pairs

    def test_masking_helps_classification(self, desk_config):
        pairs = []
        for seed in self.SEEDS:
            masked = run_full(override(desk_config, {"seed": seed, "mask.ratio": 0.7}), run_id=f"m7_{seed}")
            plain = run_full(override(desk_config, {"seed": seed, "mask.ratio": 0.0}), run_id=f"m0_{seed}")
            assert masked.success and plain.success
            pairs.append((masked.metric("classification", "acc", "cs1")["mean"],
                          plain.metric("classification", "acc", "cs1")["mean"]))
        assert _wins(pairs) >= 8, pairs

    def test_club_penalty_reduces_redundancy(self, desk_config):
        pairs = []
        for seed in self.SEEDS:
            mean_mi = []
            for lambda_d in (0.0, 1.0):
                config = override(desk_config, {"seed": seed, "audit_mi": True, "weights.lambda_d": lambda_d})
                record = run_full(config, run_id=f"ld{lambda_d:g}_{seed}")
                assert record.success, record.error
                mean_mi.append(sum(r["mi_nats"] for r in record.mi_audit) / len(record.mi_audit))
            pairs.append(tuple(mean_mi))
        assert _wins(pairs) >= 8, pairs
