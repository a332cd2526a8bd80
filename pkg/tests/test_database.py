import json

from mrdd.database import (
    add_checkpoint, add_epoch_loss, add_metric_result, create_run, get_checkpoints, get_epoch_losses,
    get_metric_results, get_run, get_run_history, log_audit_event, update_run,
)
from mrdd.models import RunStatus, Stage


class TestRunRegistry:
    def test_create_and_update(self):
        create_run("r1", "toy", "abc", dataset="data/toy")
        run = get_run("r1")
        assert run.status == RunStatus.PENDING
        update_run("r1", status="failed", failed_stage="stage2", error_message="boom")
        run = get_run("r1")
        assert run.status == RunStatus.FAILED
        assert run.failed_stage == "stage2"

    def test_duplicate_run_id_returns_none(self):
        assert create_run("dup", "toy", "abc") is not None
        assert create_run("dup", "toy", "abc") is None

    def test_unknown_run(self):
        assert get_run("missing") is None
        assert update_run("missing", status="completed") is None
        assert add_checkpoint("missing", "stage1", "x.pt") is None

    def test_history_most_recent_first(self):
        for k in range(3):
            create_run(f"h{k}", "toy", "abc")
        assert [r.run_id for r in get_run_history(limit=2)] == ["h2", "h1"]


class TestRunChildren:
    def test_epoch_losses_pack_views(self):
        create_run("r2", "toy", "abc")
        add_epoch_loss("r2", "stage2", {"epoch": 1, "total": 3.0, "recon_2": 2.0, "recon_1": 1.0,
                                        "recon_10": 10.0, "club_1": 0.2, "club_2": 0.4, "lr": 1e-3})
        add_epoch_loss("r2", "stage1", {"epoch": 1, "total": 5.0, "kl": 0.5, "recon_1": 4.5})
        rows = get_epoch_losses("r2", "stage2")
        assert len(rows) == 1
        assert json.loads(rows[0].recon) == [1.0, 2.0, 10.0]
        assert abs(rows[0].club - 0.3) < 1e-12
        assert len(get_epoch_losses("r2")) == 2

    def test_metrics_and_checkpoints(self):
        create_run("r3", "toy", "abc")
        add_metric_result("r3", "clustering", "c", "acc", 0.6, 0.01, 0.1, [0.5, 0.7])
        add_checkpoint("r3", Stage.STAGE1, "ckpt/stage1.pt", "f" * 64)
        metrics = get_metric_results("r3")
        assert [(m.task, m.metric) for m in metrics] == [("clustering", "acc")]
        assert json.loads(metrics[0].values) == [0.5, 0.7]
        checkpoints = get_checkpoints("r3")
        assert checkpoints[0].stage == Stage.STAGE1
        assert checkpoints[0].parameter_hash == "f" * 64

    def test_audit_log(self):
        assert log_audit_event("run_started", "run", "r4", details="{}") is not None
