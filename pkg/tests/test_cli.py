from pathlib import Path

import pytest

from mrdd.cli import build_parser, main
from mrdd.config import override, save_config
from mrdd.utils.report import read_table


@pytest.fixture
def config_file(tiny_config, tmp_path):
    config = override(tiny_config, {"stage1.epochs": 1, "stage2.epochs": 1, "audit_mi": False, "eval.runs": 1})
    return save_config(config, tmp_path / "exp.json")


class TestParser:
    def test_verbs(self):
        parser = build_parser()
        args = parser.parse_args(["sweep", "mask", "--config", "exp.json", "--ratios", "0.1,0.2"])
        assert (args.command, args.kind, args.ratios) == ("sweep", "mask", "0.1,0.2")
        args = parser.parse_args(["eval", "--latents", "lat", "--selector", "cs1", "--task", "cluster"])
        assert args.task == "cluster"

    def test_unknown_task(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["eval", "--latents", "lat", "--task", "regress"])


class TestCommands:
    def test_data_synth(self, tmp_path, capsys):
        assert main(["data", "synth", "--recipe", "synthetic", "--out", str(tmp_path / "syn"),
                     "--n-samples", "120"]) == 0
        assert (tmp_path / "syn" / "manifest.json").exists()
        assert "120 samples" in capsys.readouterr().out

    def test_stagewise_workflow(self, config_file, tmp_path):
        out = tmp_path / "stages"
        assert main(["train", "stage1", "--config", config_file, "--out", str(out)]) == 0
        assert main(["train", "stage2", "--config", config_file, "--stage1", str(out / "stage1.pt"),
                     "--out", str(out)]) == 0
        assert (out / "stage2_losses.csv").exists()
        latents = tmp_path / "latents"
        assert main(["extract", "--config", config_file, "--stage2", str(out / "stage2.pt"),
                     "--out", str(latents)]) == 0
        assert main(["eval", "--latents", str(latents), "--selector", "cs1", "--task", "classify",
                     "--runs", "2"]) == 0
        rows = read_table(latents / "eval_classify_cs1.csv")
        assert [r["metric"] for r in rows] == ["acc", "f_score"]
        assert main(["export", "--latents", str(latents), "--selector", "c", "--out",
                     str(tmp_path / "c.csv")]) == 0
        assert main(["reconstruct", "--config", config_file, "--stage2", str(out / "stage2.pt"),
                     "--n", "4", "--out", str(tmp_path / "grid.png")]) == 0
        assert (tmp_path / "grid.png").exists()

    def test_stage2_needs_checkpoint(self, config_file):
        assert main(["train", "stage2", "--config", config_file]) == 1

    def test_run_and_report(self, config_file, capsys):
        assert main(["run", "--config", config_file, "--run-id", "cli_run"]) == 0
        out = capsys.readouterr().out
        run_dir = out.split("(")[-1].split(")")[0]
        assert main(["report", run_dir]) == 0
        assert (Path(run_dir) / "reports" / "report_cli_run.pdf").exists()

    def test_failed_run_exits_nonzero(self, config_file, tmp_path):
        assert main(["run", "--config", config_file, "--set", f"dataset=\"{tmp_path / 'gone'}\""]) == 1

    def test_bad_selector_exits_nonzero(self, tmp_path):
        assert main(["eval", "--latents", str(tmp_path), "--selector", "xyz", "--task", "cluster"]) == 1

    def test_bad_override(self, config_file):
        assert main(["run", "--config", config_file, "--set", "mask.rate=0.1"]) == 1
