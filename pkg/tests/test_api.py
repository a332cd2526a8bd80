import pytest
from fastapi.testclient import TestClient

from mrdd.config import override
from mrdd.database import create_run
from mrdd.main import app


@pytest.fixture
def client():
    with TestClient(app) as client:
        yield client


@pytest.fixture
def quick_payload(tiny_config):
    config = override(tiny_config, {"stage1.epochs": 1, "stage2.epochs": 1, "audit_mi": False, "eval.runs": 1})
    return config.model_dump(mode="json")


class TestReadEndpoints:
    def test_health(self, client):
        body = client.get("/api/health").json()
        assert body["status"] == "healthy"

    def test_unknown_run(self, client):
        assert client.get("/api/runs/nope").status_code == 404
        assert client.get("/api/runs/nope/metrics").status_code == 404
        assert client.get("/api/runs/nope/report").status_code == 404

    def test_list_runs(self, client):
        create_run("listed", "toy", "abc")
        runs = client.get("/api/runs").json()
        assert [r["run_id"] for r in runs] == ["listed"]
        assert runs[0]["status"] == "pending"

    def test_bad_stage_filter(self, client):
        create_run("filtered", "toy", "abc")
        assert client.get("/api/runs/filtered/losses", params={"stage": "stage3"}).status_code == 400

    def test_report_before_record(self, client):
        create_run("early", "toy", "abc")
        assert client.post("/api/runs/early/report").status_code == 409


class TestStartRun:
    def test_invalid_config(self, client):
        response = client.post("/api/runs", json={"config": {"dataset": "x", "mask": {"ratio": 3}}})
        assert response.status_code == 422

    def test_run_lifecycle(self, client, quick_payload):
        response = client.post("/api/runs", json={"config": quick_payload, "run_id": "api_run"})
        assert response.status_code == 202
        assert response.json()["run_id"] == "api_run"

        run = client.get("/api/runs/api_run").json()
        assert run["status"] == "completed"
        losses = client.get("/api/runs/api_run/losses", params={"stage": "stage1"}).json()
        assert [row["epoch"] for row in losses] == [1]
        assert len(losses[0]["recon"]) == 2
        metrics = client.get("/api/runs/api_run/metrics").json()
        assert {m["task"] for m in metrics} == {"clustering", "classification"}

        assert client.post("/api/runs/api_run/report").status_code == 200
        pdf = client.get("/api/runs/api_run/report")
        assert pdf.status_code == 200
        assert pdf.headers["content-type"] == "application/pdf"

    def test_duplicate_run_id(self, client, quick_payload):
        create_run("taken", "toy", "abc")
        response = client.post("/api/runs", json={"config": quick_payload, "run_id": "taken"})
        assert response.status_code == 409
