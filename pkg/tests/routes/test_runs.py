import pytest
from fastapi.testclient import TestClient

from app.main import app
from app.services import jobs


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.setattr(jobs, "RUNS_DIR", tmp_path / "runs")
    with TestClient(app) as c:
        yield c


def test_health(client):
    assert client.get("/health").json() == {"status": "ok"}
    assert client.get("/").status_code == 200


def test_unknown_job_is_404(client):
    assert client.get("/runs/does-not-exist").status_code == 404


def test_invalid_config_is_400(client):
    res = client.post("/runs", json={"config": {"ft.mode": "Sideways"}})
    assert res.status_code == 400
    assert "ft.mode" in res.json()["detail"]


def test_run_completes_in_the_background(client, lab_files, tmp_path):
    res = client.post("/runs", json={"config": {**lab_files, "run.episodes": 2, "ft.epochs": 1}})
    assert res.status_code == 200
    job_id = res.json()["job_id"]

    # TestClient runs background tasks before returning the response
    status = client.get(f"/runs/{job_id}").json()
    assert status["status"] == "complete"
    assert status["total"] == 2 and status["processed"] == 2
    assert status["summary"]["E"] == 2
    assert 0.0 <= status["summary"]["mean"] <= 1.0
    assert (tmp_path / "runs" / job_id / "results.csv").is_file()


def test_failed_run_reports_the_error(client, lab_files):
    res = client.post("/runs", json={"config": {**lab_files, "model.checkpoint": "/nowhere/desk.ftm"}})
    status = client.get(f"/runs/{res.json()['job_id']}").json()
    assert status["status"] == "failed"
    assert "model.checkpoint" in status["error"]


def test_schedule_past_the_last_epoch_is_400(client):
    res = client.post("/runs", json={"config": {"sched.start": "1", "sched.end": "200", "ft.epochs": "100"}})
    assert res.status_code == 400
    assert "exceeds 100 epochs" in res.json()["detail"]
