import json

import pytest
from fastapi.testclient import TestClient

from conftest import echo_command
from backend.main import app
from fusioncert.scene import save


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.setenv("FUSIONCERT_DB", str(tmp_path / "runs.sqlite"))
    with TestClient(app) as c:
        yield c


def certify_body(**extra):
    body = {
        "scene_spec": {"seed": 1, "vehicle_points": 100, "background_points": 100},
        "transform": "shifting",
        "ranges": [[0.0, 0.02]],
        "samples": 20,
        "sigma_x": 100.0,
        "sigma_p": 100.0,
        "detector": {"kind": "external", "command": echo_command("ok")},
    }
    body.update(extra)
    return body


def test_certify_and_history(client):
    res = client.post("/certify", json=certify_body(name="demo"))
    assert res.status_code == 200
    data = res.json()
    row = data["rows"][0]
    assert row["scene"] == "demo"
    assert row["metric"] == "Det@80"
    assert row["certified"] == "0.900000"
    assert row["cells"] == "2"

    listed = client.get("/runs/list").json()["items"]
    assert [item["id"] for item in listed] == [data["id"]]
    assert listed[0]["command"] == "certify-detection"

    stored = client.get(f"/runs/{data['id']}").json()
    assert stored["rows"] == data["rows"]
    assert stored["config"]["samples"] == 20
    assert "scene_document" not in stored["config"]


def test_builtin_detector_run(client):
    body = certify_body(detector={"kind": "builtin"}, metric="iou")
    res = client.post("/certify", json=body)
    assert res.status_code == 200
    row = res.json()["rows"][0]
    assert row["metric"] == "AP@50"
    assert row["scene"] == "generated-1"


def test_scene_file_and_document(client, tmp_path, small_scene):
    path = tmp_path / "kept.json"
    save(small_scene, path)
    body = certify_body(scene=str(path))
    del body["scene_spec"]
    res = client.post("/certify", json=body)
    assert res.status_code == 200
    assert res.json()["rows"][0]["scene"] == "kept"

    body = certify_body(scene_document=json.loads(path.read_text(encoding="utf-8")))
    del body["scene_spec"]
    res = client.post("/certify", json=body)
    assert res.status_code == 200
    assert res.json()["rows"][0]["scene"] == "inline"


def test_attack(client):
    res = client.post("/attack", json=certify_body(attack_step=0.01))
    assert res.status_code == 200
    row = res.json()["rows"][0]
    assert row["certified"] == ""
    assert row["empirical"] == "0.900000"
    assert row["cells"] == "3"


def test_attack_with_vanilla_rows(client):
    res = client.post("/attack", json=certify_body(attack_step=0.01, vanilla=True))
    assert res.status_code == 200
    rows = res.json()["rows"]
    assert [r["metric"] for r in rows] == ["Det@80", "VanillaDet@80"]
    assert rows[1]["empirical"] == "0.900000"
    assert rows[1]["clean"] == "0.900000"
    assert rows[1]["n"] == "1"


def test_builtin_modality(client):
    body = certify_body(detector={"kind": "builtin"}, builtin={"modality": "camera"})
    res = client.post("/certify", json=body)
    assert res.status_code == 200
    assert res.json()["rows"][0]["metric"] == "Det@80:camera"


def test_unknown_modality(client):
    res = client.post("/certify", json=certify_body(detector={"kind": "builtin"}, builtin={"modality": "radar"}))
    assert res.status_code == 422


def test_attack_needs_step(client):
    res = client.post("/attack", json=certify_body())
    assert res.status_code == 400
    assert "attack_step" in res.json()["detail"]


def test_two_scene_sources_rejected(client):
    res = client.post("/certify", json=certify_body(scene="somewhere.json"))
    assert res.status_code == 422


def test_scene_file_with_invalid_bytes(client, tmp_path):
    path = tmp_path / "binary.json"
    path.write_bytes(b"\xff\xfe")
    body = certify_body(scene=str(path))
    del body["scene_spec"]
    res = client.post("/certify", json=body)
    assert res.status_code == 400
    assert "not UTF-8" in res.json()["detail"]


def test_missing_scene_file(client, tmp_path):
    body = certify_body(scene=str(tmp_path / "absent.json"))
    del body["scene_spec"]
    assert client.post("/certify", json=body).status_code == 400


def test_dead_detector(client):
    res = client.post("/certify", json=certify_body(detector={"kind": "external", "command": echo_command("die")}))
    assert res.status_code == 502


def test_delete_and_clear(client):
    first = client.post("/certify", json=certify_body()).json()["id"]
    second = client.post("/certify", json=certify_body()).json()["id"]

    assert client.delete(f"/runs/{first}").json() == {"status": "ok"}
    assert client.get(f"/runs/{first}").status_code == 404
    assert client.get(f"/runs/{second}").status_code == 200

    assert client.post("/runs/clear").json() == {"status": "ok"}
    assert client.get("/runs/list").json() == {"items": []}


def test_unknown_run(client):
    res = client.get("/runs/12345")
    assert res.status_code == 404
    assert res.json()["detail"] == "Run not found"
