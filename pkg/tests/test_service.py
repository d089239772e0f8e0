import time

import pytest
from fastapi.testclient import TestClient

from exemplar_diffusion import io
from exemplar_diffusion.sampler import SamplingError
from exemplar_diffusion.synthworld import make_dataset


@pytest.fixture(scope="module")
def client(tmp_path_factory):
    from exemplar_diffusion.service import create_app

    root = tmp_path_factory.mktemp("svc")
    io.save_dataset(make_dataset("grid_arc", 50, 4, seed=6), root / "arc.json")
    (root / "junk.json").write_text("{not json")
    return TestClient(create_app(root))


SCENE = "grid_arc-00000"
FAST = {"n": 100, "copies": 60}


def test_list_datasets(client):
    r = client.get("/api/datasets")
    assert r.status_code == 200
    [d] = r.json()
    assert d["id"] == "arc" and d["num_scenes"] == 50


def test_scene_and_hidden_gt(client):
    full = client.get(f"/api/datasets/arc/scenes/{SCENE}").json()
    assert len(full["objects"]) == 4
    hidden = client.get(f"/api/datasets/arc/scenes/{SCENE}?hide_gt=1").json()
    assert hidden["objects"] is None


@pytest.mark.parametrize("url", ["/api/datasets/nope/scenes/x", f"/api/datasets/arc/scenes/zzz", "/api/runs/" + "0" * 32,
                                 "/api/runs/../../etc"])
def test_not_found(client, url):
    assert client.get(url).status_code == 404


def detect(client, exemplars=(), **params):
    body = {"dataset": "arc", "scene": SCENE, "exemplars": list(exemplars), "params": {**FAST, **params}}
    return client.post("/api/detect", json=body)


def test_baseline_deterministic_distinct_ids(client):
    a, b = detect(client, seed=3), detect(client, seed=3)
    assert a.status_code == b.status_code == 200
    assert a.json()["detections"] == b.json()["detections"]
    assert a.json()["run_id"] != b.json()["run_id"]
    assert all("provenance" in d for d in a.json()["detections"])


def test_run_is_persisted(client):
    r = detect(client, seed=1).json()
    rec = client.get(f"/api/runs/{r['run_id']}").json()
    assert rec["status"] == "done"
    assert [d for d in rec["runs"][0]["detections"]] == r["detections"]
    assert rec["config"]["sampler"]["n"] == FAST["n"]


def test_exemplar_changes_detections_and_ellipses(client):
    gt = client.get(f"/api/datasets/arc/scenes/{SCENE}").json()["objects"][0]
    ex = gt["bbox"] + [gt["class_id"]]
    base = detect(client, seed=2).json()
    withex = detect(client, [ex], seed=2, ensemble=8).json()
    assert withex["detections"] != base["detections"]
    assert withex["ellipses"] and len(withex["ellipses"]) == len(withex["detections"])
    assert withex["metrics"] is not None


def test_large_ensemble_is_async(client):
    gt = client.get(f"/api/datasets/arc/scenes/{SCENE}").json()["objects"][1]
    r = detect(client, [gt["bbox"] + [0]], ensemble=25)
    assert r.status_code == 202
    run_id = r.json()["run_id"]
    for _ in range(100):
        rec = client.get(f"/api/runs/{run_id}").json()
        if rec["status"] == "done":
            break
        time.sleep(0.05)
    assert rec["status"] == "done" and rec["ellipses"]


@pytest.mark.parametrize("exemplars,params,status", [
    ([[0.5, 0.5, 0.0, 0.1, 0]], {}, 400),
    ([[0.5, 0.5, 0.1]], {}, 400),
    ([[1.5, 0.5, 0.1, 0.1, 0]], {}, 400),
    ([], {"n": -1}, 400),
    ([], {"ensemble": 1}, 400),
    ([], {"tau": 2000}, 422),
])
def test_bad_requests(client, exemplars, params, status):
    r = detect(client, exemplars, **params)
    assert r.status_code == status
    assert "error" in r.json()


def test_malformed_body_400(client):
    assert client.post("/api/detect", json={"dataset": "arc"}).status_code == 400


def test_unknown_scene_404(client):
    r = client.post("/api/detect", json={"dataset": "arc", "scene": "nope"})
    assert r.status_code == 404


def test_sampler_failure_500(client, monkeypatch):
    from exemplar_diffusion import service

    def boom(*a, **k):
        raise SamplingError("denoiser failed", 6)

    monkeypatch.setattr(service, "sample_scene", boom)
    r = detect(client, seed=0)
    assert r.status_code == 500
    body = r.json()
    assert body["error"]["type"] == "sampling_error" and body["error"]["step"] == 6
    assert client.get(f"/api/runs/{body['run_id']}").json()["status"] == "error"


def test_cors_header(client):
    r = client.options(
        "/api/datasets",
        headers={"Origin": "http://localhost:5173", "Access-Control-Request-Method": "GET"},
    )
    assert r.headers.get("access-control-allow-origin") in ("*", "http://localhost:5173")


def test_exemplars_improve_recall_over_batch(client):
    gains = []
    for i in range(50):
        sid = f"grid_arc-{i:05d}"
        gt = client.get(f"/api/datasets/arc/scenes/{sid}").json()["objects"]
        body = {"dataset": "arc", "scene": sid, "params": {"seed": i}}
        base = client.post("/api/detect", json=body).json()["metrics"]["AR"]
        body["exemplars"] = [gt[0]["bbox"] + [gt[0]["class_id"]]]
        ex = client.post("/api/detect", json=body).json()["metrics"]["AR"]
        gains.append(ex - base)
    assert sum(gains) / len(gains) > 0
