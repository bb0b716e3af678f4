"""HTTP API contract: endpoints, error taxonomy, idempotency, restart."""

import base64
import time

import pytest
from fastapi.testclient import TestClient

from cxrseg import data
from cxrseg.service import create_app

MASK_PGM = b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0])
MASK_B64 = base64.b64encode(MASK_PGM).decode()


def seeded_app(tmp_path, n=12, batch=5):
    app = create_app(tmp_path / "svc")
    engine = app.state.engine
    classes = {f"i{i:03d}": ("covid", "non_covid", "normal")[i % 3] for i in range(n)}
    engine.init(classes, sorted(classes), seed=1)
    engine.register_models(1, ["a", "b"])
    engine.stage1_select({"a": 0.9, "b": 0.8})
    engine.advance_stage("II")
    ids = engine.next_batch(batch_size=batch)
    return app, engine, ids


class TestQueueAndItems:
    def test_queue_lists_pending(self, tmp_path):
        app, _, ids = seeded_app(tmp_path)
        client = TestClient(app)
        body = client.get("/api/queue").json()
        assert body["total_pending"] == len(ids)
        assert {item["id"] for item in body["items"]} == set(ids)

    def test_queue_limit(self, tmp_path):
        app, _, _ = seeded_app(tmp_path)
        client = TestClient(app)
        assert len(client.get("/api/queue", params={"limit": 2}).json()["items"]) == 2

    def test_item_detail(self, tmp_path):
        app, _, ids = seeded_app(tmp_path)
        client = TestClient(app)
        body = client.get(f"/api/items/{ids[0]}").json()
        assert body["id"] == ids[0]
        assert body["status"] == "pending"
        assert "mask_ref" in body and "proposals" in body

    def test_unknown_item_404(self, tmp_path):
        app, _, _ = seeded_app(tmp_path)
        assert TestClient(app).get("/api/items/nope").status_code == 404


class TestDecisions:
    def test_accept_updates_progress(self, tmp_path):
        app, _, ids = seeded_app(tmp_path)
        client = TestClient(app)
        before = client.get("/api/progress").json()["status_counts"]["accepted"]
        r = client.post(f"/api/items/{ids[0]}/decision", json={"decision": "accept", "reviewer": "r1"})
        assert r.status_code == 200
        after = client.get("/api/progress").json()["status_counts"]["accepted"]
        assert after == before + 1

    def test_terminal_decision_409_unchanged(self, tmp_path):
        app, engine, ids = seeded_app(tmp_path)
        client = TestClient(app)
        client.post(f"/api/items/{ids[0]}/decision", json={"decision": "accept", "reviewer": "r1"})
        snapshot = engine.state.to_dict()
        r = client.post(f"/api/items/{ids[0]}/decision", json={"decision": "exclude", "reviewer": "r2"})
        assert r.status_code == 409
        assert engine.state.to_dict() == snapshot

    def test_identical_re_post_idempotent(self, tmp_path):
        app, engine, ids = seeded_app(tmp_path)
        client = TestClient(app)
        first = client.post(f"/api/items/{ids[0]}/decision", json={"decision": "accept", "reviewer": "r1"})
        events_before = len(engine.events)
        again = client.post(f"/api/items/{ids[0]}/decision", json={"decision": "accept", "reviewer": "r1"})
        assert again.status_code == 409
        body = again.json()
        assert body["conflict"] is True and body["idempotent"] is True
        assert body["item"]["status"] == first.json()["status"] == "accepted"
        assert len(engine.events) == events_before  # nothing mutated

    def test_reject_with_mask_round_trip(self, tmp_path):
        app, _, ids = seeded_app(tmp_path)
        client = TestClient(app)
        r = client.post(
            f"/api/items/{ids[0]}/decision",
            json={"decision": "reject", "reviewer": "r1", "mask": MASK_B64},
        )
        assert r.status_code == 200 and r.json()["status"] == "modified"
        got = client.get(f"/api/masks/{ids[0]}")
        assert got.status_code == 200
        assert got.content == MASK_PGM

    def test_mask_png_rendering(self, tmp_path):
        app, _, ids = seeded_app(tmp_path)
        client = TestClient(app)
        client.post(
            f"/api/items/{ids[0]}/decision",
            json={"decision": "reject", "reviewer": "r1", "mask": MASK_B64},
        )
        r = client.get(f"/api/masks/{ids[0]}", params={"format": "png"})
        assert r.status_code == 200
        assert r.content[:4] == b"\x89PNG"

    def test_malformed_mask_422(self, tmp_path):
        app, _, ids = seeded_app(tmp_path)
        client = TestClient(app)
        bad = base64.b64encode(b"P6 not a graymap").decode()
        r = client.post(
            f"/api/items/{ids[0]}/decision",
            json={"decision": "reject", "reviewer": "r1", "mask": bad},
        )
        assert r.status_code == 422

    def test_missing_body_field_422(self, tmp_path):
        app, _, ids = seeded_app(tmp_path)
        r = TestClient(app).post(f"/api/items/{ids[0]}/decision", json={"decision": "accept"})
        assert r.status_code == 422

    def test_md_resolve_flow(self, tmp_path):
        app, _, ids = seeded_app(tmp_path)
        client = TestClient(app)
        client.post(f"/api/items/{ids[0]}/decision",
                    json={"decision": "unsure", "reviewer": "r1", "note": "dense lower lobe"})
        r = client.post(
            f"/api/items/{ids[0]}/md-resolve",
            json={"note": "effusion", "mask": MASK_B64, "reviewer": "md1"},
        )
        assert r.status_code == 200
        assert r.json()["status"] == "modified"
        assert r.json()["md_note"] == "effusion"


class TestRounds:
    def test_finalize_with_pending_409_lists_ids(self, tmp_path):
        app, _, ids = seeded_app(tmp_path)
        client = TestClient(app)
        client.post(f"/api/items/{ids[0]}/decision", json={"decision": "accept", "reviewer": "r"})
        r = client.post("/api/rounds/finalize")
        assert r.status_code == 409
        assert any(i in r.json()["detail"] for i in ids[1:])

    def test_finalize_complete_round(self, tmp_path):
        app, _, ids = seeded_app(tmp_path)
        client = TestClient(app)
        for item_id in ids:
            client.post(f"/api/items/{item_id}/decision", json={"decision": "accept", "reviewer": "r"})
        r = client.post("/api/rounds/finalize")
        assert r.status_code == 200
        assert r.json()["dataset_size"] == len(ids)


class TestStage3Endpoints:
    def seeded_stage3(self, tmp_path):
        app = create_app(tmp_path / "svc3")
        engine = app.state.engine
        classes = {f"i{i:03d}": "covid" for i in range(8)}
        engine.init(classes, [], seed=1)
        engine.register_models(1, ["a", "b"])
        engine.stage1_select({"a": 0.9, "b": 0.8})
        engine.advance_stage("II")
        engine.advance_stage("III")
        engine.register_models(3, [f"n{i}" for i in range(6)])
        ids = sorted(classes)[:4]
        engine.stage3_propose({i: [f"p/{i}/{m}" for m in range(6)] for i in ids})
        return app, engine, ids

    def test_proposals_endpoint(self, tmp_path):
        app, _, ids = self.seeded_stage3(tmp_path)
        body = TestClient(app).get(f"/api/stage3/{ids[0]}/proposals").json()
        assert len(body["proposals"]) == 6

    def test_select_updates_tally(self, tmp_path):
        app, engine, ids = self.seeded_stage3(tmp_path)
        client = TestClient(app)
        r = client.post(f"/api/stage3/{ids[0]}/select", json={"choice": 4, "reviewer": "r"})
        assert r.status_code == 200
        assert client.get("/api/progress").json()["tallies"]["n3"] == 1

    def test_deny(self, tmp_path):
        app, engine, ids = self.seeded_stage3(tmp_path)
        r = TestClient(app).post(f"/api/stage3/{ids[0]}/select", json={"choice": "deny"})
        assert r.status_code == 200
        assert r.json()["status"] == "denied"

    def test_double_select_conflict(self, tmp_path):
        app, _, ids = self.seeded_stage3(tmp_path)
        client = TestClient(app)
        client.post(f"/api/stage3/{ids[0]}/select", json={"choice": 1})
        r = client.post(f"/api/stage3/{ids[0]}/select", json={"choice": 2})
        assert r.status_code == 409


class TestRestart:
    def test_restart_restores_progress(self, tmp_path):
        app, _, ids = seeded_app(tmp_path)
        client = TestClient(app)
        for item_id in ids[:3]:
            client.post(f"/api/items/{item_id}/decision", json={"decision": "accept", "reviewer": "r"})
        client.post(f"/api/items/{ids[3]}/decision", json={"decision": "exclude", "reviewer": "r"})
        before = client.get("/api/progress").json()

        restarted = create_app(tmp_path / "svc")  # same workdir, fresh process state
        after = TestClient(restarted).get("/api/progress").json()
        assert after == before

    def test_every_mutation_appends_one_event(self, tmp_path):
        app, engine, ids = seeded_app(tmp_path)
        client = TestClient(app)
        n0 = len(engine.events)
        client.get("/api/progress")
        client.get("/api/queue")
        assert len(engine.events) == n0
        client.post(f"/api/items/{ids[0]}/decision", json={"decision": "accept", "reviewer": "r"})
        assert len(engine.events) == n0 + 1
        client.post(
            f"/api/items/{ids[1]}/decision",
            json={"decision": "reject", "reviewer": "r", "mask": MASK_B64},
        )
        assert len(engine.events) == n0 + 2


class TestTrainJobs:
    def test_job_lifecycle(self, tmp_path):
        manifest = data.synth_generate(2, 16, seed=0, out_dir=tmp_path / "ds")
        app = create_app(tmp_path / "svc")
        client = TestClient(app)
        r = client.post(
            "/api/jobs/train",
            json={"manifest": str(manifest), "kind": "lung", "depth": 2,
                  "base_channels": 4, "max_epochs": 1},
        )
        assert r.status_code == 200
        job_id = r.json()["job_id"]
        assert r.json()["state"] in ("queued", "running")
        for _ in range(200):
            status = client.get(f"/api/jobs/{job_id}").json()
            if status["state"] in ("done", "failed"):
                break
            time.sleep(0.1)
        assert status["state"] == "done", status.get("error")
        assert status["result_ref"].endswith(".segw")
        loaded = data.load_weights(status["result_ref"])
        assert loaded.config.depth == 2

    def test_unknown_job_404(self, tmp_path):
        app = create_app(tmp_path / "svc")
        assert TestClient(app).get("/api/jobs/none").status_code == 404
