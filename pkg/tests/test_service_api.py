import numpy as np
import pytest
from fastapi.testclient import TestClient

from stemforge.service.app import create_app
from stemforge.service.sessions import SessionStore
from stemforge.wavio import decode_wav

from test_sessions import tiny_backend, wave


@pytest.fixture()
def client(tmp_path):
    store = SessionStore(tiny_backend(), tmp_path / "sessions", seed=4)
    return TestClient(create_app(store))


def create_session(client, uploads=()):
    body = {"prompt_tokens": [16, 20, 23],
            "uploads": [{"track": t, "samples": list(map(float, s))} for t, s in uploads]}
    resp = client.post("/sessions", json=body)
    assert resp.status_code == 200
    return resp.json()["session_id"]


class TestSessionEndpoints:
    def test_create_and_get(self, client):
        sid = create_session(client, uploads=[(2, wave(0.2))])
        resp = client.get(f"/sessions/{sid}")
        state = resp.json()
        assert state["session_id"] == sid
        assert state["status"] == "idle"
        assert state["prompt_tokens"] == [16, 20, 23]
        assert state["locked"] == [{"track": 2, "provenance": "uploaded",
                                    "candidate_ref": None}]
        assert state["num_tracks"] == 4
        assert state["sample_rate"] == 4000

    def test_unknown_session_404(self, client):
        resp = client.get("/sessions/snope")
        assert resp.status_code == 404
        assert resp.json() == {"code": "not_found",
                               "message": "unknown session snope"}

    def test_invalid_upload_400(self, client):
        resp = client.post("/sessions", json={
            "prompt_tokens": [16], "uploads": [{"track": 1, "samples": [0.0] * 3}]})
        assert resp.status_code == 400
        assert resp.json()["code"] == "invalid_input"

    def test_generate_select_flow(self, client):
        sid = create_session(client, uploads=[(1, wave(0.15))])
        resp = client.post(f"/sessions/{sid}/generate",
                           json={"seed": 7, "lambda": 7.0})
        assert resp.status_code == 200
        cand = resp.json()
        assert cand["targets"] == [2, 3, 4]
        assert len(cand["tracks"]) == 3
        ref = cand["tracks"][0]["samples_ref"]
        assert ref.endswith(f"/candidates/{cand['candidate_id']}/tracks/2.wav")

        resp = client.post(f"/sessions/{sid}/select",
                           json={"candidate_id": cand["candidate_id"], "tracks": [2, 3]})
        assert resp.status_code == 200
        locked = {item["track"] for item in resp.json()["locked"]}
        assert locked == {1, 2, 3}

    def test_generate_conflict_status(self, client):
        sid = create_session(client)
        # flip the in-memory status to simulate an in-flight generation
        store = client.app.state.store
        store.get(sid).status = "generating"
        resp = client.post(f"/sessions/{sid}/generate", json={"seed": 1})
        assert resp.status_code == 409
        assert resp.json()["code"] == "conflict"

    def test_unlock_and_upload(self, client):
        sid = create_session(client, uploads=[(1, wave(0.15))])
        resp = client.post(f"/sessions/{sid}/unlock", json={"track": 1})
        assert resp.status_code == 200
        assert resp.json()["locked"] == []
        resp = client.post(f"/sessions/{sid}/upload",
                           json={"track": 3, "samples": list(map(float, wave(0.2)))})
        assert resp.status_code == 200
        assert resp.json()["locked"][0]["track"] == 3

    def test_upload_wrong_length_rejected(self, client):
        sid = create_session(client)
        resp = client.post(f"/sessions/{sid}/upload",
                           json={"track": 1, "samples": [0.0] * 10})
        assert resp.status_code == 400


class TestWavEndpoints:
    def test_locked_track_wav_valid_and_byte_stable(self, client):
        sid = create_session(client, uploads=[(1, wave(0.15))])
        r1 = client.get(f"/sessions/{sid}/tracks/1.wav")
        r2 = client.get(f"/sessions/{sid}/tracks/1.wav")
        assert r1.status_code == 200
        assert r1.headers["content-type"] == "audio/wav"
        assert r1.content[:4] == b"RIFF" and r1.content[8:12] == b"WAVE"
        assert r1.content == r2.content
        samples, rate = decode_wav(r1.content)
        assert rate == 4000 and samples.shape == (64,)

    def test_unlocked_track_wav_404(self, client):
        sid = create_session(client)
        assert client.get(f"/sessions/{sid}/tracks/1.wav").status_code == 404

    def test_candidate_wav_byte_stable(self, client):
        sid = create_session(client)
        cand = client.post(f"/sessions/{sid}/generate", json={"seed": 3}).json()
        ref = cand["tracks"][0]["samples_ref"]
        r1 = client.get(ref)
        r2 = client.get(ref)
        assert r1.status_code == 200
        assert r1.content == r2.content

    def test_mix_requires_all_locked(self, client):
        sid = create_session(client, uploads=[(1, wave(0.1))])
        resp = client.get(f"/sessions/{sid}/mix.wav")
        assert resp.status_code == 409
        assert resp.json()["code"] == "incomplete_session"

    def test_full_walkthrough_mix(self, client):
        sid = create_session(client)
        cand = client.post(f"/sessions/{sid}/generate",
                           json={"seed": 5, "lambda": 7.0}).json()
        client.post(f"/sessions/{sid}/select",
                    json={"candidate_id": cand["candidate_id"], "tracks": [1, 2]})
        cand2 = client.post(f"/sessions/{sid}/generate",
                            json={"seed": 6, "lambda": 7.0}).json()
        assert cand2["targets"] == [3, 4]
        client.post(f"/sessions/{sid}/select",
                    json={"candidate_id": cand2["candidate_id"], "tracks": [3, 4]})
        r1 = client.get(f"/sessions/{sid}/mix.wav")
        assert r1.status_code == 200
        assert r1.content == client.get(f"/sessions/{sid}/mix.wav").content
        samples, _ = decode_wav(r1.content)
        assert samples.shape == (64,)


class TestAsyncMode:
    def test_generate_polls_to_completion(self, tmp_path):
        store = SessionStore(tiny_backend(), tmp_path / "s", seed=9,
                             async_generate=True)
        client = TestClient(create_app(store))
        sid = create_session(client)
        resp = client.post(f"/sessions/{sid}/generate", json={"seed": 1})
        assert resp.status_code == 202
        assert resp.json()["status"] == "generating"
        import time
        for _ in range(100):
            state = client.get(f"/sessions/{sid}").json()
            if state["status"] == "idle" and state["candidates"]:
                break
            time.sleep(0.05)
        assert state["candidates"][0]["targets"] == [1, 2, 3, 4]
