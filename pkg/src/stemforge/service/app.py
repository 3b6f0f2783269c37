"""HTTP API over the session store.

Track indices on the wire are 1-based (track 1..K); bodies are JSON.
Errors are machine-readable ``{code, message}`` with codes
invalid_input (400), not_found (404), conflict (409), and
incomplete_session (409).
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from ..wavio import encode_wav
from .sessions import Candidate, ServiceError, Session, SessionStore

STATUS_BY_CODE = {
    "invalid_input": 400,
    "not_found": 404,
    "conflict": 409,
    "incomplete_session": 409,
}


class UploadItem(BaseModel):
    track: int
    samples: list[float]


class CreateSessionBody(BaseModel):
    prompt_tokens: list[int]
    uploads: list[UploadItem] = Field(default_factory=list)


class GenerateBody(BaseModel):
    seed: int = 0
    guidance: float = Field(default=7.0, alias="lambda")

    model_config = {"populate_by_name": True}


class SelectBody(BaseModel):
    candidate_id: str
    tracks: list[int]


class TrackBody(BaseModel):
    track: int


class UploadBody(BaseModel):
    track: int
    samples: list[float]


def _candidate_view(session_id: str, cand: Candidate) -> dict:
    return {
        "candidate_id": cand.id,
        "seed": cand.seed,
        "lambda": cand.guidance,
        "targets": [t + 1 for t in cand.targets],
        "tracks": [
            {"index": t + 1,
             "samples_ref": f"/sessions/{session_id}/candidates/{cand.id}/tracks/{t + 1}.wav"}
            for t in cand.targets],
    }


def _session_view(sess: Session, store: SessionStore) -> dict:
    return {
        "session_id": sess.id,
        "status": sess.status,
        "prompt_tokens": list(sess.prompt),
        "num_tracks": store.backend.num_tracks,
        "num_samples": store.backend.num_samples,
        "sample_rate": store.backend.sample_rate,
        "locked": [
            {"track": i + 1, "provenance": lt.provenance,
             "candidate_ref": lt.candidate_ref or None}
            for i, lt in sorted(sess.locked.items())],
        "candidates": [_candidate_view(sess.id, c) for c in sess.candidates],
    }


def create_app(store: SessionStore, ui_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="stemforge workflow service")
    app.state.store = store
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    @app.exception_handler(ServiceError)
    async def service_error_handler(request: Request, exc: ServiceError):
        return JSONResponse(status_code=STATUS_BY_CODE.get(exc.code, 400),
                            content={"code": exc.code, "message": exc.message})

    def wav_response(samples) -> Response:
        return Response(content=encode_wav(samples, store.backend.sample_rate),
                        media_type="audio/wav")

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        uploads = {item.track - 1: item.samples for item in body.uploads}
        sess = store.create(body.prompt_tokens, uploads)
        return {"session_id": sess.id}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return _session_view(store.get(session_id), store)

    @app.post("/sessions/{session_id}/generate")
    def generate(session_id: str, body: GenerateBody):
        cand = store.generate(session_id, body.seed, body.guidance)
        if cand is None:  # async mode: poll session status
            return JSONResponse(status_code=202,
                                content={"status": "generating",
                                         "candidate_id": None, "tracks": []})
        return _candidate_view(session_id, cand)

    @app.post("/sessions/{session_id}/select")
    def select(session_id: str, body: SelectBody):
        sess = store.select(session_id, body.candidate_id,
                            [t - 1 for t in body.tracks])
        return _session_view(sess, store)

    @app.post("/sessions/{session_id}/unlock")
    def unlock(session_id: str, body: TrackBody):
        sess = store.unlock(session_id, body.track - 1)
        return _session_view(sess, store)

    @app.post("/sessions/{session_id}/upload")
    def upload(session_id: str, body: UploadBody):
        sess = store.upload(session_id, body.track - 1, body.samples)
        return _session_view(sess, store)

    @app.get("/sessions/{session_id}/tracks/{track}.wav")
    def locked_track_wav(session_id: str, track: int):
        return wav_response(store.locked_waveform(session_id, track - 1))

    @app.get("/sessions/{session_id}/candidates/{candidate_id}/tracks/{track}.wav")
    def candidate_track_wav(session_id: str, candidate_id: str, track: int):
        return wav_response(store.candidate_waveform(session_id, candidate_id, track - 1))

    @app.get("/sessions/{session_id}/mix.wav")
    def mix_wav(session_id: str):
        return wav_response(store.mix(session_id))

    if ui_dir and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
