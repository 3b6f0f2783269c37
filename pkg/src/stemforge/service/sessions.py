"""Stateful co-composition sessions over the sampler.

A session tracks the prompt, the set of locked tracks (uploaded or
selected from generated candidates), and the full candidate history.
Generation targets whatever is not locked, conditioning on the locked
tracks; locked waveform bytes are immutable until unlock/upload.  All
waveforms are held as float32 end to end so persistence and the WAV
endpoints are bit-stable.

One file per session: a UTF-8 ``key = value`` header, a marker line,
then the binary tensor container holding every waveform.
"""

from __future__ import annotations

import io
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..checkpoint import CheckpointMeta, load_checkpoint
from ..codec import decode, encode, make_codec
from ..denoiser import Denoiser, DenoiserConfig
from ..diffusion import Mode, NoiseSchedule, SamplerConfig, TaskSpec, build_schedule, sample
from ..prompts import PromptTokens, PromptVocab
from ..stems import mix_tracks
from .. import checkpoint as ckpt_mod

GENERATED = "generated"
UPLOADED = "uploaded"

SESSION_HEADER = "STEMFORGE-SESSION v1"
SESSION_MARKER = b"---BINARY---\n"


class ServiceError(Exception):
    """Machine-readable service failure: one of the documented codes."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def invalid_input(msg: str) -> ServiceError:
    return ServiceError("invalid_input", msg)


def not_found(msg: str) -> ServiceError:
    return ServiceError("not_found", msg)


def conflict(msg: str) -> ServiceError:
    return ServiceError("conflict", msg)


def incomplete_session(msg: str) -> ServiceError:
    return ServiceError("incomplete_session", msg)


@dataclass
class LockedTrack:
    waveform: np.ndarray           # float32 (S,)
    provenance: str                # "generated" | "uploaded"
    candidate_ref: str = ""        # source candidate id when generated


@dataclass
class Candidate:
    id: str
    seed: int
    guidance: float
    targets: tuple[int, ...]       # 0-based generated tracks
    tracks: dict[int, np.ndarray]  # all K float32 waveforms


@dataclass
class Session:
    id: str
    prompt: tuple[int, ...]        # content token ids
    locked: dict[int, LockedTrack] = field(default_factory=dict)
    candidates: list[Candidate] = field(default_factory=list)
    status: str = "idle"
    next_candidate: int = 1


class ModelBackend:
    """Checkpoint-backed generation: encode locked tracks, run the guided
    sampler, decode the targets."""

    def __init__(self, model: Denoiser, params: dict, meta: CheckpointMeta):
        self.model = model
        self.params = params
        self.meta = meta
        self.codec = make_codec(meta.codec_kind, meta.frame_size, meta.codec_seed)
        self.schedule: NoiseSchedule = build_schedule(
            "linear", meta.num_steps, meta.beta_start, meta.beta_end)
        self.vocab = PromptVocab(model.config.tracks, meta.num_f0,
                                 meta.num_tempo, meta.num_motifs)

    @classmethod
    def from_checkpoint(cls, path) -> "ModelBackend":
        params, meta = load_checkpoint(path)
        model = Denoiser(DenoiserConfig(**meta.model))
        return cls(model, params, meta)

    @property
    def num_tracks(self) -> int:
        return self.model.config.tracks

    @property
    def num_samples(self) -> int:
        return self.meta.frame_size * self.model.config.frames

    @property
    def sample_rate(self) -> int:
        return self.meta.sample_rate

    def generate(self, targets: frozenset[int], locked_waves: dict[int, np.ndarray],
                 content_tokens: tuple[int, ...], seed: int, guidance: float,
                 ) -> dict[int, np.ndarray]:
        K = self.num_tracks
        task = TaskSpec(targets, {i: Mode.CONDITIONAL for i in range(K)
                                  if i not in targets})
        scale = self.meta.latent_scale
        locked_latents = {
            i: encode(np.asarray(w, dtype=np.float64), self.codec) / scale
            for i, w in locked_waves.items()}
        prompt = PromptTokens(self.vocab.prefix_for(targets), tuple(content_tokens))
        cfg = SamplerConfig(guidance_scale=guidance, seed=seed)
        rng = np.random.default_rng(seed)
        latents = sample(self.model.bind(self.params), task, locked_latents,
                         prompt, cfg, self.schedule, rng)
        out = {}
        for i in sorted(targets):
            wave = decode(latents[i] * scale, self.codec)
            out[i] = wave.astype(np.float32)
        return out


class SessionStore:
    """In-memory sessions persisted one file each; per-session single
    flight is enforced by the status guard under the store lock."""

    def __init__(self, backend: ModelBackend, session_dir=None, seed: int = 0,
                 async_generate: bool = False):
        self.backend = backend
        self.session_dir = Path(session_dir) if session_dir else None
        if self.session_dir:
            self.session_dir.mkdir(parents=True, exist_ok=True)
        self.async_generate = async_generate
        self._lock = threading.Lock()
        self._sessions: dict[str, Session] = {}
        self._counter = 0
        self._rng = np.random.default_rng(seed)

    # -- helpers -------------------------------------------------------------

    def _new_id(self) -> str:
        self._counter += 1
        tag = "".join(f"{b:02x}" for b in self._rng.integers(0, 256, size=4))
        return f"s{self._counter:05d}-{tag}"

    def _validate_waveform(self, samples) -> np.ndarray:
        arr = np.asarray(samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size != self.backend.num_samples:
            raise invalid_input(
                f"waveform must have exactly {self.backend.num_samples} samples")
        if not np.all(np.isfinite(arr)):
            raise invalid_input("waveform contains non-finite samples")
        if np.any(np.abs(arr) > 1.0):
            raise invalid_input("waveform samples must lie in [-1, 1]")
        return arr.astype(np.float32)

    def _validate_track(self, track: int) -> int:
        if not 0 <= track < self.backend.num_tracks:
            raise invalid_input(
                f"track index must lie in [0, {self.backend.num_tracks})")
        return track

    def _get(self, session_id: str) -> Session:
        sess = self._sessions.get(session_id)
        if sess is None and self.session_dir:
            path = self.session_dir / f"{session_id}.session"
            if path.exists():
                sess = load_session(path)
                self._sessions[session_id] = sess
        if sess is None:
            raise not_found(f"unknown session {session_id}")
        return sess

    def _persist(self, sess: Session) -> None:
        if self.session_dir:
            save_session(sess, self.session_dir / f"{sess.id}.session")

    # -- operations ----------------------------------------------------------

    def create(self, prompt_tokens, uploads: dict[int, np.ndarray] | None = None) -> Session:
        vocab_size = self.backend.model.config.vocab_size
        tokens = tuple(int(t) for t in prompt_tokens)
        for t in tokens:
            if not 0 <= t < vocab_size:
                raise invalid_input(f"prompt token {t} outside vocabulary [0, {vocab_size})")
        with self._lock:
            sess = Session(self._new_id(), tokens)
            for track, samples in (uploads or {}).items():
                track = self._validate_track(track)
                sess.locked[track] = LockedTrack(self._validate_waveform(samples), UPLOADED)
            self._sessions[sess.id] = sess
            self._persist(sess)
            return sess

    def get(self, session_id: str) -> Session:
        with self._lock:
            return self._get(session_id)

    def generate(self, session_id: str, seed: int, guidance: float) -> Candidate | None:
        """Returns the candidate, or None when running asynchronously."""
        if not np.isfinite(guidance) or guidance < 0:
            raise invalid_input("lambda must be finite and >= 0")
        with self._lock:
            sess = self._get(session_id)
            if sess.status == "generating":
                raise conflict("a generation is already in flight for this session")
            targets = frozenset(range(self.backend.num_tracks)) - set(sess.locked)
            if not targets:
                raise invalid_input("all tracks are locked; nothing to generate")
            sess.status = "generating"
        if self.async_generate:
            threading.Thread(target=self._run_generation,
                             args=(session_id, targets, seed, guidance),
                             daemon=True).start()
            return None
        return self._run_generation(session_id, targets, seed, guidance)

    def _run_generation(self, session_id: str, targets: frozenset[int],
                        seed: int, guidance: float) -> Candidate:
        sess = self._sessions[session_id]
        try:
            locked_waves = {i: lt.waveform for i, lt in sess.locked.items()}
            generated = self.backend.generate(targets, locked_waves, sess.prompt,
                                              seed, guidance)
            tracks = {}
            for i in range(self.backend.num_tracks):
                if i in generated:
                    tracks[i] = generated[i]
                else:
                    tracks[i] = sess.locked[i].waveform  # returned unchanged, bit-exact
            with self._lock:
                cand = Candidate(f"c{sess.next_candidate:04d}", seed, guidance,
                                 tuple(sorted(targets)), tracks)
                sess.next_candidate += 1
                sess.candidates.append(cand)
                sess.status = "idle"
                self._persist(sess)
                return cand
        except Exception:
            with self._lock:
                sess.status = "idle"
            raise

    def _writable(self, session_id: str) -> Session:
        """Session for mutation: the status guard enforces single-writer."""
        sess = self._get(session_id)
        if sess.status == "generating":
            raise conflict("session is generating; retry when idle")
        return sess

    def select(self, session_id: str, candidate_id: str, tracks) -> Session:
        with self._lock:
            sess = self._writable(session_id)
            cand = next((c for c in sess.candidates if c.id == candidate_id), None)
            if cand is None:
                raise not_found(f"unknown candidate {candidate_id}")
            chosen = [self._validate_track(t) for t in tracks]
            if not chosen:
                raise invalid_input("select at least one track")
            for t in chosen:
                if t in sess.locked:
                    raise conflict(f"track {t} is already locked")
                if t not in cand.targets:
                    raise invalid_input(f"track {t} was not generated in {candidate_id}")
            for t in chosen:
                sess.locked[t] = LockedTrack(cand.tracks[t].copy(), GENERATED, cand.id)
            self._persist(sess)
            return sess

    def unlock(self, session_id: str, track: int) -> Session:
        with self._lock:
            sess = self._writable(session_id)
            track = self._validate_track(track)
            if track not in sess.locked:
                raise invalid_input(f"track {track} is not locked")
            del sess.locked[track]
            self._persist(sess)
            return sess

    def upload(self, session_id: str, track: int, samples) -> Session:
        with self._lock:
            sess = self._writable(session_id)
            track = self._validate_track(track)
            sess.locked[track] = LockedTrack(self._validate_waveform(samples), UPLOADED)
            self._persist(sess)
            return sess

    def mix(self, session_id: str) -> np.ndarray:
        with self._lock:
            sess = self._get(session_id)
            if len(sess.locked) != self.backend.num_tracks:
                raise incomplete_session(
                    f"{len(sess.locked)}/{self.backend.num_tracks} tracks locked")
            stems = np.stack([sess.locked[i].waveform.astype(np.float64)
                              for i in range(self.backend.num_tracks)])
            return mix_tracks(stems, self.backend.meta.target_rms).astype(np.float32)

    def locked_waveform(self, session_id: str, track: int) -> np.ndarray:
        with self._lock:
            sess = self._get(session_id)
            track = self._validate_track(track)
            if track not in sess.locked:
                raise not_found(f"track {track} is not locked")
            return sess.locked[track].waveform

    def candidate_waveform(self, session_id: str, candidate_id: str, track: int) -> np.ndarray:
        with self._lock:
            sess = self._get(session_id)
            cand = next((c for c in sess.candidates if c.id == candidate_id), None)
            if cand is None:
                raise not_found(f"unknown candidate {candidate_id}")
            track = self._validate_track(track)
            return cand.tracks[track]


# -- persistence -------------------------------------------------------------------

def save_session(sess: Session, path) -> None:
    lines = [SESSION_HEADER,
             f"id = {sess.id}",
             f"prompt = {','.join(str(t) for t in sess.prompt)}",
             f"status = idle",  # in-flight state is never persisted
             f"next_candidate = {sess.next_candidate}"]
    locked_parts = [f"{i}:{lt.provenance}:{lt.candidate_ref}"
                    for i, lt in sorted(sess.locked.items())]
    lines.append(f"locked = {';'.join(locked_parts)}")
    cand_parts = [
        f"{c.id}:seed={c.seed}:lambda={c.guidance!r}:targets={'|'.join(map(str, c.targets))}"
        for c in sess.candidates]
    lines.append(f"candidates = {';'.join(cand_parts)}")

    tensors: dict[str, np.ndarray] = {}
    for i, lt in sess.locked.items():
        tensors[f"locked/{i}"] = lt.waveform
    for c in sess.candidates:
        for i, wave in c.tracks.items():
            tensors[f"cand/{c.id}/{i}"] = wave
    buf = io.BytesIO()
    tmp = Path(str(path) + ".tensors.tmp")
    ckpt_mod.write_tensors(tmp, tensors)
    blob = tmp.read_bytes()
    tmp.unlink()
    payload = "\n".join(lines).encode("utf-8") + b"\n" + SESSION_MARKER + blob
    Path(path).write_bytes(payload)


def load_session(path) -> Session:
    blob = Path(path).read_bytes()
    marker = blob.find(SESSION_MARKER)
    if marker < 0:
        raise ServiceError("invalid_input", f"{path} is not a session file")
    header = blob[:marker].decode("utf-8").splitlines()
    if not header or header[0] != SESSION_HEADER:
        raise ServiceError("invalid_input", "bad session header")
    kv = {}
    for line in header[1:]:
        if line.strip():
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()

    tmp = Path(str(path) + ".tensors.tmp")
    tmp.write_bytes(blob[marker + len(SESSION_MARKER):])
    try:
        tensors = ckpt_mod.read_tensors(tmp)
    finally:
        tmp.unlink()

    prompt = tuple(int(t) for t in kv["prompt"].split(",") if t != "")
    sess = Session(kv["id"], prompt, next_candidate=int(kv.get("next_candidate", 1)))
    for part in filter(None, kv.get("candidates", "").split(";")):
        cid, seed_s, lam_s, tgt_s = part.split(":")
        targets = tuple(int(t) for t in tgt_s.split("=")[1].split("|") if t != "")
        tracks = {}
        for name, arr in tensors.items():
            if name.startswith(f"cand/{cid}/"):
                tracks[int(name.rsplit("/", 1)[1])] = arr
        sess.candidates.append(Candidate(
            cid, int(seed_s.split("=")[1]), float(lam_s.split("=")[1]), targets, tracks))
    for part in filter(None, kv.get("locked", "").split(";")):
        idx_s, provenance, ref = part.split(":")
        idx = int(idx_s)
        sess.locked[idx] = LockedTrack(tensors[f"locked/{idx}"], provenance, ref)
    return sess
