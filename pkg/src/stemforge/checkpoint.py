"""Binary tensor container ("STMF") used for checkpoints and sessions.

Layout: magic ``STMF``, format version u32, then one record per tensor:
name length u32 + UTF-8 name, rank u32, one u32 per dimension, and the
float32 little-endian data.  A CRC32 of everything after magic+version
trails the file.  All integers are little-endian.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np

MAGIC = b"STMF"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or corrupted container."""


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts: list[bytes] = []
    seen: set[str] = set()
    for name, arr in tensors.items():
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        data = np.asarray(arr, dtype="<f4")
        if not data.flags.c_contiguous:  # ascontiguousarray would promote 0-d
            data = np.ascontiguousarray(data)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("bad magic: not an STMF container")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    payload = blob[8:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: container corrupted")

    tensors: dict[str, np.ndarray] = {}
    off = 0
    end = len(payload)
    while off < end:
        try:
            (nlen,) = struct.unpack_from("<I", payload, off)
            off += 4
            name = payload[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", payload, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", payload, off)
            off += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = payload[off:off + 4 * count]
            if len(raw) != 4 * count:
                raise struct.error("short read")
            off += 4 * count
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointError(f"truncated or malformed record: {exc}") from exc
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return tensors


# -- model checkpoints --------------------------------------------------------

CODEC_KIND_IDS = {"identity": 0, "ortho": 1}
CODEC_KIND_NAMES = {v: k for k, v in CODEC_KIND_IDS.items()}


@dataclass(frozen=True)
class CheckpointMeta:
    """Everything inference needs besides the weights."""

    model: dict[str, int]
    num_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    codec_kind: str = "identity"
    frame_size: int = 32
    codec_seed: int = 0
    sample_rate: int = 4000
    target_rms: float = 0.1
    latent_scale: float = 0.1
    num_f0: int = 4
    num_tempo: int = 3
    num_motifs: int = 3

    def to_tensors(self) -> dict[str, np.ndarray]:
        order = ["tracks", "latent_dim", "frames", "hidden", "depth",
                 "time_embed_dim", "vocab_size", "prompt_embed_dim", "cond_width"]
        return {
            "meta/model": np.array([self.model[k] for k in order], dtype=np.float64),
            "meta/schedule": np.array([self.num_steps, self.beta_start, self.beta_end]),
            "meta/codec": np.array([
                CODEC_KIND_IDS[self.codec_kind], self.frame_size, self.codec_seed,
                self.sample_rate, self.target_rms, self.latent_scale,
            ]),
            "meta/vocab": np.array([self.num_f0, self.num_tempo, self.num_motifs],
                                   dtype=np.float64),
        }

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray]) -> "CheckpointMeta":
        order = ["tracks", "latent_dim", "frames", "hidden", "depth",
                 "time_embed_dim", "vocab_size", "prompt_embed_dim", "cond_width"]
        m = tensors["meta/model"]
        sched = tensors["meta/schedule"]
        codec = tensors["meta/codec"]
        vocab = tensors["meta/vocab"]
        return cls(
            model={k: int(v) for k, v in zip(order, m)},
            num_steps=int(sched[0]), beta_start=float(sched[1]), beta_end=float(sched[2]),
            codec_kind=CODEC_KIND_NAMES[int(codec[0])], frame_size=int(codec[1]),
            codec_seed=int(codec[2]), sample_rate=int(codec[3]),
            target_rms=float(codec[4]), latent_scale=float(codec[5]),
            num_f0=int(vocab[0]), num_tempo=int(vocab[1]), num_motifs=int(vocab[2]),
        )


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: CheckpointMeta) -> None:
    tensors = dict(params)
    for name, arr in meta.to_tensors().items():
        tensors[name] = arr
    write_tensors(path, tensors)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], CheckpointMeta]:
    """Returns (float64 parameter dict, meta).  Weights were stored as
    float32; compute proceeds in float64 after loading."""
    tensors = read_tensors(path)
    meta = CheckpointMeta.from_tensors(tensors)
    params = {k: v.astype(np.float64) for k, v in tensors.items()
              if not k.startswith("meta/")}
    return params, meta
