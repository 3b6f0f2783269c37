"""RIFF WAVE encoding: PCM 16-bit signed little-endian, mono.

Float samples are clipped to [-1, 1], scaled by 32767, and rounded half
away from zero.  The writer emits the canonical 44-byte header, so equal
input always yields byte-identical files.
"""

from __future__ import annotations

import struct

import numpy as np


class WavFormatError(ValueError):
    """Not a RIFF/WAVE PCM16 mono stream we accept."""


def float_to_pcm16(samples: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32767.0
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int16)


def pcm16_to_float(pcm: np.ndarray) -> np.ndarray:
    return np.asarray(pcm, dtype=np.float64) / 32767.0


def encode_wav(samples: np.ndarray, sample_rate: int) -> bytes:
    pcm = float_to_pcm16(samples)
    data = pcm.astype("<i2").tobytes()
    header = (
        b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
        + b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate,
                                sample_rate * 2, 2, 16)
        + b"data" + struct.pack("<I", len(data))
    )
    return header + data


def decode_wav(blob: bytes) -> tuple[np.ndarray, int]:
    """Strict parser for the files this module writes (and any standard
    PCM16 mono RIFF with extra chunks).  Returns (float samples, rate)."""
    if len(blob) < 44 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE stream")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = blob[pos + 8:pos + 8 + size]
        if len(body) != size:
            raise WavFormatError("truncated chunk")
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError("short fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError("missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1 or channels != 1 or bits != 16:
        raise WavFormatError("only PCM16 mono is supported")
    pcm = np.frombuffer(data, dtype="<i2")
    return pcm16_to_float(pcm), rate
