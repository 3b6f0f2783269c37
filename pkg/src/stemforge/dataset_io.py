"""Bit-exact dataset container ("STEM") and the line-based config format.

Container layout (all integers little-endian): magic ``STEM``, version
u32, header (track count u32, sample rate u32, samples-per-stem u32,
prompt vocab size u32, record count u64), then per record: prompt token
count u32 + u32 token ids, meta (f0 float64, tempo period u32, motif
u32, seed u64), and K x S float32 waveform data.  A CRC32 of everything
after magic+version trails the file.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .prompts import PromptTokens
from .stems import NUM_TRACKS, DatasetConfig, StemMeta, StemSample

MAGIC = b"STEM"
VERSION = 1


class DatasetFormatError(ValueError):
    """Bad magic/version, CRC mismatch, or truncated record."""


def write_dataset(samples: Sequence[StemSample], path, config: DatasetConfig) -> None:
    parts: list[bytes] = [struct.pack(
        "<IIIIQ", NUM_TRACKS, config.sample_rate, config.length,
        config.vocab.size, len(samples))]
    for sample in samples:
        tokens = sample.prompt.content_tokens
        parts.append(struct.pack(f"<I{len(tokens)}I", len(tokens), *tokens))
        meta = sample.meta
        parts.append(struct.pack("<dIIQ", meta.f0, meta.tempo_period,
                                 meta.motif_id, meta.seed))
        wav = np.ascontiguousarray(sample.waveforms, dtype="<f4")
        if wav.shape != (NUM_TRACKS, config.length):
            raise ValueError(f"waveform block has shape {wav.shape}")
        parts.append(wav.tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_dataset(path) -> tuple[list[StemSample], dict]:
    """Returns (samples, header) where header carries num_tracks,
    sample_rate, length, and vocab_size."""
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise DatasetFormatError("bad magic: not a STEM dataset")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    if len(blob) < 12 + 24:
        raise DatasetFormatError("truncated header")
    payload = blob[8:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise DatasetFormatError("CRC mismatch: dataset corrupted")

    try:
        num_tracks, sample_rate, length, vocab_size, count = struct.unpack_from("<IIIIQ", payload, 0)
        off = 24
        samples: list[StemSample] = []
        for _ in range(count):
            (ntok,) = struct.unpack_from("<I", payload, off)
            off += 4
            tokens = struct.unpack_from(f"<{ntok}I", payload, off)
            off += 4 * ntok
            f0, period, motif, seed = struct.unpack_from("<dIIQ", payload, off)
            off += 24
            nbytes = 4 * num_tracks * length
            raw = payload[off:off + nbytes]
            if len(raw) != nbytes:
                raise DatasetFormatError("truncated waveform record")
            off += nbytes
            wav = np.frombuffer(raw, dtype="<f4").reshape(num_tracks, length).astype(np.float64)
            samples.append(StemSample(wav, PromptTokens(None, tuple(tokens)),
                                      StemMeta(f0, period, motif, seed)))
    except struct.error as exc:
        raise DatasetFormatError(f"truncated record: {exc}") from exc
    if off != len(payload):
        raise DatasetFormatError("trailing bytes after last record")
    header = {"num_tracks": num_tracks, "sample_rate": sample_rate,
              "length": length, "vocab_size": vocab_size}
    return samples, header


# -- key = value config files --------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    """Line-based UTF-8 ``key = value`` pairs; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config_file(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def dataset_config_from_mapping(raw: dict[str, str]) -> DatasetConfig:
    kwargs: dict = {}
    simple_int = {"sample_rate", "num_samples", "seed", "motif_count", "frame_size"}
    for key, value in raw.items():
        if key in simple_int:
            kwargs[key] = int(value)
        elif key == "length":
            kwargs["length"] = int(value)
        elif key == "f0_buckets":
            kwargs["f0_buckets"] = tuple(float(v) for v in value.split(","))
        elif key == "tempo_buckets":
            kwargs["tempo_buckets"] = tuple(int(v) for v in value.split(","))
        elif key == "codec_kind":
            kwargs["codec_kind"] = value
        elif key == "target_rms":
            kwargs["target_rms"] = float(value)
        else:
            raise ValueError(f"unknown dataset config key {key!r}")
    return DatasetConfig(**kwargs)


def load_dataset_config(path) -> DatasetConfig:
    return dataset_config_from_mapping(load_config_file(path))
