"""Synthetic multi-stem audio with inter-track relations that are
objectively measurable.

Each sample carries four mono stems sharing a fundamental f0:

* bass        sine at f0 (random phase)
* drums       white-noise bursts gated by a periodic decaying envelope
* instrument  harmonics 2*f0 and 3*f0 at amplitude ratio 0.6 / 0.4,
              phase-locked to the bass
* melody      piecewise sine stepping through motif ratios of f0 drawn
              from {1, 5/4, 3/2}, phase-continuous

so instrument/bass dominant-frequency ratios sit at {2, 3} and
melody/bass in the motif set by construction.  All stems are RMS
normalized; prompts carry the (f0 bucket, tempo bucket, motif) tokens.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .prompts import PromptTokens, PromptVocab

log = logging.getLogger(__name__)

NUM_TRACKS = 4
BASS, DRUMS, INSTRUMENT, MELODY = range(NUM_TRACKS)

# each motif steps through four segments of ratios from {1, 5/4, 3/2}; the
# repeated ratio is contiguous so its DFT peak stays sharp (split repeats
# interfere and can shift the dominant bin)
MOTIFS = (
    (1.0, 1.0, 1.25, 1.5),
    (1.0, 1.25, 1.25, 1.5),
    (1.25, 1.5, 1.5, 1.0),
)
MELODY_RATIOS = (1.0, 1.25, 1.5)
INSTRUMENT_RATIOS = (2.0, 3.0)
INSTRUMENT_WEIGHTS = (0.6, 0.4)


@dataclass(frozen=True)
class DatasetConfig:
    sample_rate: int = 4000
    num_samples: int = 512
    seed: int = 0
    length: int = 2048                     # S, samples per stem
    f0_buckets: tuple[float, ...] = (200.0, 250.0, 300.0, 350.0)
    tempo_buckets: tuple[int, ...] = (320, 400, 512)   # period in samples
    motif_count: int = 3
    frame_size: int = 32
    codec_kind: str = "identity"
    target_rms: float = 0.1

    def __post_init__(self) -> None:
        if self.length % self.frame_size:
            raise ValueError("length must be divisible by frame_size")
        if self.motif_count < 1 or self.motif_count > len(MOTIFS):
            raise ValueError(f"motif_count must be in [1, {len(MOTIFS)}]")
        if not self.f0_buckets or not self.tempo_buckets:
            raise ValueError("need at least one f0 and one tempo bucket")
        nyquist = self.sample_rate / 2
        for f0 in self.f0_buckets:
            if not 0 < 3 * f0 < nyquist:
                raise ValueError(f"f0 {f0} puts harmonics past Nyquist {nyquist}")
        if self.target_rms <= 0:
            raise ValueError("target_rms must be positive")

    @property
    def vocab(self) -> PromptVocab:
        return PromptVocab(NUM_TRACKS, len(self.f0_buckets),
                           len(self.tempo_buckets), self.motif_count)


@dataclass(frozen=True)
class StemMeta:
    f0: float
    tempo_period: int
    motif_id: int
    seed: int


@dataclass(frozen=True)
class StemSample:
    waveforms: np.ndarray          # (K, S) float64 in [-1, 1]
    prompt: PromptTokens           # content tokens only (no task prefix)
    meta: StemMeta

    def __post_init__(self) -> None:
        object.__setattr__(self, "waveforms", np.asarray(self.waveforms, dtype=np.float64))


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def _drum_envelope(n: int, period: int) -> np.ndarray:
    phase = np.arange(n) % period
    return np.exp(-8.0 * phase / period)


def generate_sample(config: DatasetConfig, seed: int) -> StemSample:
    """Deterministically synthesize one multi-stem sample from a seed."""
    rng = np.random.default_rng(seed)
    f0_i = int(rng.integers(len(config.f0_buckets)))
    tempo_i = int(rng.integers(len(config.tempo_buckets)))
    motif_i = int(rng.integers(config.motif_count))
    phase = float(rng.uniform(0.0, 2.0 * np.pi))

    f0 = config.f0_buckets[f0_i]
    period = config.tempo_buckets[tempo_i]
    n = config.length
    t = np.arange(n) / config.sample_rate
    omega = 2.0 * np.pi * f0

    tracks = np.zeros((NUM_TRACKS, n))
    tracks[BASS] = np.sin(omega * t + phase)
    tracks[DRUMS] = _drum_envelope(n, period) * rng.standard_normal(n)
    tracks[INSTRUMENT] = sum(
        w * np.sin(r * (omega * t + phase))
        for r, w in zip(INSTRUMENT_RATIOS, INSTRUMENT_WEIGHTS))

    # melody: phase-continuous segments at motif ratios of f0
    motif = MOTIFS[motif_i]
    seg = n // len(motif)
    melody = np.empty(n)
    acc = phase
    for j, ratio in enumerate(motif):
        lo = j * seg
        hi = n if j == len(motif) - 1 else lo + seg
        local = np.arange(hi - lo) / config.sample_rate
        melody[lo:hi] = np.sin(ratio * omega * local + acc)
        acc += ratio * omega * (hi - lo) / config.sample_rate
    tracks[MELODY] = melody

    vocab = config.vocab
    prompt = PromptTokens(None, vocab.content_tokens(f0_i, tempo_i, motif_i))
    sample = StemSample(tracks, prompt, StemMeta(f0, period, motif_i, seed))
    return normalize_loudness(sample, config.target_rms)


def normalize_loudness(sample: StemSample, target_rms: float,
                       clip_report: list | None = None) -> StemSample:
    """Scale each track to the target RMS, clipping to [-1, 1] only when
    the rescale overshoots (counts per track are logged and optionally
    appended to ``clip_report``)."""
    if target_rms <= 0:
        raise ValueError("target_rms must be positive")
    out = np.empty_like(sample.waveforms)
    counts = []
    for k, wav in enumerate(sample.waveforms):
        r = rms(wav)
        if r == 0.0:
            raise ValueError(f"track {k} is all zero; cannot normalize")
        scaled = wav * (target_rms / r)
        clipped = int(np.count_nonzero(np.abs(scaled) > 1.0))
        if clipped:
            log.debug("normalize_loudness clipped %d samples on track %d", clipped, k)
            scaled = np.clip(scaled, -1.0, 1.0)
        counts.append(clipped)
        out[k] = scaled
    if clip_report is not None:
        clip_report.append(tuple(counts))
    return replace(sample, waveforms=out)


def mix_tracks(waveforms: np.ndarray, target_rms: float) -> np.ndarray:
    """The derived mix: mean of the stems, re-normalized to the target RMS."""
    m = np.mean(np.asarray(waveforms, dtype=np.float64), axis=0)
    r = rms(m)
    if r == 0.0:
        raise ValueError("mix is all zero")
    m = m * (target_rms / r)
    return np.clip(m, -1.0, 1.0)


def generate_dataset(config: DatasetConfig) -> list[StemSample]:
    """Samples for seeds config.seed .. config.seed + num_samples - 1."""
    return [generate_sample(config, config.seed + i) for i in range(config.num_samples)]
