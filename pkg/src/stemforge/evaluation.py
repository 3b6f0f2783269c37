"""Metric suite: dominant-frequency coherence across stems, a Frechet
distance over fixed spectral-band features, and chi-square audits of the
curriculum samplers."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import chi2

from .curriculum import CurriculumState, subset_masks
from .stems import INSTRUMENT_RATIOS, MELODY_RATIOS, StemMeta

NUM_BANDS = 16
LOG_FLOOR = 1e-12


# -- dominant frequency ---------------------------------------------------------

def dominant_f0(waveform: np.ndarray, sample_rate: float) -> float:
    """Frequency (Hz) of the max-magnitude DFT bin, DC excluded.

    Uses the full-length unwindowed DFT, so the result is quantized to
    sample_rate / len(waveform); scaling the waveform by any positive
    constant leaves it unchanged.
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1 or waveform.size < 2:
        raise ValueError("need a 1-D waveform with at least two samples")
    if not np.any(waveform):
        raise ValueError("all-zero waveform has no dominant frequency")
    mags = np.abs(np.fft.rfft(waveform))
    mags[0] = 0.0
    bin_idx = int(np.argmax(mags))
    if mags[bin_idx] == 0.0:
        raise ValueError("DC-only signal has no dominant frequency")
    return bin_idx * sample_rate / waveform.size


# -- spectral features and Frechet proxy -----------------------------------------

def spectral_features(waveform: np.ndarray) -> np.ndarray:
    """Log energies over 16 equal-width DFT magnitude bands (DC dropped);
    the window is the full track, no overlap."""
    waveform = np.asarray(waveform, dtype=np.float64)
    mags = np.abs(np.fft.rfft(waveform))[1:]
    usable = (mags.size // NUM_BANDS) * NUM_BANDS
    bands = np.square(mags[:usable]).reshape(NUM_BANDS, -1).sum(axis=1)
    return np.log(bands + LOG_FLOOR)


def frechet_proxy(features_a: np.ndarray, features_b: np.ndarray,
                  min_count: int = 32) -> float:
    """Frechet distance between Gaussian fits of two feature sets:
    ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)), with the matrix
    square roots taken by symmetric eigendecomposition and negative
    eigenvalues clamped to zero."""
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.shape[0] < min_count or b.shape[0] < min_count:
        raise ValueError(f"each feature set needs >= {min_count} rows")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.atleast_2d(np.cov(a, rowvar=False))
    cb = np.atleast_2d(np.cov(b, rowvar=False))

    def psd_sqrt(m: np.ndarray) -> np.ndarray:
        vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
        vals = np.clip(vals, 0.0, None)
        return (vecs * np.sqrt(vals)) @ vecs.T

    sb_half = psd_sqrt(cb)
    cross = psd_sqrt(sb_half @ ca @ sb_half)
    dist = float(np.sum(np.square(mu_a - mu_b))
                 + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(cross))
    return max(dist, 0.0)


# -- coherence ----------------------------------------------------------------------

@dataclass(frozen=True)
class CoherenceCheck:
    name: str
    track: int
    value: float       # measured ratio (or period, for drums)
    expected: str
    tolerance: float
    passed: bool


@dataclass(frozen=True)
class CoherenceReport:
    track_f0: tuple[float, ...]      # NaN for silent/undetectable tracks
    checks: tuple[CoherenceCheck, ...]
    silent_tracks: tuple[int, ...]

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _envelope_period(waveform: np.ndarray, max_period: int, smooth: int = 32) -> float:
    """Lag of the autocorrelation peak of the smoothed rectified signal."""
    env = np.convolve(np.abs(waveform), np.ones(smooth) / smooth, mode="same")
    env = env - env.mean()
    ac = np.correlate(env, env, mode="full")[env.size - 1:]
    lo = smooth  # skip the zero-lag lobe
    hi = min(int(max_period * 1.5), ac.size - 1)
    if hi <= lo:
        raise ValueError("waveform too short for period estimation")
    return float(lo + np.argmax(ac[lo:hi]))


def coherence_eval(tracks: np.ndarray, meta: StemMeta, sample_rate: float,
                   check_tracks: Sequence[int] | None = None) -> CoherenceReport:
    """Check the constructed harmonic relations on decoded waveforms.

    tracks is the (K, S) stem block in the canonical order bass, drums,
    instrument, melody.  Frequency checks pass within one DFT bin;
    the drum period check passes within the envelope smoothing window.
    Silent tracks are flagged (their checks fail) but are not fatal.
    """
    tracks = np.asarray(tracks, dtype=np.float64)
    K, S = tracks.shape
    bin_hz = sample_rate / S

    f0s: list[float] = []
    silent: list[int] = []
    for k in range(K):
        try:
            f0s.append(dominant_f0(tracks[k], sample_rate))
        except ValueError:
            f0s.append(float("nan"))
            silent.append(k)

    checks: list[CoherenceCheck] = []
    wanted = set(check_tracks) if check_tracks is not None else set(range(K))

    def ratio_check(name: str, track: int, ratios: Sequence[float]) -> None:
        value = f0s[track] / f0s[0] if np.isfinite(f0s[track]) and np.isfinite(f0s[0]) else float("nan")
        ok = False
        if np.isfinite(value):
            ok = any(abs(f0s[track] - r * f0s[0]) <= bin_hz + 1e-9 for r in ratios)
        checks.append(CoherenceCheck(name, track, value,
                                     "/".join(str(r) for r in ratios), bin_hz, ok))

    if 0 in wanted:
        ok = np.isfinite(f0s[0]) and abs(f0s[0] - meta.f0) <= bin_hz + 1e-9
        checks.append(CoherenceCheck("bass_f0", 0, f0s[0] if np.isfinite(f0s[0]) else float("nan"),
                                     f"{meta.f0}", bin_hz, bool(ok)))
    if 2 in wanted:
        ratio_check("instrument_bass_ratio", 2, INSTRUMENT_RATIOS)
    if 3 in wanted:
        ratio_check("melody_bass_ratio", 3, MELODY_RATIOS)
    if 1 in wanted:
        smooth = 32
        try:
            period = _envelope_period(tracks[1], meta.tempo_period, smooth)
            ok = abs(period - meta.tempo_period) <= smooth
        except ValueError:
            period, ok = float("nan"), False
        checks.append(CoherenceCheck("drum_period", 1, period,
                                     str(meta.tempo_period), float(smooth), bool(ok)))

    return CoherenceReport(tuple(f0s), tuple(checks), tuple(silent))


# -- sampler audits -------------------------------------------------------------------

@dataclass(frozen=True)
class ChiSquareResult:
    name: str
    statistic: float
    dof: int
    threshold: float   # 99% critical value
    passed: bool


@dataclass(frozen=True)
class AuditReport:
    results: tuple[ChiSquareResult, ...]

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)


def chi_square_goodness(counts: np.ndarray, probs: np.ndarray, name: str,
                        level: float = 0.99) -> ChiSquareResult:
    counts = np.asarray(counts, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    n = counts.sum()
    keep = probs > 0
    if np.any(counts[~keep] > 0):
        return ChiSquareResult(name, float("inf"), int(keep.sum()) - 1,
                               float(chi2.ppf(level, max(int(keep.sum()) - 1, 1))), False)
    expected = probs[keep] * n
    stat = float(np.sum(np.square(counts[keep] - expected) / expected))
    dof = int(keep.sum()) - 1
    threshold = float(chi2.ppf(level, dof)) if dof > 0 else 0.0
    return ChiSquareResult(name, stat, dof, threshold, stat <= threshold)


def audit_task_draws(masks: Sequence[int], state: CurriculumState,
                     min_draws: int = 10_000) -> ChiSquareResult:
    """Chi-square fit of drawn target-subset bitmasks against a state."""
    if len(masks) < min_draws:
        raise ValueError(f"need at least {min_draws} draws")
    all_masks = subset_masks(int(np.log2(len(state.subset_probs) + 1)))
    index = {m: i for i, m in enumerate(all_masks)}
    counts = np.zeros(len(all_masks))
    for m in masks:
        counts[index[m]] += 1
    return chi_square_goodness(counts, state.subset_probs, "task_subsets")


def audit_mode_draws(num_conditional: int, total: int, p1: float,
                     min_draws: int = 10_000) -> ChiSquareResult:
    """Chi-square (1 dof) fit of the Conditional/Marginal split against p1."""
    if total < min_draws:
        raise ValueError(f"need at least {min_draws} draws")
    counts = np.array([num_conditional, total - num_conditional], dtype=np.float64)
    return chi_square_goodness(counts, np.array([p1, 1.0 - p1]), "nontarget_modes")


def binomial_band(p: float, n: int, sigmas: float = 3.0) -> tuple[float, float]:
    """p +/- sigmas * sqrt(p (1-p) / n) — the acceptance band on a fraction."""
    half = sigmas * np.sqrt(p * (1.0 - p) / n)
    return (p - half, p + half)


def audit_samplers(task_masks: Sequence[int], state: CurriculumState,
                   num_conditional: int, num_mode_draws: int, p1: float) -> AuditReport:
    """Combined audit used by the evaluation CLI."""
    return AuditReport((
        audit_task_draws(task_masks, state),
        audit_mode_draws(num_conditional, num_mode_draws, p1),
    ))


# -- report writing --------------------------------------------------------------------

@dataclass
class MetricRecord:
    metric: str
    value: float
    passed: bool | None = None
    track: int | None = None
    tolerance: float | None = None


def render_report(records: Sequence[MetricRecord]) -> str:
    """Newline-delimited structured text: metric name, value, pass flag."""
    lines = []
    for r in records:
        flag = "-" if r.passed is None else ("pass" if r.passed else "fail")
        lines.append(f"metric={r.metric} value={r.value:.6g} pass={flag}")
    return "\n".join(lines) + "\n"


def render_csv(records: Sequence[MetricRecord]) -> str:
    """CSV export with stable column order: metric,track,value,tolerance,pass."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "track", "value", "tolerance", "pass"])
    for r in records:
        writer.writerow([
            r.metric,
            "" if r.track is None else r.track,
            f"{r.value:.6g}",
            "" if r.tolerance is None else f"{r.tolerance:.6g}",
            "" if r.passed is None else ("pass" if r.passed else "fail"),
        ])
    return buf.getvalue()
