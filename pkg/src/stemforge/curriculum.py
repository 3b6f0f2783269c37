"""Curriculum task allocation and the conditional/marginal mode sampler.

Training starts on single-track tasks only (each of the K singleton
target sets at probability 1/K), ends uniform over all 2^K - 1 nonempty
target subsets at 1/(2^K - 1), and linearly interpolates the subset
probabilities through a middle phase.  When a task leaves some tracks
non-target, all of them are jointly assigned the Conditional role
(timestep 0) with probability p1, else all Marginal (timestep T).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import Mode

PROB_TOL = 1e-9


@dataclass(frozen=True)
class CurriculumConfig:
    tracks: int = 4
    total_epochs: int = 60
    phase_boundaries: tuple[float, float] = (0.3, 0.7)
    p1: float = 0.8
    p2: float = 0.5
    bootstrap_start_fraction: float = 0.6
    ema_decay: float = 0.999

    def __post_init__(self) -> None:
        lo, hi = self.phase_boundaries
        if not (0.0 < lo < hi < 1.0):
            raise ValueError("phase boundaries must satisfy 0 < b1 < b2 < 1")
        for name in ("p1", "p2"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.bootstrap_start_fraction <= 1.0:
            raise ValueError("bootstrap_start_fraction must lie in [0, 1]")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.tracks < 1 or self.total_epochs < 1:
            raise ValueError("tracks and total_epochs must be >= 1")


def subset_masks(tracks: int) -> list[int]:
    """Canonical enumeration of nonempty target subsets as bitmasks 1..2^K-1."""
    return list(range(1, 1 << tracks))


def mask_to_targets(mask: int) -> frozenset[int]:
    return frozenset(i for i in range(mask.bit_length()) if mask >> i & 1)


@dataclass(frozen=True)
class CurriculumState:
    epoch: int
    subset_probs: np.ndarray      # prob per mask in subset_masks order
    category_probs: dict          # {"single": _, "partial": _, "joint": _}

    def __post_init__(self) -> None:
        p = np.asarray(self.subset_probs, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
            raise ValueError("subset probabilities must be a distribution")
        object.__setattr__(self, "subset_probs", p)


def _phase_fraction(config: CurriculumConfig, epoch: int) -> float:
    """0 before boundary 1, 1 after boundary 2, linear in between."""
    lo, hi = config.phase_boundaries
    frac = epoch / config.total_epochs
    if frac < lo:
        return 0.0
    if frac >= hi:
        return 1.0
    return (frac - lo) / (hi - lo)


def task_probabilities(config: CurriculumConfig, epoch: int) -> CurriculumState:
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch {epoch} out of range [0, {config.total_epochs})")
    K = config.tracks
    masks = subset_masks(K)
    singles = np.array([bin(m).count("1") == 1 for m in masks])
    p_start = np.where(singles, 1.0 / K, 0.0)
    p_end = np.full(len(masks), 1.0 / len(masks))
    f = _phase_fraction(config, epoch)
    probs = (1.0 - f) * p_start + f * p_end
    probs = probs / probs.sum()

    sizes = np.array([bin(m).count("1") for m in masks])
    cats = {
        "single": float(probs[sizes == 1].sum()),
        "partial": float(probs[(sizes > 1) & (sizes < K)].sum()),
        "joint": float(probs[sizes == K].sum()),
    }
    return CurriculumState(epoch, probs, cats)


def sample_task(state: CurriculumState, rng: np.random.Generator) -> frozenset[int]:
    """Draw a target subset from the state's distribution."""
    masks = subset_masks(int(np.log2(len(state.subset_probs) + 1)))
    idx = rng.choice(len(masks), p=state.subset_probs)
    return mask_to_targets(masks[idx])


def sample_nontarget_modes(targets: frozenset[int], tracks: int, p1: float,
                           rng: np.random.Generator) -> dict[int, Mode]:
    """All non-target tracks jointly Conditional with probability p1, else
    all Marginal.  Only defined when some track is left over."""
    if len(targets) >= tracks:
        raise ValueError("no non-target tracks to assign modes to")
    mode = Mode.CONDITIONAL if rng.uniform() < p1 else Mode.MARGINAL
    return {i: mode for i in range(tracks) if i not in targets}


def category_of(targets: frozenset[int], tracks: int) -> str:
    k = len(targets)
    if k == 1:
        return "single"
    if k == tracks:
        return "joint"
    return "partial"
