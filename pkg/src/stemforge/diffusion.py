"""Core diffusion math for multi-track latent generation.

Noise schedules, the closed-form forward corruption, the reverse-step
posterior mean, per-track timestep vectors, classifier-free guidance,
and the multi-track ancestral sampler.

Conventions
-----------
* A track latent block is a float array of shape ``(K, D, S')`` —
  tracks x latent channels x frames.  Batched variants carry a leading
  batch axis ``(B, K, D, S')``.
* Timesteps are integers in ``[0, T]``.  ``0`` means clean data and
  ``T`` means pure noise; schedule arrays are indexed with ``t - 1``.
* Every stochastic operation takes an explicit ``numpy.random.Generator``;
  nothing touches global random state.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np


class Mode(enum.Enum):
    """Role of a non-target track during assembly and sampling."""

    CONDITIONAL = "conditional"  # timestep 0: track enters clean
    MARGINAL = "marginal"        # timestep T: track is pure noise


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Corruption schedule: beta_t, alpha_t = 1 - beta_t, and the running
    product alpha_bar_t, for t = 1..T (stored at index t-1)."""

    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta_tilde(self, t: int | np.ndarray) -> np.ndarray:
        """Posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t,
        with abar_0 defined as 1 (so beta_tilde_1 == 0)."""
        t = np.asarray(t)
        ab_prev = np.where(t > 1, self.alpha_bars[np.maximum(t - 2, 0)], 1.0)
        ab = self.alpha_bars[t - 1]
        return (1.0 - ab_prev) / (1.0 - ab) * self.betas[t - 1]


def build_schedule(
    kind: str = "linear",
    num_steps: int = 100,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    """Build a noise schedule.  Only the linear beta schedule is supported.

    Betas are linearly interpolated from ``beta_start`` to ``beta_end``
    inclusive of both endpoints (a single-step schedule uses ``beta_start``).
    """
    if kind != "linear":
        raise ValueError(f"unknown schedule kind: {kind!r}")
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if not (np.isfinite(beta_start) and np.isfinite(beta_end)):
        raise ValueError("beta bounds must be finite")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")

    if num_steps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(num_steps, betas, alphas, alpha_bars)


def _check_t(t: np.ndarray, num_steps: int) -> None:
    if np.any(t < 1) or np.any(t > num_steps):
        raise ValueError(f"timestep out of range [1, {num_steps}]")


def forward_diffuse(
    z0: np.ndarray,
    t: int | np.ndarray,
    eps: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Closed-form forward corruption: sqrt(abar_t) z0 + sqrt(1-abar_t) eps.

    ``t`` may be a scalar or an array broadcastable against the leading
    axes of ``z0`` (one timestep per batch element).  Deterministic given
    ``eps``.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {z0.shape} vs eps {eps.shape}")
    t = np.asarray(t)
    _check_t(t, schedule.num_steps)
    ab = schedule.alpha_bars[t - 1]
    if t.ndim > 0:
        ab = ab.reshape(ab.shape + (1,) * (z0.ndim - ab.ndim))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def posterior_mean(
    z_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int | np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Reverse-step mean: (z_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)."""
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: z_t {z_t.shape} vs eps_hat {eps_hat.shape}")
    if not (np.all(np.isfinite(z_t)) and np.all(np.isfinite(eps_hat))):
        raise ValueError("non-finite inputs to posterior_mean")
    t = np.asarray(t)
    _check_t(t, schedule.num_steps)
    alpha = schedule.alphas[t - 1]
    beta = schedule.betas[t - 1]
    ab = schedule.alpha_bars[t - 1]
    if t.ndim > 0:
        expand = (...,) + (None,) * (z_t.ndim - t.ndim)
        alpha, beta, ab = alpha[expand], beta[expand], ab[expand]
    return (z_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)


# ---------------------------------------------------------------------------
# Tasks and timestep vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    """Which tracks are generated, and the role of the rest.

    ``targets`` is a nonempty set of 0-based track indices; every other
    track index in ``range(K)`` must appear in ``nontarget_mode``.
    """

    targets: frozenset[int]
    nontarget_mode: Mapping[int, Mode] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", frozenset(self.targets))
        object.__setattr__(self, "nontarget_mode", dict(self.nontarget_mode))
        if not self.targets:
            raise ValueError("TaskSpec needs at least one target track")
        overlap = self.targets & set(self.nontarget_mode)
        if overlap:
            raise ValueError(f"tracks {sorted(overlap)} are both target and non-target")
        covered = self.targets | set(self.nontarget_mode)
        if covered != set(range(len(covered))):
            raise ValueError("targets and nontarget_mode must partition 0..K-1")

    @property
    def num_tracks(self) -> int:
        return len(self.targets) + len(self.nontarget_mode)

    @property
    def is_joint(self) -> bool:
        return not self.nontarget_mode

    def conditional_tracks(self) -> list[int]:
        return sorted(i for i, m in self.nontarget_mode.items() if m is Mode.CONDITIONAL)

    def marginal_tracks(self) -> list[int]:
        return sorted(i for i, m in self.nontarget_mode.items() if m is Mode.MARGINAL)


def joint_task(num_tracks: int) -> TaskSpec:
    return TaskSpec(frozenset(range(num_tracks)))


def conditional_task(targets: Sequence[int], num_tracks: int) -> TaskSpec:
    """All non-target tracks conditional (clean, timestep 0)."""
    tset = frozenset(targets)
    return TaskSpec(tset, {i: Mode.CONDITIONAL for i in range(num_tracks) if i not in tset})


@dataclass(frozen=True)
class TimestepVector:
    """Per-track timesteps [t_1..t_K]: a shared t on target tracks, and
    exactly 0 (conditional) or T (marginal) elsewhere."""

    steps: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", np.asarray(self.steps, dtype=np.int64))

    def validate(self, task: TaskSpec, num_steps: int) -> None:
        steps = self.steps
        if steps.shape != (task.num_tracks,):
            raise ValueError("timestep vector length must equal track count")
        if np.any(steps < 0) or np.any(steps > num_steps):
            raise ValueError(f"timesteps must lie in [0, {num_steps}]")
        tgt = sorted(task.targets)
        if len(set(steps[tgt].tolist())) != 1:
            raise ValueError("target tracks must share one timestep")
        for i, mode in task.nontarget_mode.items():
            want = 0 if mode is Mode.CONDITIONAL else num_steps
            if steps[i] != want:
                raise ValueError(f"track {i} must sit at timestep {want}")


def timestep_vector(task: TaskSpec, t: int, num_steps: int) -> TimestepVector:
    """Assemble the timestep vector for ``task`` with the targets at ``t``."""
    steps = np.zeros(task.num_tracks, dtype=np.int64)
    for i in task.targets:
        steps[i] = t
    for i, mode in task.nontarget_mode.items():
        steps[i] = 0 if mode is Mode.CONDITIONAL else num_steps
    tvec = TimestepVector(steps)
    tvec.validate(task, num_steps)
    return tvec


# ---------------------------------------------------------------------------
# Input assembly and guidance
# ---------------------------------------------------------------------------

def assemble_input_batch(
    clean: np.ndarray,
    tsteps: np.ndarray,
    noise: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Per-track three-case assembly over a batch.

    ``clean`` and ``noise`` have shape (..., K, D, S') and ``tsteps``
    (..., K).  Track i becomes: clean_i at t=0, noise_i at t=T, and the
    forward-diffused mixture otherwise.  The t=0 / t=T cases reproduce
    clean / noise bit-identically.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ValueError("clean and noise must have identical shapes")
    tsteps = np.asarray(tsteps, dtype=np.int64)
    if tsteps.shape != clean.shape[:-2]:
        raise ValueError("tsteps must match the leading (batch, track) axes")
    T = schedule.num_steps
    if np.any(tsteps < 0) or np.any(tsteps > T):
        raise ValueError(f"timesteps must lie in [0, {T}]")

    idx = np.clip(tsteps, 1, T) - 1
    ab = schedule.alpha_bars[idx][..., None, None]
    diffused = np.sqrt(ab) * clean + np.sqrt(1.0 - ab) * noise
    sel = tsteps[..., None, None]
    return np.where(sel == 0, clean, np.where(sel == T, noise, diffused))


def assemble_input(
    clean: np.ndarray,
    tvec: TimestepVector,
    noise: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Single-sample (K, D, S') version of :func:`assemble_input_batch`."""
    return assemble_input_batch(clean, tvec.steps, noise, schedule)


def cfg_combine(eps_marginal: np.ndarray, eps_conditional: np.ndarray, lam: float) -> np.ndarray:
    """Classifier-free guidance: (1 - lambda) * marginal + lambda * conditional."""
    eps_marginal = np.asarray(eps_marginal)
    eps_conditional = np.asarray(eps_conditional)
    if eps_marginal.shape != eps_conditional.shape:
        raise ValueError("guidance branches must have identical shapes")
    return (1.0 - lam) * eps_marginal + lam * eps_conditional


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------

VARIANCE_CHOICES = ("beta_t", "beta_tilde")
MARGINAL_NOISE_POLICIES = ("fixed", "per_step")


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-sampler knobs.  ``seed`` is provenance only; callers pass an
    explicit generator to :func:`sample`.

    ``text_guidance_scale`` enables an extra prompt-content guidance
    branch on the joint path (trained with prompt dropout); it is off by
    default and independent of the track-level guidance.
    """

    guidance_scale: float = 7.0
    variance_choice: str = "beta_t"
    marginal_noise_policy: str = "fixed"
    seed: int = 0
    text_guidance_scale: float | None = None

    def __post_init__(self) -> None:
        if not np.isfinite(self.guidance_scale):
            raise ValueError("guidance scale must be finite")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.variance_choice not in VARIANCE_CHOICES:
            raise ValueError(f"variance_choice must be one of {VARIANCE_CHOICES}")
        if self.marginal_noise_policy not in MARGINAL_NOISE_POLICIES:
            raise ValueError(f"marginal_noise_policy must be one of {MARGINAL_NOISE_POLICIES}")


class DenoiserHandle(Protocol):
    """Read-only denoiser snapshot consumed by :func:`sample`.

    ``latent_shape`` is (K, D, S'); ``predict`` maps a batch of latent
    blocks (B, K, D, S'), per-example timestep vectors (B, K) and one
    prompt per example to predicted noise (B, K, D, S').
    """

    @property
    def latent_shape(self) -> tuple[int, int, int]: ...

    def predict(self, z: np.ndarray, tsteps: np.ndarray, prompts: Sequence) -> np.ndarray: ...


def sample(
    denoiser: DenoiserHandle,
    task: TaskSpec,
    locked: Mapping[int, np.ndarray],
    prompt,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    batch: int = 1,
) -> np.ndarray:
    """Generate the target tracks of ``task`` by reverse diffusion.

    ``locked`` maps each Conditional non-target track to its clean latent
    (D, S').  Marginal non-targets are held at pure noise in both guidance
    branches.  Target tracks start from standard Gaussian noise and are
    denoised from t=T to 1 with a shared timestep; when the task is not
    joint, each step runs the conditional branch (non-targets clean at 0)
    and the marginal branch (non-targets noise at T) and blends them with
    :func:`cfg_combine`.  Every step adds sigma_t-scaled Gaussian noise,
    including t=1 (under the beta-tilde variance sigma_1 is exactly 0).
    Only target channels are ever written; non-target channels of the
    returned block equal their initialized values bit-exactly.

    Draw order (fixed for reproducibility): (1) target initialization
    noise, (2) the marginal-branch noise for all non-target tracks, then
    per step (3) a marginal redraw when the policy is ``per_step`` and
    (4) the reverse-step noise.

    Returns (K, D, S') when ``batch`` is 1, else (batch, K, D, S').
    """
    K, D, Sp = denoiser.latent_shape
    if task.num_tracks != K:
        raise ValueError(f"task covers {task.num_tracks} tracks, denoiser expects {K}")
    T = schedule.num_steps
    targets = sorted(task.targets)
    nontargets = sorted(task.nontarget_mode)
    cond_tracks = task.conditional_tracks()
    if sorted(locked) != cond_tracks:
        raise ValueError(
            f"locked must cover exactly the conditional tracks {cond_tracks}, got {sorted(locked)}"
        )

    locked_block = np.zeros((batch, len(nontargets), D, Sp), dtype=np.float64)
    for j, i in enumerate(nontargets):
        if i in locked:
            lat = np.asarray(locked[i], dtype=np.float64)
            if lat.shape == (D, Sp):
                locked_block[:, j] = lat
            elif lat.shape == (batch, D, Sp):
                locked_block[:, j] = lat
            else:
                raise ValueError(f"locked latent for track {i} has shape {lat.shape}")

    z_t = rng.standard_normal((batch, len(targets), D, Sp))
    marg_noise = rng.standard_normal((batch, len(nontargets), D, Sp))
    init_marg = marg_noise

    cond_mask = np.array([i in locked for i in nontargets], dtype=bool)
    if isinstance(prompt, (list, tuple)):
        prompts = list(prompt)
        if len(prompts) != batch:
            raise ValueError("need one prompt per batch element")
    else:
        prompts = [prompt] * batch

    def branch(z_tgt: np.ndarray, nt_latents: np.ndarray, nt_steps: np.ndarray,
               t: int, branch_prompts=None) -> np.ndarray:
        z = np.empty((batch, K, D, Sp), dtype=np.float64)
        steps = np.empty((batch, K), dtype=np.int64)
        z[:, targets] = z_tgt
        steps[:, targets] = t
        if nontargets:
            z[:, nontargets] = nt_latents
            steps[:, nontargets] = nt_steps
        return denoiser.predict(z, steps, branch_prompts or prompts)

    nt_steps_cond = np.where(cond_mask, 0, T)
    nt_steps_marg = np.full(len(nontargets), T, dtype=np.int64)

    for t in range(T, 0, -1):
        if cfg.marginal_noise_policy == "per_step":
            marg_noise = rng.standard_normal((batch, len(nontargets), D, Sp))
        cond_latents = np.where(cond_mask[None, :, None, None], locked_block, marg_noise)
        eps_c = branch(z_t, cond_latents, nt_steps_cond, t)
        if task.is_joint:
            eps = eps_c
            if cfg.text_guidance_scale is not None:
                null_prompts = [p.strip_content() for p in prompts]
                eps_null = branch(z_t, cond_latents, nt_steps_cond, t, null_prompts)
                eps = cfg_combine(eps_null, eps_c, cfg.text_guidance_scale)
        else:
            eps_m = branch(z_t, marg_noise, nt_steps_marg, t)
            eps = cfg_combine(eps_m, eps_c, cfg.guidance_scale)
        mean = posterior_mean(z_t, eps[:, targets], t, schedule)
        if cfg.variance_choice == "beta_t":
            var = schedule.betas[t - 1]
        else:
            var = float(schedule.beta_tilde(t))
        xi = rng.standard_normal(z_t.shape)
        z_t = mean + np.sqrt(var) * xi

    out = np.empty((batch, K, D, Sp), dtype=np.float64)
    out[:, targets] = z_t
    if nontargets:
        out[:, nontargets] = np.where(
            cond_mask[None, :, None, None], locked_block, init_marg
        )
    return out[0] if batch == 1 else out
