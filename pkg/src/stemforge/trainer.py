"""Curriculum training loop: task allocation, masked multi-track loss,
AdamW with global-norm clipping, EMA teacher, and self-bootstrapping.

Each optimizer step samples one task (target subset) for the batch and,
when tracks are left over, one joint Conditional/Marginal role for them;
every example draws its own shared target timestep uniformly from
{1..T}.  The loss is mean squared noise-prediction error over target
channels only.  From the bootstrap epoch on, conditional input tracks
are probabilistically replaced with EMA-teacher generations conditioned
on the remaining ground-truth tracks.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import codec as codec_mod
from .checkpoint import write_tensors
from .curriculum import (CurriculumConfig, category_of, sample_nontarget_modes,
                         sample_task, task_probabilities)
from .denoiser import Denoiser, NonFiniteValues
from .diffusion import (Mode, NoiseSchedule, SamplerConfig, TaskSpec,
                        assemble_input_batch, cfg_combine, posterior_mean)
from .optim import AdamWState, TrainConfig, adamw_step, clip_gradients, ema_update
from .prompts import PromptTokens, PromptVocab
from .stems import StemSample


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; training state was dumped if a dir was given."""


# -- masked loss ---------------------------------------------------------------

def masked_loss(eps_pred: np.ndarray, eps_true: np.ndarray, targets) -> float:
    """MSE over target-track channels only; non-targets contribute exactly 0."""
    loss, _ = masked_loss_and_grad(eps_pred, eps_true, targets)
    return loss


def masked_loss_and_grad(eps_pred: np.ndarray, eps_true: np.ndarray, targets):
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    eps_true = np.asarray(eps_true, dtype=np.float64)
    if eps_pred.shape != eps_true.shape:
        raise ValueError("prediction and target shapes differ")
    tgt = sorted(targets)
    if not tgt:
        raise ValueError("target set must be nonempty")
    track_axis = eps_pred.ndim - 3
    sl = (slice(None),) * track_axis + (tgt,)
    diff = eps_pred[sl] - eps_true[sl]
    n = diff.size
    loss = float(np.sum(np.square(diff)) / n)
    grad = np.zeros(eps_pred.shape, dtype=np.float64)  # C order regardless of input layout
    grad[sl] = 2.0 * diff / n
    return loss, grad


# -- latent-space dataset --------------------------------------------------------

class LatentDataset:
    """Stem samples encoded to latent blocks and scaled to unit-ish RMS.

    ``latent_scale`` divides the codec output before diffusion (and
    multiplies it back before decoding); with the default equal to the
    stems' target RMS the latents the model sees have RMS close to 1.
    """

    def __init__(self, samples: Sequence[StemSample], codec: codec_mod.CodecSpec,
                 vocab: PromptVocab, latent_scale: float = 0.1):
        if not samples:
            raise ValueError("dataset must be non-empty")
        if latent_scale <= 0:
            raise ValueError("latent_scale must be positive")
        self.codec = codec
        self.vocab = vocab
        self.latent_scale = latent_scale
        self.latents = np.stack(
            [codec_mod.encode(s.waveforms, codec) for s in samples]) / latent_scale
        self.prompts = [s.prompt for s in samples]
        self.metas = [s.meta for s in samples]

    def __len__(self) -> int:
        return self.latents.shape[0]

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.latents.shape[1:]

    def decode(self, latents: np.ndarray) -> np.ndarray:
        return codec_mod.decode(np.asarray(latents) * self.latent_scale, self.codec)


# -- self-bootstrapping -----------------------------------------------------------

def _teacher_sample_multi(teacher, clean: np.ndarray, replaced_sets,
                          prompts: Sequence[PromptTokens], schedule: NoiseSchedule,
                          cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """One guided reverse trajectory for a batch whose examples each have
    their own target (replaced) subset; everything else conditions clean.

    Semantically each example follows the standard sampler (conditional
    branch: non-targets clean at 0; marginal branch: non-targets noise at
    T); batching them into shared denoiser calls keeps bootstrapping
    affordable.  Noise is drawn full-block per step with a fixed order,
    so training replays bit-identically.
    """
    B, K, D, Sp = clean.shape
    mask = np.zeros((B, K), dtype=bool)
    for e, replaced in enumerate(replaced_sets):
        mask[e, list(replaced)] = True
    m4 = mask[:, :, None, None]
    T = schedule.num_steps

    z_t = rng.standard_normal(clean.shape)
    marg = rng.standard_normal(clean.shape)
    for t in range(T, 0, -1):
        if cfg.marginal_noise_policy == "per_step":
            marg = rng.standard_normal(clean.shape)
        z_c = np.where(m4, z_t, clean)
        ts_c = np.where(mask, t, 0)
        z_m = np.where(m4, z_t, marg)
        ts_m = np.where(mask, t, T)
        eps_c = teacher.predict(z_c, ts_c, prompts)
        eps_m = teacher.predict(z_m, ts_m, prompts)
        eps = cfg_combine(eps_m, eps_c, cfg.guidance_scale)
        mean = posterior_mean(z_t, eps, t, schedule)
        if cfg.variance_choice == "beta_t":
            var = schedule.betas[t - 1]
        else:
            var = float(schedule.beta_tilde(t))
        xi = rng.standard_normal(clean.shape)
        z_t = np.where(m4, mean + np.sqrt(var) * xi, z_t)
    return np.where(m4, z_t, clean)


def bootstrap_batch(latents: np.ndarray, prompts: Sequence[PromptTokens],
                    teacher, task: TaskSpec, p2: float, epoch: int,
                    config: CurriculumConfig, schedule: NoiseSchedule,
                    sampler_cfg: SamplerConfig, vocab: PromptVocab,
                    rng: np.random.Generator) -> np.ndarray:
    """Replace conditional input tracks with teacher generations.

    Before the bootstrap epoch (or when the task has no Conditional
    tracks) the batch is returned untouched.  Otherwise each example
    triggers with probability p2; a triggered example replaces each of
    its Conditional tracks independently with probability 1/2 (at least
    one), using the teacher to sample those tracks conditioned on all
    remaining ground-truth tracks and the prompt.
    """
    if epoch < config.bootstrap_start_fraction * config.total_epochs:
        return latents
    cond = task.conditional_tracks()
    if not cond or p2 == 0.0:
        return latents
    if teacher is None:
        raise ValueError("bootstrap requires a teacher model")

    triggered: list[int] = []
    replaced_sets: list[tuple[int, ...]] = []
    for e in range(latents.shape[0]):
        if rng.uniform() >= p2:
            continue
        flags = rng.uniform(size=len(cond)) < 0.5
        if not flags.any():
            flags[rng.integers(len(cond))] = True
        triggered.append(e)
        replaced_sets.append(tuple(c for c, f in zip(cond, flags) if f))
    if not triggered:
        return latents

    sub_prompts = [prompts[e].with_prefix(vocab.prefix_for(r))
                   for e, r in zip(triggered, replaced_sets)]
    gen = _teacher_sample_multi(teacher, latents[triggered], replaced_sets,
                                sub_prompts, schedule, sampler_cfg, rng)
    out = latents.copy()
    for j, (e, replaced) in enumerate(zip(triggered, replaced_sets)):
        for track in replaced:
            out[e, track] = gen[j, track]
    return out


# -- training loop -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainOptions:
    """Trainer knobs outside the two core configs."""

    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    prompt_dropout: float = 0.0       # fraction of examples losing content tokens
    bootstrap_interval: int = 1       # bootstrap every Nth eligible step
    log_path: str | None = None       # ndjson metrics, one line per epoch
    dump_dir: str | None = None       # divergence state dumps


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    ema_params: dict[str, np.ndarray]
    metrics: list[dict]
    steps: int


def _build_tsteps(task: TaskSpec, t_batch: np.ndarray, num_steps: int) -> np.ndarray:
    B = t_batch.shape[0]
    steps = np.zeros((B, task.num_tracks), dtype=np.int64)
    for i in task.targets:
        steps[:, i] = t_batch
    for i, mode in task.nontarget_mode.items():
        steps[:, i] = 0 if mode is Mode.CONDITIONAL else num_steps
    return steps


def train(model: Denoiser, data: LatentDataset, cur_cfg: CurriculumConfig,
          train_cfg: TrainConfig, schedule: NoiseSchedule, rng: np.random.Generator,
          options: TrainOptions | None = None,
          initial_params: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Run the curriculum; returns final and EMA parameters plus the
    per-epoch metrics (mean loss per task category, lr, wall time).
    Fully deterministic given the generator state and inputs."""
    options = options or TrainOptions()
    cfg = model.config
    if data.latent_shape != (cfg.tracks, cfg.latent_dim, cfg.frames):
        raise ValueError(f"dataset latents {data.latent_shape} do not match model "
                         f"{(cfg.tracks, cfg.latent_dim, cfg.frames)}")
    if cur_cfg.tracks != cfg.tracks:
        raise ValueError("curriculum track count does not match the model")
    if cur_cfg.total_epochs != train_cfg.epochs:
        raise ValueError("curriculum total_epochs must equal train epochs")

    if initial_params is None:
        params = model.init_params(rng)
    else:
        params = {k: v.copy() for k, v in initial_params.items()}
    ema = {k: v.copy() for k, v in params.items()}

    N = len(data)
    B = train_cfg.batch_size
    steps_per_epoch = math.ceil(N / B)
    total_steps = train_cfg.epochs * steps_per_epoch
    opt_state = AdamWState.for_params(params, total_steps)
    T = schedule.num_steps
    K = cfg.tracks

    log_fh = open(options.log_path, "w", encoding="utf-8") if options.log_path else None
    metrics: list[dict] = []
    step = 0
    eligible_steps = 0  # steps where bootstrap could apply; thinned by interval
    try:
        for epoch in range(train_cfg.epochs):
            t_start = time.perf_counter()
            state = task_probabilities(cur_cfg, epoch)
            order = rng.permutation(N)
            sums = {"single": [0.0, 0], "partial": [0.0, 0], "joint": [0.0, 0]}
            lr = 0.0
            for ofs in range(0, N, B):
                idx = order[ofs:ofs + B]
                targets = sample_task(state, rng)
                if len(targets) < K:
                    modes = sample_nontarget_modes(targets, K, cur_cfg.p1, rng)
                else:
                    modes = {}
                task = TaskSpec(targets, modes)

                clean = data.latents[idx]
                content = [data.prompts[i] for i in idx]
                bootstrap_on = epoch >= cur_cfg.bootstrap_start_fraction * cur_cfg.total_epochs
                if bootstrap_on and task.conditional_tracks() and cur_cfg.p2 > 0:
                    if eligible_steps % options.bootstrap_interval == 0:
                        clean = bootstrap_batch(clean, content, model.bind(ema), task,
                                                cur_cfg.p2, epoch, cur_cfg, schedule,
                                                options.sampler, data.vocab, rng)
                    eligible_steps += 1

                prefix = data.vocab.prefix_for(targets)
                prompts = [p.with_prefix(prefix) for p in content]
                if options.prompt_dropout > 0.0:
                    drop = rng.uniform(size=len(prompts)) < options.prompt_dropout
                    prompts = [p.strip_content() if d else p
                               for p, d in zip(prompts, drop)]

                t_batch = rng.integers(1, T + 1, size=len(idx))
                tsteps = _build_tsteps(task, t_batch, T)
                noise = rng.standard_normal(clean.shape)
                z_in = assemble_input_batch(clean, tsteps, noise, schedule)

                try:
                    pred, cache = model.forward_with_cache(params, z_in, tsteps, prompts)
                    loss, dpred = masked_loss_and_grad(pred, noise, targets)
                    if not np.isfinite(loss):
                        raise NonFiniteValues(f"loss diverged to {loss}")
                    grads = model._backward_from_cache(params, cache, dpred)
                except NonFiniteValues as exc:
                    _dump_state(options.dump_dir, params, epoch, step, str(exc))
                    raise TrainingDiverged(str(exc)) from exc

                clip_gradients(grads, train_cfg.grad_clip)
                lr = adamw_step(params, grads, opt_state, train_cfg, step)
                ema_update(ema, params, cur_cfg.ema_decay)
                step += 1

                bucket = sums[category_of(targets, K)]
                bucket[0] += loss
                bucket[1] += 1

            entry = {"epoch": epoch, "lr": lr,
                     "wall_time": time.perf_counter() - t_start}
            total = [0.0, 0]
            for cat, (acc, cnt) in sums.items():
                entry[f"loss_{cat}"] = acc / cnt if cnt else None
                entry[f"steps_{cat}"] = cnt
                total[0] += acc
                total[1] += cnt
            entry["loss"] = total[0] / total[1]
            metrics.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(params, ema, metrics, step)


def _dump_state(dump_dir: str | None, params: dict, epoch: int, step: int, reason: str) -> None:
    if not dump_dir:
        return
    path = Path(dump_dir)
    path.mkdir(parents=True, exist_ok=True)
    write_tensors(path / "divergence_params.stmf", params)
    (path / "divergence_state.json").write_text(
        json.dumps({"epoch": epoch, "step": step, "reason": reason}), encoding="utf-8")
