"""Exploratory run of the desk-scale acceptance training (not a test).

Trains the acceptance config, then reports the three convergence checks:
loss halving, instrument/bass coherence on conditional generations, and
the Frechet ordering against a noise-corrupted copy.
"""

import sys
import time

import numpy as np

from stemforge.codec import make_codec
from stemforge.curriculum import CurriculumConfig
from stemforge.denoiser import Denoiser, DenoiserConfig
from stemforge.diffusion import SamplerConfig, build_schedule, conditional_task, joint_task, sample
from stemforge.evaluation import coherence_eval, frechet_proxy, spectral_features
from stemforge.optim import TrainConfig
from stemforge.stems import DatasetConfig, generate_dataset, generate_sample, mix_tracks, rms
from stemforge.trainer import LatentDataset, TrainOptions, train

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 40
SEED = int(sys.argv[2]) if len(sys.argv) > 2 else 0

t_all = time.perf_counter()
dcfg = DatasetConfig(num_samples=512, seed=0)
samples = generate_dataset(dcfg)
codec = make_codec(dcfg.codec_kind, dcfg.frame_size)
data = LatentDataset(samples, codec, dcfg.vocab)

mcfg = DenoiserConfig(tracks=4, latent_dim=32, frames=64, hidden=32, depth=2,
                      time_embed_dim=16, vocab_size=64, prompt_embed_dim=16, cond_width=64)
model = Denoiser(mcfg)
sched = build_schedule("linear", 100, 1e-4, 0.02)
cur = CurriculumConfig(tracks=4, total_epochs=EPOCHS)
tc = TrainConfig(lr_start=2e-3, batch_size=16, epochs=EPOCHS, seed=SEED)

t0 = time.perf_counter()
res = train(model, data, cur, tc, sched, np.random.default_rng(SEED),
            TrainOptions(bootstrap_interval=4))
train_time = time.perf_counter() - t0
losses = [m["loss"] for m in res.metrics]
print(f"train {train_time:.0f}s; epoch1 loss {losses[0]:.4f} final {losses[-1]:.4f} "
      f"ratio {losses[-1]/losses[0]:.3f}", flush=True)
for i in range(0, EPOCHS, max(1, EPOCHS // 10)):
    print(f"  epoch {i}: {losses[i]:.4f}")

# -- (b) conditional generation given bass ---------------------------------------
handle = model.bind(res.ema_params)
task = conditional_task([1, 2, 3], 4)
test_samples = [generate_sample(dcfg, 10_000 + i) for i in range(64)]
from stemforge.codec import encode
bass_latents = np.stack([encode(s.waveforms[0], codec) for s in test_samples]) / data.latent_scale
prompts = [s.prompt.with_prefix(dcfg.vocab.prefix_for({1, 2, 3})) for s in test_samples]
for lam in (1.0, 3.0, 7.0):
    t0 = time.perf_counter()
    gen = sample(handle, task, {0: bass_latents}, prompts, SamplerConfig(guidance_scale=lam),
                 sched, np.random.default_rng(SEED + 1), batch=64)
    passes = 0
    mel = 0
    for i, s in enumerate(test_samples):
        tracks = np.empty((4, dcfg.length))
        tracks[0] = s.waveforms[0]
        for k in (1, 2, 3):
            tracks[k] = data.decode(gen[i, k])
        rep = coherence_eval(tracks, s.meta, dcfg.sample_rate, check_tracks=[2])
        passes += rep.all_passed
        rep2 = coherence_eval(tracks, s.meta, dcfg.sample_rate, check_tracks=[3])
        mel += rep2.all_passed
    print(f"lambda={lam}: instrument/bass {passes}/64 = {passes/64:.2%}  "
          f"melody {mel}/64  ({time.perf_counter()-t0:.0f}s)", flush=True)

# -- (c) Frechet ordering ---------------------------------------------------------
held = [generate_sample(dcfg, 20_000 + i) for i in range(128)]
held_mixes = np.stack([mix_tracks(s.waveforms, dcfg.target_rms) for s in held])
t0 = time.perf_counter()
gen_j = sample(handle, joint_task(4), {},
               [s.prompt.with_prefix(dcfg.vocab.prefix_for({0, 1, 2, 3})) for s in held],
               SamplerConfig(), sched, np.random.default_rng(SEED + 2), batch=128)
print(f"joint sampling {time.perf_counter()-t0:.0f}s", flush=True)
gen_mixes = np.stack([mix_tracks(data.decode(gen_j[i]), dcfg.target_rms) for i in range(128)])
rng = np.random.default_rng(SEED + 3)
noisy = held_mixes + np.stack([rms(m) for m in held_mixes])[:, None] * rng.standard_normal(held_mixes.shape)
f_gen = np.stack([spectral_features(m) for m in gen_mixes])
f_held = np.stack([spectral_features(m) for m in held_mixes])
f_noise = np.stack([spectral_features(m) for m in noisy])
d_gen = frechet_proxy(f_gen, f_held)
d_noise = frechet_proxy(f_noise, f_held)
print(f"frechet(gen, held) = {d_gen:.3f}  frechet(noisy, held) = {d_noise:.3f}  "
      f"ordering {'OK' if d_gen < d_noise else 'FAIL'}")
print(f"total {time.perf_counter()-t_all:.0f}s")
