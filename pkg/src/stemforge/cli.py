"""Operator entry points: dataset synthesis, training, sampling,
evaluation, gradient checking, and serving.

Every command is deterministic given its seed, writes a run manifest,
and exits nonzero with a machine-readable JSON error line on failure.
``STEMFORGE_LOG`` sets the log level (DEBUG/INFO/WARNING/...).
"""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .codec import decode, encode, make_codec
from .curriculum import CurriculumConfig, task_probabilities, sample_task, sample_nontarget_modes
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import (Mode, SamplerConfig, TaskSpec, build_schedule, sample)
from .dataset_io import (load_config_file, load_dataset_config, read_dataset,
                         write_dataset)
from .evaluation import (MetricRecord, audit_mode_draws, audit_task_draws,
                         binomial_band, coherence_eval, frechet_proxy,
                         render_csv, render_report, spectral_features)
from .gradcheck import MICRO_CONFIG, finite_difference_check
from .manifest import RunManifest
from .optim import DESK_PRESET, PAPER_PRESET, TrainConfig
from .prompts import PromptTokens, PromptVocab, TRACK_NAMES, track_name
from .stems import generate_dataset, mix_tracks, rms
from .trainer import LatentDataset, TrainOptions, TrainingDiverged, train
from .wavio import encode_wav

log = logging.getLogger("stemforge")


def _fail(code: str, message: str, exit_code: int = 1):
    sys.stderr.write(json.dumps({"code": code, "message": message}) + "\n")
    sys.exit(exit_code)


def command_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TrainingDiverged as exc:
            _fail("divergence", str(exc), 3)
        except FileNotFoundError as exc:
            _fail("missing_file", str(exc), 2)
        except (ValueError, KeyError) as exc:
            _fail("invalid_input", str(exc), 1)
    return wrapper


@click.group()
def main():
    level = os.environ.get("STEMFORGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


# -- config plumbing -----------------------------------------------------------

TRAIN_FLOAT_KEYS = {"lr_start", "beta1", "beta2", "weight_decay", "grad_clip"}
TRAIN_INT_KEYS = {"batch_size", "epochs", "seed"}
CURRICULUM_FLOAT_KEYS = {"p1", "p2", "bootstrap_start_fraction", "ema_decay"}
MODEL_INT_KEYS = {"hidden", "depth", "time_embed_dim", "vocab_size",
                  "prompt_embed_dim", "cond_width"}
PIPELINE_KEYS = {"num_steps", "beta_start", "beta_end", "frame_size", "codec_kind",
                 "codec_seed", "target_rms", "latent_scale", "num_f0", "num_tempo",
                 "num_motifs", "bootstrap_interval", "prompt_dropout",
                 "phase_boundaries"}


def parse_train_config(path, preset: str, seed_override: int | None):
    raw = load_config_file(path) if path else {}
    base = PAPER_PRESET if preset == "paper" else DESK_PRESET
    tkw = {}
    ckw = {}
    model_kw = {}
    pipe = {"num_steps": 100, "beta_start": 1e-4, "beta_end": 0.02, "frame_size": 32,
            "codec_kind": "identity", "codec_seed": 0, "target_rms": 0.1,
            "latent_scale": 0.1, "num_f0": 4, "num_tempo": 3, "num_motifs": 3,
            "bootstrap_interval": 1, "prompt_dropout": 0.0}
    for key, value in raw.items():
        if key in TRAIN_FLOAT_KEYS:
            tkw[key] = float(value)
        elif key in TRAIN_INT_KEYS:
            tkw[key] = int(value)
        elif key in CURRICULUM_FLOAT_KEYS:
            ckw[key] = float(value)
        elif key in MODEL_INT_KEYS:
            model_kw[key] = int(value)
        elif key == "phase_boundaries":
            ckw["phase_boundaries"] = tuple(float(v) for v in value.split(","))
        elif key in PIPELINE_KEYS:
            if key in ("num_steps", "frame_size", "codec_seed", "num_f0",
                       "num_tempo", "num_motifs", "bootstrap_interval"):
                pipe[key] = int(value)
            elif key == "codec_kind":
                pipe[key] = value
            else:
                pipe[key] = float(value)
        else:
            raise ValueError(f"unknown train config key {key!r}")
    if seed_override is not None:
        tkw["seed"] = seed_override
    train_cfg = TrainConfig(**{**base.__dict__, **tkw})
    return train_cfg, ckw, model_kw, pipe


def _load_backend(checkpoint):
    from .service.sessions import ModelBackend
    return ModelBackend.from_checkpoint(checkpoint)


def parse_task(task_str: str, num_tracks: int) -> TaskSpec:
    """'"drums,instrument | given bass"' style task strings; tracks may be
    named (bass/drums/instrument/melody) or 1-based indices.  Unnamed
    leftover tracks are marginalized."""
    name_to_idx = {track_name(i, num_tracks): i for i in range(num_tracks)}
    for i in range(num_tracks):
        name_to_idx[str(i + 1)] = i

    def parse_side(side: str) -> list[int]:
        out = []
        for token in side.replace("&", ",").split(","):
            token = token.strip().lower()
            if not token:
                continue
            if token not in name_to_idx:
                raise ValueError(f"unknown track {token!r}; use "
                                 f"{'/'.join(track_name(i, num_tracks) for i in range(num_tracks))}")
            out.append(name_to_idx[token])
        return out

    parts = task_str.split("|")
    targets = parse_side(parts[0])
    if not targets:
        raise ValueError("task needs at least one target track")
    given: list[int] = []
    if len(parts) > 1:
        rest = parts[1].strip()
        if rest.lower().startswith("given"):
            rest = rest[5:]
        given = parse_side(rest)
    modes = {}
    for i in range(num_tracks):
        if i in targets:
            continue
        modes[i] = Mode.CONDITIONAL if i in given else Mode.MARGINAL
    return TaskSpec(frozenset(targets), modes)


def parse_prompt(prompt_str: str, vocab: PromptVocab) -> tuple[int, ...]:
    """Either raw token ids ('17,21,24') or bucket indices
    ('f0=1,tempo=0,motif=2')."""
    if "=" not in prompt_str:
        return tuple(int(t) for t in prompt_str.split(",") if t.strip())
    picks = {}
    for part in prompt_str.split(","):
        key, value = part.split("=")
        picks[key.strip()] = int(value)
    tokens = []
    if "f0" in picks:
        tokens.append(vocab.f0_token(picks["f0"]))
    if "tempo" in picks:
        tokens.append(vocab.tempo_token(picks["tempo"]))
    if "motif" in picks:
        tokens.append(vocab.motif_token(picks["motif"]))
    unknown = set(picks) - {"f0", "tempo", "motif"}
    if unknown:
        raise ValueError(f"unknown prompt keys {sorted(unknown)}")
    return tuple(tokens)


# -- commands --------------------------------------------------------------------

@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override the config seed")
@command_errors
def synth(config_path, out_path, seed):
    """Synthesize a multi-stem dataset file."""
    manifest = RunManifest("synth", config_path, seed)
    manifest.add_input(config_path)
    cfg = load_dataset_config(config_path)
    if seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=seed)
    samples = generate_dataset(cfg)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(samples, out, cfg)
    manifest.add_output(out)
    manifest.finish(out.with_suffix(out.suffix + ".manifest.json"))
    click.echo(f"wrote {len(samples)} samples to {out}")


@main.command(name="train")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--preset", type=click.Choice(["desk", "paper"]), default="desk")
@click.option("--seed", type=int, default=None)
@command_errors
def train_cmd(config_path, data_path, out_dir, preset, seed):
    """Train the denoiser with the progressive curriculum."""
    manifest = RunManifest("train", config_path, seed)
    manifest.add_input(data_path)
    if config_path:
        manifest.add_input(config_path)
    train_cfg, ckw, model_kw, pipe = parse_train_config(config_path, preset, seed)

    samples, header = read_dataset(data_path)
    if not samples:
        raise ValueError("dataset is empty")
    frame = pipe["frame_size"]
    codec = make_codec(pipe["codec_kind"], frame, pipe["codec_seed"])
    vocab = PromptVocab(header["num_tracks"], pipe["num_f0"], pipe["num_tempo"],
                        pipe["num_motifs"])
    if vocab.size != header["vocab_size"]:
        raise ValueError(f"vocab split {vocab.size} != dataset vocab {header['vocab_size']}")
    data = LatentDataset(samples, codec, vocab, pipe["latent_scale"])

    model_cfg = DenoiserConfig(tracks=header["num_tracks"], latent_dim=frame,
                               frames=header["length"] // frame, **model_kw)
    model = Denoiser(model_cfg)
    schedule = build_schedule("linear", pipe["num_steps"], pipe["beta_start"],
                              pipe["beta_end"])
    cur_cfg = CurriculumConfig(tracks=header["num_tracks"],
                               total_epochs=train_cfg.epochs, **ckw)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    options = TrainOptions(bootstrap_interval=pipe["bootstrap_interval"],
                           prompt_dropout=pipe["prompt_dropout"],
                           log_path=str(out / "metrics.ndjson"),
                           dump_dir=str(out))
    rng = np.random.default_rng(train_cfg.seed)
    result = train(model, data, cur_cfg, train_cfg, schedule, rng, options)

    meta = CheckpointMeta(model=model_cfg.to_dict(), num_steps=pipe["num_steps"],
                          beta_start=pipe["beta_start"], beta_end=pipe["beta_end"],
                          codec_kind=pipe["codec_kind"], frame_size=frame,
                          codec_seed=pipe["codec_seed"],
                          sample_rate=header["sample_rate"],
                          target_rms=pipe["target_rms"],
                          latent_scale=pipe["latent_scale"],
                          num_f0=pipe["num_f0"], num_tempo=pipe["num_tempo"],
                          num_motifs=pipe["num_motifs"])
    save_checkpoint(out / "model.stmf", result.params, meta)
    save_checkpoint(out / "model_ema.stmf", result.ema_params, meta)
    for name in ("model.stmf", "model_ema.stmf", "metrics.ndjson"):
        manifest.add_output(out / name)
    manifest.finish(out / "manifest.json")
    click.echo(f"trained {result.steps} steps; final loss "
               f"{result.metrics[-1]['loss']:.4f}; checkpoints in {out}")


@main.command(name="sample")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--task", "task_str", required=True,
              help='e.g. "drums,instrument | given bass" or "bass&drums"')
@click.option("--prompt", "prompt_str", default="",
              help='content tokens: "f0=1,tempo=0,motif=2" or raw ids "17,21,24"')
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--data", "data_path", type=click.Path(exists=True), default=None,
              help="dataset supplying conditioning tracks (and a prompt default)")
@click.option("--index", type=int, default=0, help="dataset record for conditioning")
@click.option("--lambda", "guidance", type=float, default=7.0)
@command_errors
def sample_cmd(checkpoint, task_str, prompt_str, seed, out_dir, data_path, index, guidance):
    """Generate tracks from a checkpoint."""
    manifest = RunManifest("sample", None, seed)
    manifest.add_input(checkpoint)
    backend = _load_backend(checkpoint)
    K = backend.num_tracks
    task = parse_task(task_str, K)

    content: tuple[int, ...] = ()
    cond_waves: dict[int, np.ndarray] = {}
    sample_meta = None
    if data_path:
        manifest.add_input(data_path)
        records, _ = read_dataset(data_path)
        if not 0 <= index < len(records):
            raise ValueError(f"--index {index} out of range [0, {len(records)})")
        record = records[index]
        content = record.prompt.content_tokens
        sample_meta = record.meta
        for i in task.conditional_tracks():
            cond_waves[i] = record.waveforms[i].astype(np.float32)
    if prompt_str:
        content = parse_prompt(prompt_str, backend.vocab)
    if task.conditional_tracks() and not data_path:
        raise ValueError("conditional tracks need --data to supply waveforms")

    generated = backend.generate(frozenset(task.targets), cond_waves, content,
                                 seed, guidance)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    waves: dict[int, np.ndarray] = {}
    for i in sorted(task.targets):
        waves[i] = generated[i]
        tensors[f"generated/{i}"] = generated[i]
    for i, w in cond_waves.items():
        waves[i] = w
    for i, w in sorted(waves.items()):
        name = f"track{i + 1}_{track_name(i, K)}.wav"
        (out / name).write_bytes(encode_wav(w, backend.sample_rate))
        manifest.add_output(out / name)
    if len(waves) == K:
        mix = mix_tracks(np.stack([waves[i].astype(np.float64) for i in range(K)]),
                         backend.meta.target_rms)
        (out / "mix.wav").write_bytes(encode_wav(mix, backend.sample_rate))
        manifest.add_output(out / "mix.wav")
    from .checkpoint import write_tensors
    write_tensors(out / "latents.stmf", tensors)
    manifest.add_output(out / "latents.stmf")
    manifest.finish(out / "manifest.json")
    if sample_meta is not None:
        click.echo(f"conditioned on record {index} (f0={sample_meta.f0})")
    click.echo(f"wrote {len(waves)} tracks to {out}")


@main.command(name="eval")
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--tracks", "tracks_dir", type=click.Path(exists=True), default=None,
              help="directory of track WAVs to score instead of a checkpoint")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--num-cond", type=int, default=64, show_default=True)
@click.option("--num-joint", type=int, default=128, show_default=True)
@command_errors
def eval_cmd(checkpoint, tracks_dir, data_path, out_dir, seed, num_cond, num_joint):
    """Evaluate coherence, the Frechet proxy, and the sampler statistics."""
    if not checkpoint and not tracks_dir:
        raise ValueError("need --checkpoint or --tracks")
    manifest = RunManifest("eval", None, seed)
    manifest.add_input(data_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records_list, header = read_dataset(data_path)
    rng = np.random.default_rng(seed)
    rows: list[MetricRecord] = []

    if tracks_dir:
        rows.extend(_eval_track_dir(Path(tracks_dir), header, manifest))
    else:
        manifest.add_input(checkpoint)
        rows.extend(_eval_checkpoint(checkpoint, records_list, header, rng,
                                     num_cond, num_joint))

    rows.extend(_audit_rows(header["num_tracks"], rng))
    (out / "report.txt").write_text(render_report(rows), encoding="utf-8")
    (out / "report.csv").write_text(render_csv(rows), encoding="utf-8")
    manifest.add_output(out / "report.txt")
    manifest.add_output(out / "report.csv")
    manifest.finish(out / "manifest.json")
    click.echo(render_report(rows))
    if any(r.passed is False for r in rows):
        sys.exit(4)


def _eval_checkpoint(checkpoint, records_list, header, rng, num_cond, num_joint):
    backend = _load_backend(checkpoint)
    K = backend.num_tracks
    scale = backend.meta.latent_scale
    rows = []

    n = min(num_cond, len(records_list))
    if n:
        task = TaskSpec(frozenset(range(1, K)), {0: Mode.CONDITIONAL})
        recs = records_list[:n]
        bass = np.stack([encode(r.waveforms[0], backend.codec) for r in recs]) / scale
        prompts = [PromptTokens(backend.vocab.prefix_for(range(1, K)),
                                r.prompt.content_tokens) for r in recs]
        gen = sample(backend.model.bind(backend.params), task, {0: bass}, prompts,
                     SamplerConfig(), backend.schedule, rng, batch=n)
        if n == 1:
            gen = gen[None]
        passes = 0
        for i, r in enumerate(recs):
            tracks = np.empty((K, header["length"]))
            tracks[0] = r.waveforms[0]
            for k in range(1, K):
                tracks[k] = decode(gen[i, k] * scale, backend.codec)
            rep = coherence_eval(tracks, r.meta, header["sample_rate"], check_tracks=[2])
            passes += rep.all_passed
        rows.append(MetricRecord("cond_instrument_coherence_rate", passes / n,
                                 passes / n >= 0.7, tolerance=0.7))

    m = min(num_joint, len(records_list))
    if m >= 32:
        prompts = [PromptTokens(backend.vocab.prefix_for(range(K)),
                                r.prompt.content_tokens) for r in records_list[:m]]
        gen = sample(backend.model.bind(backend.params),
                     TaskSpec(frozenset(range(K))), {}, prompts, SamplerConfig(),
                     backend.schedule, rng, batch=m)
        target_rms = backend.meta.target_rms
        gen_mixes = np.stack([
            mix_tracks(decode(gen[i] * scale, backend.codec), target_rms)
            for i in range(m)])
        held = np.stack([mix_tracks(r.waveforms, target_rms) for r in records_list[:m]])
        noisy = held + np.stack([rms(h) for h in held])[:, None] * rng.standard_normal(held.shape)
        f_gen = np.stack([spectral_features(w) for w in gen_mixes])
        f_held = np.stack([spectral_features(w) for w in held])
        f_noise = np.stack([spectral_features(w) for w in noisy])
        d_gen = frechet_proxy(f_gen, f_held)
        d_noise = frechet_proxy(f_noise, f_held)
        rows.append(MetricRecord("frechet_generated_vs_held", d_gen, d_gen < d_noise))
        rows.append(MetricRecord("frechet_noisy_vs_held", d_noise, None))
    return rows


def _eval_track_dir(tracks_dir: Path, header, manifest):
    from .wavio import decode_wav
    from .stems import StemMeta
    waves = {}
    for path in sorted(tracks_dir.glob("*.wav")):
        manifest.add_input(path)
        idx = len(waves)
        samples, _rate = decode_wav(path.read_bytes())
        waves[idx] = samples
    if len(waves) < 3:
        raise ValueError("need at least bass, drums, instrument WAVs (sorted order)")
    tracks = np.stack([waves[i] for i in sorted(waves)])
    meta = StemMeta(f0=0.0, tempo_period=1, motif_id=0, seed=0)  # ratios only
    rep = coherence_eval(tracks, meta, header["sample_rate"],
                         check_tracks=[2, 3] if len(waves) > 3 else [2])
    return [MetricRecord(c.name, c.value, c.passed, track=c.track, tolerance=c.tolerance)
            for c in rep.checks]


def _audit_rows(num_tracks, rng):
    cur = CurriculumConfig(tracks=num_tracks, total_epochs=10)
    state = task_probabilities(cur, 9)  # phase 3
    draws = []
    for _ in range(100_000):
        targets = sample_task(state, rng)
        draws.append(sum(1 << i for i in targets))
    task_result = audit_task_draws(draws, state)
    cond = 0
    n_modes = 100_000
    for _ in range(n_modes):
        modes = sample_nontarget_modes(frozenset({0}), num_tracks, cur.p1, rng)
        cond += all(m is Mode.CONDITIONAL for m in modes.values())
    lo, hi = binomial_band(cur.p1, n_modes)
    frac = cond / n_modes
    return [
        MetricRecord("chi2_task_subsets", task_result.statistic, task_result.passed,
                     tolerance=task_result.threshold),
        MetricRecord("p1_conditional_fraction", frac, lo <= frac <= hi, tolerance=hi - cur.p1),
    ]


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="model config overriding the built-in micro config")
@click.option("--out", "out_dir", type=click.Path(), default=".")
@click.option("--seed", type=int, default=0)
@command_errors
def gradcheck(config_path, out_dir, seed):
    """Finite-difference sweep over every denoiser parameter."""
    manifest = RunManifest("gradcheck", config_path, seed)
    if config_path:
        manifest.add_input(config_path)
        raw = load_config_file(config_path)
        cfg = DenoiserConfig(**{k: int(v) for k, v in raw.items()})
    else:
        cfg = MICRO_CONFIG
    report = finite_difference_check(Denoiser(cfg), seed=seed)
    manifest.finish(Path(out_dir) / "gradcheck_manifest.json")
    click.echo(f"checked {report.checked} parameters; worst rel err "
               f"{report.worst_rel_err:.3e} at {report.worst_param} "
               f"(tolerance {report.tolerance:g})")
    if not report.passed:
        _fail("gradcheck_failed",
              f"{report.worst_param} rel err {report.worst_rel_err:.3e}", 5)
    click.echo("gradient check passed")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--port", type=int, default=8642, show_default=True)
@click.option("--session-dir", "session_dir", type=click.Path(), default="sessions")
@command_errors
def serve(checkpoint, config_path, port, session_dir):
    """Run the co-composition workflow service."""
    import uvicorn
    from .service.app import create_app
    from .service.sessions import ModelBackend, SessionStore

    manifest = RunManifest("serve", config_path, None)
    manifest.add_input(checkpoint)
    raw = load_config_file(config_path) if config_path else {}
    backend = ModelBackend.from_checkpoint(checkpoint)
    store = SessionStore(backend, session_dir,
                         seed=int(raw.get("seed", "0")),
                         async_generate=raw.get("async_generate", "false").lower() == "true")
    app = create_app(store, ui_dir=raw.get("ui_dir"))
    manifest.finish(Path(session_dir) / "manifest.json")
    click.echo(f"serving on port {port}; sessions in {session_dir}")
    uvicorn.run(app, host="0.0.0.0", port=port, log_level="warning")


if __name__ == "__main__":
    main()
