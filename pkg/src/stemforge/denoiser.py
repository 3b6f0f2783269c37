"""Multi-track 1D U-Net noise predictor.

The input latent block (K, D, S') is concatenated along channels to a
(K*D, S') sequence, pushed through a stem conv, ``depth`` down blocks
(conv, group norm, feature-wise conditioning, SiLU, average-pool), a mid
block with single-head self-attention over frames, mirrored up blocks
with skip connections, and a zero-initialized output conv (so the
untrained network predicts exactly zero).

Conditioning: each track's timestep is embedded sinusoidally, pushed
through a per-track linear layer, and the K results concatenated; the
prompt token embeddings are mean-pooled and appended.  A shared MLP maps
this vector to the conditioning features each block consumes as a
channel-wise scale and shift.

Parameters live in a plain name -> float64 array dict; gradients are
computed by a handwritten reverse pass and are exact (verified against
central finite differences in the test suite).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .prompts import PromptTokens


class NonFiniteValues(RuntimeError):
    """A forward or backward pass produced NaN or infinity."""


@dataclass(frozen=True)
class DenoiserConfig:
    tracks: int = 4
    latent_dim: int = 32
    frames: int = 64
    hidden: int = 32
    depth: int = 2
    time_embed_dim: int = 16
    vocab_size: int = 64
    prompt_embed_dim: int = 16
    cond_width: int = 64

    def __post_init__(self) -> None:
        for name in ("tracks", "latent_dim", "frames", "hidden", "depth",
                     "time_embed_dim", "vocab_size", "prompt_embed_dim", "cond_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.frames % (1 << self.depth):
            raise ValueError("frames must be divisible by 2**depth")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.hidden >= 8 and self.hidden % 8:
            raise ValueError("hidden must be < 8 or a multiple of 8 (group norm)")

    @property
    def channels(self) -> list[int]:
        return [self.hidden << i for i in range(self.depth + 1)]

    @property
    def norm_groups(self) -> int:
        return 8 if self.hidden >= 8 else self.hidden

    @property
    def cond_input_dim(self) -> int:
        return self.tracks * self.time_embed_dim + self.prompt_embed_dim

    def to_dict(self) -> dict[str, int]:
        return {
            "tracks": self.tracks, "latent_dim": self.latent_dim, "frames": self.frames,
            "hidden": self.hidden, "depth": self.depth, "time_embed_dim": self.time_embed_dim,
            "vocab_size": self.vocab_size, "prompt_embed_dim": self.prompt_embed_dim,
            "cond_width": self.cond_width,
        }


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    """Declared shape of every parameter, in a fixed order."""
    ch = cfg.channels
    cin = cfg.tracks * cfg.latent_dim
    shapes: dict[str, tuple[int, ...]] = {}

    def block(prefix: str, c_in: int, c_out: int) -> None:
        shapes[f"{prefix}.conv.w"] = (c_out, c_in, 3)
        shapes[f"{prefix}.conv.b"] = (c_out,)
        shapes[f"{prefix}.norm.g"] = (c_out,)
        shapes[f"{prefix}.norm.b"] = (c_out,)
        shapes[f"{prefix}.film.w"] = (cfg.cond_width, 2 * c_out)
        shapes[f"{prefix}.film.b"] = (2 * c_out,)
        if c_in != c_out:  # residual projection
            shapes[f"{prefix}.res.w"] = (c_out, c_in)
            shapes[f"{prefix}.res.b"] = (c_out,)

    shapes["stem.w"] = (ch[0], cin, 3)
    shapes["stem.b"] = (ch[0],)
    for i in range(cfg.depth):
        block(f"down{i}", ch[i], ch[i + 1])
    cm = ch[-1]
    block("mid.a", cm, cm)
    shapes["mid.attn.norm.g"] = (cm,)
    shapes["mid.attn.norm.b"] = (cm,)
    for proj in ("q", "k", "v", "o"):
        shapes[f"mid.attn.{proj}.w"] = (cm, cm)
        shapes[f"mid.attn.{proj}.b"] = (cm,)
    block("mid.b", cm, cm)
    for i in reversed(range(cfg.depth)):
        block(f"up{i}", 2 * ch[i + 1], ch[i])
    shapes["out.w"] = (cin, ch[0], 3)
    shapes["out.b"] = (cin,)
    for k in range(cfg.tracks):
        shapes[f"tembed.track{k}.w"] = (cfg.time_embed_dim, cfg.time_embed_dim)
        shapes[f"tembed.track{k}.b"] = (cfg.time_embed_dim,)
    shapes["prompt.table"] = (cfg.vocab_size, cfg.prompt_embed_dim)
    shapes["cond.w"] = (cfg.cond_input_dim, cfg.cond_width)
    shapes["cond.b"] = (cfg.cond_width,)
    return shapes


def param_count(cfg: DenoiserConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


class Denoiser:
    """Stateless network; parameters are passed to every call."""

    def __init__(self, config: DenoiserConfig):
        self.config = config
        self.shapes = param_shapes(config)

    # -- parameters ---------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Kaiming fan-in init for convs/linears, N(0, 0.02^2) embedding
        table, unit norm gains, and an all-zero output conv."""
        params: dict[str, np.ndarray] = {}
        for name, shape in self.shapes.items():
            if name.startswith("out.") or name.endswith(".film.w"):
                # zero output conv (initial prediction is 0) and zero FiLM
                # projections (blocks start unconditioned; conditioning grows in)
                params[name] = np.zeros(shape)
            elif name.endswith(".norm.g"):
                params[name] = np.ones(shape)
            elif name.endswith(".b"):
                params[name] = np.zeros(shape)
            elif name == "prompt.table":
                params[name] = 0.02 * rng.standard_normal(shape)
            elif len(shape) == 3:  # conv kernels
                fan_in = shape[1] * shape[2]
                params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            else:  # 2-D linears; attention/residual projections store (out, in)
                fan_in = shape[1] if (".attn." in name or ".res." in name) else shape[0]
                params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        return params

    def bind(self, params: Mapping[str, np.ndarray]) -> "BoundDenoiser":
        return BoundDenoiser(self, params)

    # -- conditioning ---------------------------------------------------------

    def embed_timesteps(self, params: Mapping[str, np.ndarray], tsteps: np.ndarray):
        """Per-track sinusoid -> per-track linear -> concatenation.

        tsteps is (K,) or (B, K) integer; returns ((K*E,) or (B, K*E), cache).
        """
        cfg = self.config
        tsteps = np.asarray(tsteps, dtype=np.int64)
        single = tsteps.ndim == 1
        if single:
            tsteps = tsteps[None]
        sin = nn.sinusoid_embedding(tsteps, cfg.time_embed_dim)  # (B,K,E)
        outs = []
        for k in range(cfg.tracks):
            y, _ = nn.linear_forward(sin[:, k], params[f"tembed.track{k}.w"],
                                     params[f"tembed.track{k}.b"])
            outs.append(y)
        temb = np.concatenate(outs, axis=1)
        return (temb[0] if single else temb), sin

    def _cond_forward(self, params, tsteps: np.ndarray, prompts: Sequence[PromptTokens]):
        temb, sin = self.embed_timesteps(params, tsteps)
        token_lists = [p.token_ids() for p in prompts]
        pooled, _ = nn.embed_mean_forward(params["prompt.table"], token_lists)
        raw = np.concatenate([temb, pooled], axis=1)
        pre, _ = nn.linear_forward(raw, params["cond.w"], params["cond.b"])
        cond, silu_cache = nn.silu_forward(pre)
        return cond, (sin, token_lists, raw, silu_cache)

    def _cond_backward(self, params, dcond: np.ndarray, cache, grads) -> None:
        cfg = self.config
        sin, token_lists, raw, silu_cache = cache
        dpre = nn.silu_backward(dcond, silu_cache)
        draw, dw, db = nn.linear_backward(dpre, raw, params["cond.w"])
        grads["cond.w"] += dw
        grads["cond.b"] += db
        E = cfg.time_embed_dim
        dtemb = draw[:, :cfg.tracks * E]
        dpool = draw[:, cfg.tracks * E:]
        grads["prompt.table"] += nn.embed_mean_backward(
            dpool, params["prompt.table"].shape, token_lists)
        for k in range(cfg.tracks):
            dy = dtemb[:, k * E:(k + 1) * E]
            _, dwk, dbk = nn.linear_backward(dy, sin[:, k], params[f"tembed.track{k}.w"])
            grads[f"tembed.track{k}.w"] += dwk
            grads[f"tembed.track{k}.b"] += dbk

    # -- forward --------------------------------------------------------------

    @staticmethod
    def _as_batch(z: np.ndarray, tsteps, prompts):
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 3
        if single:
            z = z[None]
            tsteps = np.asarray(tsteps, dtype=np.int64)[None]
        else:
            tsteps = np.asarray(tsteps, dtype=np.int64)
        if isinstance(prompts, PromptTokens):
            prompts = [prompts] * z.shape[0]
        else:
            prompts = list(prompts)
        if len(prompts) != z.shape[0]:
            raise ValueError("need one prompt per batch element")
        return z, tsteps, prompts, single

    def forward(self, params, z, tsteps, prompts) -> np.ndarray:
        out, _ = self._forward_impl(params, z, tsteps, prompts, keep_cache=False)
        return out

    def forward_with_cache(self, params, z, tsteps, prompts):
        return self._forward_impl(params, z, tsteps, prompts, keep_cache=True)

    def _block_forward(self, params, prefix: str, h, cond, caches, keep):
        """Residual block: conv -> group norm -> FiLM -> SiLU, plus a skip
        (1x1-projected when the width changes)."""
        cfg = self.config
        x = h
        h, c_conv = nn.conv1d_forward(h, params[f"{prefix}.conv.w"], params[f"{prefix}.conv.b"])
        h, c_norm = nn.group_norm_forward(h, params[f"{prefix}.norm.g"],
                                          params[f"{prefix}.norm.b"], cfg.norm_groups)
        h, c_film = nn.film_forward(h, cond, params[f"{prefix}.film.w"], params[f"{prefix}.film.b"])
        h, c_silu = nn.silu_forward(h)
        res_key = f"{prefix}.res.w"
        if res_key in params:
            res, c_res = nn.channel_linear_forward(x, params[res_key], params[f"{prefix}.res.b"])
        else:
            res, c_res = x, None
        if keep:
            caches[prefix] = (c_conv, c_norm, c_film, c_silu, c_res)
        return h + res

    def _block_backward(self, params, prefix: str, dh, caches, grads):
        c_conv, c_norm, c_film, c_silu, c_res = caches[prefix]
        dres = dh
        dh = nn.silu_backward(dh, c_silu)
        dh, dcond, dw, db = nn.film_backward(dh, c_film, params[f"{prefix}.film.w"])
        grads[f"{prefix}.film.w"] += dw
        grads[f"{prefix}.film.b"] += db
        dh, dg, dbn = nn.group_norm_backward(dh, c_norm)
        grads[f"{prefix}.norm.g"] += dg
        grads[f"{prefix}.norm.b"] += dbn
        dh, dw, db = nn.conv1d_backward(dh, params[f"{prefix}.conv.w"], c_conv)
        grads[f"{prefix}.conv.w"] += dw
        grads[f"{prefix}.conv.b"] += db
        res_key = f"{prefix}.res.w"
        if res_key in params:
            dx, dw, db = nn.channel_linear_backward(dres, c_res, params[res_key])
            grads[res_key] += dw
            grads[f"{prefix}.res.b"] += db
            dh = dh + dx
        else:
            dh = dh + dres
        return dh, dcond

    def _forward_impl(self, params, z, tsteps, prompts, keep_cache: bool):
        cfg = self.config
        z, tsteps, prompts, single = self._as_batch(z, tsteps, prompts)
        B, K, D, Sp = z.shape
        if (K, D, Sp) != (cfg.tracks, cfg.latent_dim, cfg.frames):
            raise ValueError(
                f"latent block {(K, D, Sp)} does not match config "
                f"{(cfg.tracks, cfg.latent_dim, cfg.frames)}")
        if tsteps.shape != (B, K):
            raise ValueError("timestep array must have shape (batch, tracks)")

        cond, cond_cache = self._cond_forward(params, tsteps, prompts)
        caches: dict = {"cond": cond_cache, "single": single, "batch": B}

        x = z.reshape(B, K * D, Sp)
        h, c_stem = nn.conv1d_forward(x, params["stem.w"], params["stem.b"])
        if keep_cache:
            caches["stem"] = c_stem

        for i in range(cfg.depth):
            h = self._block_forward(params, f"down{i}", h, cond, caches, keep_cache)
            if keep_cache:
                caches[f"skip{i}_shape"] = h.shape
            caches.setdefault("skips", []).append(h)
            h = nn.avg_pool2_forward(h)

        h = self._block_forward(params, "mid.a", h, cond, caches, keep_cache)
        hn, c_an = nn.group_norm_forward(h, params["mid.attn.norm.g"],
                                         params["mid.attn.norm.b"], cfg.norm_groups)
        q, _ = nn.channel_linear_forward(hn, params["mid.attn.q.w"], params["mid.attn.q.b"])
        k_, _ = nn.channel_linear_forward(hn, params["mid.attn.k.w"], params["mid.attn.k.b"])
        v, _ = nn.channel_linear_forward(hn, params["mid.attn.v.w"], params["mid.attn.v.b"])
        att, c_att = nn.attention_core_forward(q, k_, v)
        ao, _ = nn.channel_linear_forward(att, params["mid.attn.o.w"], params["mid.attn.o.b"])
        h = h + ao
        if keep_cache:
            caches["attn"] = (c_an, hn, att, c_att)
        h = self._block_forward(params, "mid.b", h, cond, caches, keep_cache)

        skips = caches.pop("skips")
        for i in reversed(range(cfg.depth)):
            h = nn.upsample2_forward(h)
            h = np.concatenate([h, skips[i]], axis=1)
            h = self._block_forward(params, f"up{i}", h, cond, caches, keep_cache)

        y, c_out = nn.conv1d_forward(h, params["out.w"], params["out.b"])
        if keep_cache:
            caches["out"] = c_out
        out = y.reshape(B, K, D, Sp)
        if not np.all(np.isfinite(out)):
            raise NonFiniteValues("denoiser forward produced non-finite values")
        if single:
            out = out[0]
        return out, (caches if keep_cache else None)

    # -- backward -------------------------------------------------------------

    def backward(self, params, z, tsteps, prompts, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss with upstream gradient ``loss_grad``
        (same shape as the prediction) with respect to every parameter."""
        _, caches = self._forward_impl(params, z, tsteps, prompts, keep_cache=True)
        return self._backward_from_cache(params, caches, loss_grad)

    def _backward_from_cache(self, params, caches, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
        cfg = self.config
        B = caches["batch"]
        dy = np.asarray(loss_grad, dtype=np.float64)
        if caches["single"] and dy.ndim == 3:
            dy = dy[None]
        dy = dy.reshape(B, cfg.tracks * cfg.latent_dim, cfg.frames)

        grads = {name: np.zeros(shape) for name, shape in self.shapes.items()}
        dcond_total = np.zeros((B, cfg.cond_width))

        dh, dw, db = nn.conv1d_backward(dy, params["out.w"], caches["out"])
        grads["out.w"] += dw
        grads["out.b"] += db

        dskips: list[np.ndarray | None] = [None] * cfg.depth
        for i in range(cfg.depth):
            dh, dcond = self._block_backward(params, f"up{i}", dh, caches, grads)
            dcond_total += dcond
            c_below = dh.shape[1] - caches[f"skip{i}_shape"][1]
            dskips[i] = dh[:, c_below:]
            dh = nn.upsample2_backward(dh[:, :c_below])

        dh, dcond = self._block_backward(params, "mid.b", dh, caches, grads)
        dcond_total += dcond
        c_an, hn, att, c_att = caches["attn"]
        dao = dh  # residual: gradient flows to both h and the attention path
        datt, dwo, dbo = nn.channel_linear_backward(dao, att, params["mid.attn.o.w"])
        grads["mid.attn.o.w"] += dwo
        grads["mid.attn.o.b"] += dbo
        dq, dk, dv = nn.attention_core_backward(datt, c_att)
        dhn = np.zeros_like(hn)
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dx, dw, db = nn.channel_linear_backward(dproj, hn, params[f"mid.attn.{name}.w"])
            grads[f"mid.attn.{name}.w"] += dw
            grads[f"mid.attn.{name}.b"] += db
            dhn += dx
        dres, dg, dbn = nn.group_norm_backward(dhn, c_an)
        grads["mid.attn.norm.g"] += dg
        grads["mid.attn.norm.b"] += dbn
        dh = dh + dres
        dh, dcond = self._block_backward(params, "mid.a", dh, caches, grads)
        dcond_total += dcond

        for i in reversed(range(cfg.depth)):
            dh = nn.avg_pool2_backward(dh)
            dh = dh + dskips[i]
            dh, dcond = self._block_backward(params, f"down{i}", dh, caches, grads)
            dcond_total += dcond

        _, dw, db = nn.conv1d_backward(dh, params["stem.w"], caches["stem"])
        grads["stem.w"] += dw
        grads["stem.b"] += db

        self._cond_backward(params, dcond_total, caches["cond"], grads)

        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteValues(f"non-finite gradient for {name}")
        return grads


class BoundDenoiser:
    """Read-only (model, parameters) snapshot satisfying the sampler's
    denoiser-handle protocol."""

    def __init__(self, model: Denoiser, params: Mapping[str, np.ndarray]):
        self.model = model
        self.params = params

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        cfg = self.model.config
        return (cfg.tracks, cfg.latent_dim, cfg.frames)

    def predict(self, z: np.ndarray, tsteps: np.ndarray, prompts) -> np.ndarray:
        return self.model.forward(self.params, z, tsteps, prompts)
