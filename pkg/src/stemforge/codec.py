"""Invertible frame codec between waveforms and latent blocks.

A length-S waveform is cut into S' = S/F frames of F samples; each frame
becomes one latent column, so the latent is (D=F, S').  The ``identity``
kind keeps raw frame samples; ``ortho`` multiplies each frame by a fixed
orthonormal basis (deterministic from a seed), so both kinds reconstruct
exactly: decode(encode(x)) == x to 1e-10.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CODEC_KINDS = ("identity", "ortho")


@dataclass(frozen=True)
class CodecSpec:
    kind: str
    frame_size: int
    basis: np.ndarray | None = None  # (F, F) orthonormal, ortho kind only
    seed: int = 0

    @property
    def latent_dim(self) -> int:
        return self.frame_size


def make_codec(kind: str = "identity", frame_size: int = 32, seed: int = 0) -> CodecSpec:
    if kind not in CODEC_KINDS:
        raise ValueError(f"codec kind must be one of {CODEC_KINDS}")
    if frame_size < 1:
        raise ValueError("frame_size must be >= 1")
    basis = None
    if kind == "ortho":
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((frame_size, frame_size)))
        basis = q * np.sign(np.diag(r))  # sign-fixed for uniqueness
    return CodecSpec(kind, frame_size, basis, seed)


def encode(x: np.ndarray, codec: CodecSpec) -> np.ndarray:
    """Waveform(s) (..., S) -> latent(s) (..., F, S/F)."""
    x = np.asarray(x, dtype=np.float64)
    S = x.shape[-1]
    F = codec.frame_size
    if S % F:
        raise ValueError(f"waveform length {S} not divisible by frame size {F}")
    frames = x.reshape(x.shape[:-1] + (S // F, F))
    if codec.kind == "ortho":
        frames = frames @ codec.basis  # row vector times B == B^T column
    return np.swapaxes(frames, -1, -2)


def decode(z: np.ndarray, codec: CodecSpec) -> np.ndarray:
    """Latent(s) (..., F, S') -> waveform(s) (..., F*S')."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-2] != codec.frame_size:
        raise ValueError(f"latent dim {z.shape[-2]} != frame size {codec.frame_size}")
    frames = np.swapaxes(z, -1, -2)
    if codec.kind == "ortho":
        frames = frames @ codec.basis.T
    return frames.reshape(z.shape[:-2] + (z.shape[-1] * codec.frame_size,))
