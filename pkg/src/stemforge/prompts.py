"""Prompt token vocabulary.

A prompt is a task prefix token (one id per nonempty target subset,
naming the generation task) followed by content tokens describing the
audio: fundamental-pitch bucket, tempo bucket, and motif id.  Ids are
laid out as [task prefixes | f0 buckets | tempo buckets | motif ids].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

TRACK_NAMES = ("bass", "drums", "instrument", "melody")


def track_name(index: int, num_tracks: int) -> str:
    if num_tracks == len(TRACK_NAMES):
        return TRACK_NAMES[index]
    return f"track{index + 1}"


@dataclass(frozen=True)
class PromptTokens:
    """Token ids for one prompt; ``prefix_task_token`` is None for raw
    dataset prompts (the task prefix is attached when a task is chosen)."""

    prefix_task_token: int | None
    content_tokens: tuple[int, ...]

    def token_ids(self) -> list[int]:
        ids = [] if self.prefix_task_token is None else [self.prefix_task_token]
        return ids + list(self.content_tokens)

    def with_prefix(self, prefix: int) -> "PromptTokens":
        return PromptTokens(prefix, self.content_tokens)

    def strip_content(self) -> "PromptTokens":
        return PromptTokens(self.prefix_task_token, ())


@dataclass(frozen=True)
class PromptVocab:
    """Token-id layout for a K-track setup with bucketed content."""

    num_tracks: int
    num_f0: int
    num_tempo: int
    num_motifs: int

    @property
    def num_prefix(self) -> int:
        return (1 << self.num_tracks) - 1

    @property
    def size(self) -> int:
        return self.num_prefix + self.num_f0 + self.num_tempo + self.num_motifs

    def prefix_for(self, targets: Iterable[int]) -> int:
        mask = 0
        for i in targets:
            if not 0 <= i < self.num_tracks:
                raise ValueError(f"track index {i} out of range")
            mask |= 1 << i
        if mask == 0:
            raise ValueError("target set must be nonempty")
        return mask - 1

    def targets_for(self, prefix: int) -> frozenset[int]:
        if not 0 <= prefix < self.num_prefix:
            raise ValueError(f"prefix token {prefix} out of range")
        mask = prefix + 1
        return frozenset(i for i in range(self.num_tracks) if mask >> i & 1)

    def f0_token(self, bucket: int) -> int:
        self._check(bucket, self.num_f0, "f0 bucket")
        return self.num_prefix + bucket

    def tempo_token(self, bucket: int) -> int:
        self._check(bucket, self.num_tempo, "tempo bucket")
        return self.num_prefix + self.num_f0 + bucket

    def motif_token(self, motif: int) -> int:
        self._check(motif, self.num_motifs, "motif id")
        return self.num_prefix + self.num_f0 + self.num_tempo + motif

    def content_tokens(self, f0_bucket: int, tempo_bucket: int, motif: int) -> tuple[int, int, int]:
        return (self.f0_token(f0_bucket), self.tempo_token(tempo_bucket), self.motif_token(motif))

    def task_label(self, targets: Iterable[int]) -> str:
        names = " & ".join(track_name(i, self.num_tracks) for i in sorted(targets))
        return f"[{names} generation]"

    @staticmethod
    def _check(value: int, bound: int, what: str) -> None:
        if not 0 <= value < bound:
            raise ValueError(f"{what} {value} out of range [0, {bound})")
