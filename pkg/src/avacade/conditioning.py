"""Conditioning inputs for the denoiser: text, audio, anchors, references.

Text is embedded by hashed bucket lookup into a fixed random table, so the
same word always lands on the same vector without any learned state.  Audio
feature frames are projected to model width by a fixed random matrix for the
same reason.  Both tables are derived from named seeds and never trained;
adaptation happens inside the model's attention weights.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .audio import FEATURE_DIM, AudioFeatureSeq
from .errors import InvalidInput
from .rng import Rng, hash64

N_TEXT_BUCKETS = 32
MAX_IDENTITIES = 4
_WORD_RE = re.compile(r"[a-z]+")


@dataclass
class TokenSeq:
    tokens: np.ndarray  # (N, dim)
    positions: np.ndarray  # (N, 3) as (frame, row, col)
    provenance: str = ""

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise InvalidInput("tokens must be (N, dim)")
        if self.positions.shape != (self.tokens.shape[0], 3):
            raise InvalidInput("positions must be (N, 3)")

    def __len__(self) -> int:
        return self.tokens.shape[0]


@lru_cache(maxsize=4)
def _text_table(dim: int) -> np.ndarray:
    rng = Rng(hash64("text-embed-table-v1", dim))
    return rng.normals((N_TEXT_BUCKETS, dim)) * 0.125


@lru_cache(maxsize=4)
def _audio_projection(dim: int) -> np.ndarray:
    rng = Rng(hash64("audio-projection-v1", dim))
    return rng.normals((FEATURE_DIM, dim)) * 0.05


@lru_cache(maxsize=8)
def _patch_projection(patch_dim: int, dim: int) -> np.ndarray:
    rng = Rng(hash64("cond-patch-projection-v1", patch_dim, dim))
    return rng.normals((patch_dim, dim)) / np.sqrt(patch_dim)


def text_bucket(word: str) -> int:
    return hash64("text-bucket", word) % N_TEXT_BUCKETS


def embed_text(text: str, dim: int = 64) -> TokenSeq:
    """One token per word via bucket lookup; empty text yields one zero token."""
    words = _WORD_RE.findall(text.lower())
    if not words:
        return TokenSeq(np.zeros((1, dim)), np.zeros((1, 3)), "text:empty")
    table = _text_table(dim)
    tokens = np.stack([table[text_bucket(w)] for w in words])
    positions = np.zeros((len(words), 3))
    return TokenSeq(tokens, positions, f"text:{len(words)}w")


def project_audio(features: AudioFeatureSeq, dim: int = 64) -> np.ndarray:
    """Project (K, 9) feature frames to (K, dim) model-width audio tokens."""
    return features.frames @ _audio_projection(dim)


def frame_tokens(
    frame: np.ndarray,
    patch: tuple[int, int],
    dim: int = 64,
    frame_index: int = 0,
    provenance: str = "guide",
) -> TokenSeq:
    """Content tokens for one latent frame, with positions baked in.

    The frame is cut into patch-sized cells, each projected to model width by
    a fixed random matrix, then offset by the positional code of its
    (frame_index, row, col) cell so cross-attention can match locations.
    Used to hand one stage's frames to another as conditioning.
    """
    from .nn import position_encoding  # local: nn has no dependency back here

    h, w, d = frame.shape
    ph, pw = patch
    if h % ph or w % pw:
        raise InvalidInput(f"frame {h}x{w} not divisible by patch {patch}")
    gh, gw = h // ph, w // pw
    raw = frame.reshape(gh, ph, gw, pw, d).transpose(0, 2, 1, 3, 4).reshape(gh * gw, ph * pw * d)
    tokens = raw @ _patch_projection(ph * pw * d, dim)
    rr, cc = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    positions = np.stack(
        [np.full(gh * gw, frame_index), rr.ravel(), cc.ravel()], axis=1
    ).astype(np.int64)
    tokens = tokens + position_encoding(positions, dim)
    return TokenSeq(tokens, positions, provenance)


def merge_token_seqs(seqs: list[TokenSeq], provenance: str = "merged") -> TokenSeq:
    if not seqs:
        raise InvalidInput("nothing to merge")
    return TokenSeq(
        np.vstack([s.tokens for s in seqs]),
        np.vstack([s.positions for s in seqs]),
        provenance,
    )


@dataclass
class Conditioning:
    text: TokenSeq
    negative_text: TokenSeq | None = None
    audio: list[tuple[str, np.ndarray]] = field(default_factory=list)
    anchors: dict[int, np.ndarray] = field(default_factory=dict)
    references: list[tuple[str, TokenSeq]] = field(default_factory=list)
    extra: TokenSeq | None = None

    def __post_init__(self) -> None:
        idents = [i for i, _ in self.audio] + [i for i, _ in self.references]
        if len(set(idents)) > MAX_IDENTITIES:
            raise InvalidInput(f"at most {MAX_IDENTITIES} identities per scene")
        if len({i for i, _ in self.audio}) != len(self.audio):
            raise InvalidInput("duplicate identity in audio streams")
        if len({i for i, _ in self.references}) != len(self.references):
            raise InvalidInput("duplicate identity in references")
        for ident, stream in self.audio:
            arr = np.asarray(stream)
            if arr.ndim != 2:
                raise InvalidInput(f"audio stream {ident!r} must be (frames, dim)")

    def identities(self) -> list[str]:
        seen: list[str] = []
        for ident, _ in list(self.audio) + list(self.references):
            if ident not in seen:
                seen.append(ident)
        return seen

    def reference_for(self, ident: str) -> TokenSeq | None:
        for name, seq in self.references:
            if name == ident:
                return seq
        return None


def make_conditioning(
    text: str = "",
    negative: str | None = None,
    dim: int = 64,
    audio: list[tuple[str, np.ndarray]] | None = None,
    anchors: dict[int, np.ndarray] | None = None,
    references: list[tuple[str, TokenSeq]] | None = None,
    extra: TokenSeq | None = None,
) -> Conditioning:
    return Conditioning(
        text=embed_text(text, dim),
        negative_text=embed_text(negative, dim) if negative is not None else None,
        audio=list(audio or []),
        anchors=dict(anchors or {}),
        references=list(references or []),
        extra=extra,
    )
