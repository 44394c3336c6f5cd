"""Waveform handling and per-latent-frame audio features.

Features are computed on windows aligned to the latent frame clock: frame k
covers samples [ceil(k * sr / fps), ceil((k + 1) * sr / fps)).  Each frame
yields 9 numbers: log magnitudes of 8 single-frequency bands at
200 * 2**(b/2) Hz for b = 0..7, then the raw RMS.  Band magnitudes are
normalized by window length and floored at 1e-8 before the log, so scaling
the waveform by c shifts every unfloored band energy by exactly log(c).
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

BAND_FREQS = tuple(200.0 * 2.0 ** (b / 2.0) for b in range(8))
N_BANDS = len(BAND_FREQS)
FEATURE_DIM = N_BANDS + 1
RMS_COL = N_BANDS
ENERGY_FLOOR = 1e-8
MIN_SAMPLE_RATE = 6400


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInput("waveform must be mono (1-D)")
        if self.sample_rate < MIN_SAMPLE_RATE:
            raise InvalidInput(f"sample rate {self.sample_rate} below minimum {MIN_SAMPLE_RATE}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class AudioFeatureSeq:
    frames: np.ndarray  # (K, 9)
    latent_fps: float

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != FEATURE_DIM:
            raise InvalidInput(f"feature frames must be (K, {FEATURE_DIM})")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def rms(self) -> np.ndarray:
        return self.frames[:, RMS_COL]

    @property
    def band_energies(self) -> np.ndarray:
        return self.frames[:, :N_BANDS]


@dataclass(frozen=True)
class SegmentBoundary:
    frame_index: int
    kind: str  # "pause" or "forced"


def _window_edges(n_samples: int, sample_rate: int, fps: float) -> np.ndarray:
    n_frames = math.ceil(n_samples * fps / sample_rate - 1e-9)
    step = sample_rate / fps
    edges = np.ceil(np.arange(n_frames + 1) * step - 1e-9).astype(np.int64)
    edges[-1] = min(edges[-1], n_samples)
    return edges


def featurize(wave_in: Waveform, latent_fps: float = 8.0) -> AudioFeatureSeq:
    if latent_fps <= 0:
        raise InvalidInput("latent_fps must be positive")
    x = wave_in.samples
    if len(x) == 0:
        return AudioFeatureSeq(np.zeros((0, FEATURE_DIM)), latent_fps)
    edges = _window_edges(len(x), wave_in.sample_rate, latent_fps)
    n_frames = len(edges) - 1
    out = np.zeros((n_frames, FEATURE_DIM))

    lengths = np.diff(edges)
    full_len = int(lengths[0])
    full = lengths == full_len
    freqs = np.asarray(BAND_FREQS)

    if full.any():
        # One complex basis for all full windows; ragged tail handled below.
        n = np.arange(full_len)
        basis = np.exp(-2j * np.pi * np.outer(n, freqs) / wave_in.sample_rate)
        starts = edges[:-1][full]
        stack = np.stack([x[s : s + full_len] for s in starts])
        mags = np.abs(stack @ basis) / full_len
        out[full, :N_BANDS] = np.log(np.maximum(mags, ENERGY_FLOOR))
        out[full, RMS_COL] = np.sqrt(np.mean(stack * stack, axis=1))
    for k in np.nonzero(~full)[0]:
        seg = x[edges[k] : edges[k + 1]]
        n = np.arange(len(seg))
        basis = np.exp(-2j * np.pi * np.outer(n, freqs) / wave_in.sample_rate)
        mags = np.abs(seg @ basis) / len(seg)
        out[k, :N_BANDS] = np.log(np.maximum(mags, ENERGY_FLOOR))
        out[k, RMS_COL] = math.sqrt(float(np.mean(seg * seg)))
    return AudioFeatureSeq(out, latent_fps)


def detect_pauses(
    features: AudioFeatureSeq, rms_threshold: float = 0.02, min_frames: int = 2
) -> list[SegmentBoundary]:
    """Boundaries at midpoints of quiet runs, plus forced ends at 0 and K.

    A quiet run is a maximal stretch of frames with RMS below the threshold;
    runs shorter than min_frames are ignored.  Forced boundaries win when a
    pause midpoint lands on a clip end.
    """
    if min_frames < 1:
        raise InvalidInput("min_frames must be >= 1")
    k = len(features)
    quiet = features.rms < rms_threshold
    boundaries: dict[int, str] = {}
    i = 0
    while i < k:
        if quiet[i]:
            j = i
            while j + 1 < k and quiet[j + 1]:
                j += 1
            if j - i + 1 >= min_frames:
                boundaries[(i + j) // 2] = "pause"
            i = j + 1
        else:
            i += 1
    boundaries[0] = "forced"
    boundaries[k] = "forced"
    return [SegmentBoundary(f, boundaries[f]) for f in sorted(boundaries)]


def slice_features(features: AudioFeatureSeq, start: int, end: int) -> AudioFeatureSeq:
    if not 0 <= start <= end <= len(features):
        raise InvalidInput(f"bad slice [{start}, {end}) for {len(features)} frames")
    return AudioFeatureSeq(features.frames[start:end].copy(), features.latent_fps)


def load_wav(path: str) -> Waveform:
    with wave.open(path, "rb") as fh:
        if fh.getnchannels() != 1:
            raise InvalidInput(f"{path}: expected mono")
        if fh.getsampwidth() != 2:
            raise InvalidInput(f"{path}: expected 16-bit PCM")
        sr = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples, sr)


def save_wav(path: str, wave_out: Waveform) -> None:
    scaled = np.clip(wave_out.samples, -1.0, 1.0) * 32767.0
    pcm = np.round(scaled).astype("<i2")
    with wave.open(path, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wave_out.sample_rate)
        fh.writeframes(pcm.tobytes())
