"""Deterministic synthetic speech-like signals for fixtures and demos.

Each voice is a harmonic stack on a random fundamental in [120, 280] Hz with
a slow syllable envelope and a high "sibilance" tone on the top analysis
band, so its gain reads out directly in one feature column.  Style
presets move four knobs: overall level, envelope depth and rate (how hard and
how fast loudness pulses), and sibilance gain (spectral tilt).  The knob
settings are what the dialogue experts key on, so they are spread wide apart.
"""

from __future__ import annotations

import numpy as np

from .audio import BAND_FREQS, Waveform
from .errors import InvalidInput
from .rng import Rng

# style: (level, mod_depth, mod_rate_hz, sibilance_gain)
STYLE_PRESETS = {
    "neutral": (0.30, 0.30, 3.0, 0.5),
    "happy": (0.55, 0.35, 4.5, 1.2),
    "sad": (0.08, 0.25, 2.0, 0.3),
    "angry": (0.60, 0.90, 3.5, 1.6),
    "surprised": (0.45, 0.90, 3.0, 0.12),
}

_N_HARMONICS = 5


def synthetic_voice(
    seed: int, duration: float, sample_rate: int = 16000, style: str = "neutral"
) -> Waveform:
    if style not in STYLE_PRESETS:
        raise InvalidInput(f"unknown style {style!r}; have {sorted(STYLE_PRESETS)}")
    if duration <= 0:
        raise InvalidInput("duration must be positive")
    level, depth, rate, sibilance = STYLE_PRESETS[style]
    rng = Rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate

    f0 = rng.uniform(120.0, 280.0)
    stack = np.zeros(n)
    for h in range(1, _N_HARMONICS + 1):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        stack += (1.0 / h) * np.sin(2.0 * np.pi * h * f0 * t + phase)
    f_sib = BAND_FREQS[-1]
    stack += sibilance * np.sin(2.0 * np.pi * f_sib * t + rng.uniform(0.0, 2.0 * np.pi))
    stack /= np.sqrt(np.mean(stack * stack))

    env_phase = rng.uniform(0.0, 2.0 * np.pi)
    env = 1.0 - depth * (0.5 + 0.5 * np.sin(2.0 * np.pi * rate * t + env_phase))
    return Waveform(level * env * stack, sample_rate)


def silence(duration: float, sample_rate: int = 16000) -> Waveform:
    if duration <= 0:
        raise InvalidInput("duration must be positive")
    return Waveform(np.zeros(int(round(duration * sample_rate))), sample_rate)


def concat_voices(parts: list[Waveform]) -> Waveform:
    if not parts:
        raise InvalidInput("nothing to concatenate")
    sr = parts[0].sample_rate
    for p in parts[1:]:
        if p.sample_rate != sr:
            raise InvalidInput("sample rates differ")
    return Waveform(np.concatenate([p.samples for p in parts]), sr)
