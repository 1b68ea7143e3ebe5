"""Welch power spectra and normalized band features of field recordings.

Each one-minute sound bite yields an anthropogenic value (the 0.5-2 kHz
band) and a biological value (mean of the six bands spanning 2-11 kHz).
"""

from __future__ import annotations

import wave
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import signal

from . import N_MINUTES, TIMES_OF_DAY
from .data import SoundBite, squeeze

BAND_EDGES_HZ = tuple((500.0 + 1500.0 * i, 2000.0 + 1500.0 * i) for i in range(7))
SEGMENT_LEN = 4096
OVERLAP = 0.5
MINUTE_S = 60


@dataclass(frozen=True)
class AudioClip:
    """Samples shaped ``(channels, n)`` scaled to [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] not in (1, 2):
            raise ValueError("clips must have one or two channels")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(s)):
            raise ValueError("clip contains non-finite samples")
        object.__setattr__(self, "samples", s)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def samples_per_channel(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.samples_per_channel / self.sample_rate


@dataclass(frozen=True)
class BandSpectrum:
    band_edges: tuple
    band_values: np.ndarray

    @property
    def anthropogenic(self) -> float:
        return float(self.band_values[0])

    @property
    def biological(self) -> float:
        return float(np.sum(self.band_values[1:]) / 6.0)


def read_wav(path) -> AudioClip:
    """16-bit PCM WAV reader; anything else is rejected."""
    with wave.open(str(path), "rb") as w:
        if w.getcomptype() != "NONE" or w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM WAV is supported")
        n_ch, rate, n = w.getnchannels(), w.getframerate(), w.getnframes()
        raw = w.readframes(n)
    data = np.frombuffer(raw, dtype="<i2").reshape(-1, n_ch).T
    return AudioClip(data.astype(np.float32) / 32768.0, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.rint(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(clip.channels)
        w.setsampwidth(2)
        w.setframerate(int(clip.sample_rate))
        w.writeframes(pcm.T.tobytes())


def welch_psd(clip: AudioClip, channel: int = 0, segment_len: int = SEGMENT_LEN, overlap_frac: float = OVERLAP):
    """One-sided Welch density estimate (Hann window, no detrending)."""
    if not 0.0 <= overlap_frac < 1.0:
        raise ValueError("overlap fraction must be in [0, 1)")
    x = clip.samples[channel]
    if segment_len > x.size:
        raise ValueError("insufficient samples for one Welch segment")
    return signal.welch(
        x.astype(float),
        fs=clip.sample_rate,
        window="hann",
        nperseg=segment_len,
        noverlap=int(round(overlap_frac * segment_len)),
        detrend=False,
        scaling="density",
    )


def band_features(frequencies, psd, normalization: str = "max") -> BandSpectrum:
    """Mean density per 1.5 kHz band, then the 7-vector scaled into [0, 1].

    ``normalization`` is ``"max"`` (divide by the largest band) or ``"l2"``
    (divide by the Euclidean norm).  An all-zero spectrum stays zero.
    """
    f = np.asarray(frequencies, dtype=float)
    p = np.asarray(psd, dtype=float)
    if f.size < 2 or (f[1] - f[0]) > 1500.0:
        raise ValueError("frequency resolution too coarse for bands")
    if f[0] > BAND_EDGES_HZ[0][0] or f[-1] < BAND_EDGES_HZ[-1][1]:
        raise ValueError("frequency grid does not cover 0.5-11 kHz")
    vals = np.empty(len(BAND_EDGES_HZ))
    for i, (lo, hi) in enumerate(BAND_EDGES_HZ):
        last = i == len(BAND_EDGES_HZ) - 1
        sel = (f >= lo) & ((f <= hi) if last else (f < hi))
        vals[i] = p[sel].mean()
    if normalization == "max":
        scale = vals.max()
    elif normalization == "l2":
        scale = np.linalg.norm(vals)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    if scale > 0:
        vals = vals / scale
    return BandSpectrum(BAND_EDGES_HZ, vals)


def minute_features(clip: AudioClip, segment_len: int = SEGMENT_LEN, overlap_frac: float = OVERLAP,
                    normalization: str = "max") -> np.ndarray:
    """Raw ``(alpha, y)`` for each of the first 29 minutes, channel-averaged: ``(29, 2)``."""
    per_min = int(MINUTE_S * clip.sample_rate)
    if clip.samples_per_channel < N_MINUTES * per_min:
        raise ValueError(f"recording shorter than {N_MINUTES} minutes")
    if clip.channels == 1:
        warnings.warn("mono recording: no channel averaging", UserWarning, stacklevel=2)
    out = np.zeros((N_MINUTES, 2))
    for m in range(N_MINUTES):
        part = AudioClip(clip.samples[:, m * per_min:(m + 1) * per_min], clip.sample_rate)
        for ch in range(clip.channels):
            f, p = welch_psd(part, ch, segment_len, overlap_frac)
            b = band_features(f, p, normalization)
            out[m] += (b.anthropogenic, b.biological)
        out[m] /= clip.channels
    return out


def soundbites_from_features(features, site_id: int, time_of_day: str, n_total: int) -> list[SoundBite]:
    sq = squeeze(features, n_total)
    return [SoundBite(site_id, time_of_day, m + 1, float(sq[m, 0]), float(sq[m, 1])) for m in range(N_MINUTES)]


def extract_soundbites(clip: AudioClip, site_id: int, time_of_day: str, n_total: int | None = None,
                       **kwargs) -> list[SoundBite]:
    """The 29 sound bites of one recording.

    ``n_total`` is the dataset size used by the boundary squeeze; it
    defaults to this recording's 29 bites.
    """
    if time_of_day not in TIMES_OF_DAY:
        raise ValueError(f"unknown time of day {time_of_day!r}")
    feats = minute_features(clip, **kwargs)
    return soundbites_from_features(feats, site_id, time_of_day, n_total or N_MINUTES)
