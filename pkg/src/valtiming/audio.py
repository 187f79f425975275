"""Waveform handling and MFCC extraction.

The MFCC chain is: pre-emphasis, framing, Hamming window, power spectrum,
triangular mel filterbank, log with a floor, and an unnormalized DCT-II.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PCM_SCALE = 32767.0


class AudioError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError("waveform must be mono (1-D samples)")
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MfccConfig:
    frame_length: int = 400
    hop: int = 160
    n_fft: int = 512
    n_mels: int = 26
    n_coeffs: int = 13
    pre_emphasis: float = 0.97
    log_floor: float = 1e-10
    sample_rate: int = 16000
    fmin: float = 0.0
    fmax: float | None = None

    def __post_init__(self) -> None:
        if self.frame_length > self.n_fft:
            raise AudioError("frame_length must not exceed n_fft")
        if self.n_coeffs > self.n_mels:
            raise AudioError("n_coeffs must not exceed n_mels")
        if self.hop < 1:
            raise AudioError("hop must be >= 1")
        if self.log_floor <= 0:
            raise AudioError("log_floor must be positive")


@dataclass
class FeatureSequence:
    """Time-major frames plus a validity mask (False marks padding)."""

    frames: np.ndarray
    valid_mask: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a T x d matrix")
        if self.valid_mask is None:
            self.valid_mask = np.ones(len(self.frames), dtype=bool)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.valid_mask.shape != (len(self.frames),):
            raise ValueError("valid_mask length must equal the frame count")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def num_frames(n_samples: int, frame_length: int, hop: int) -> int:
    if n_samples < frame_length:
        raise AudioError(
            f"waveform too short: {n_samples} samples < frame length {frame_length}"
        )
    return 1 + (n_samples - frame_length) // hop


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MfccConfig) -> np.ndarray:
    """Center frequency (Hz) of every mel filter."""
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """Triangular filters of shape (n_mels, n_fft // 2 + 1).

    Each triangle is evaluated at the exact FFT bin frequencies, so rows are
    nonnegative and peak at 1 only when a bin lands on the center.
    """
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    bins = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    if np.any(fb.sum(axis=1) <= 0):
        raise AudioError("mel filterbank has an empty filter; increase n_fft or reduce n_mels")
    return fb


def frame_signal(samples: np.ndarray, frame_length: int, hop: int) -> np.ndarray:
    n = num_frames(len(samples), frame_length, hop)
    idx = np.arange(frame_length)[None, :] + hop * np.arange(n)[:, None]
    return samples[idx]


def power_spectrum(w: Waveform, cfg: MfccConfig) -> np.ndarray:
    x = w.samples
    if cfg.pre_emphasis:
        x = np.concatenate([x[:1], x[1:] - cfg.pre_emphasis * x[:-1]])
    frames = frame_signal(x, cfg.frame_length, cfg.hop) * np.hamming(cfg.frame_length)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    return (spec.real**2 + spec.imag**2) / cfg.n_fft


def mel_energies(w: Waveform, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Per-frame mel filterbank energies (before the log), shape (T, n_mels)."""
    if w.sample_rate != cfg.sample_rate:
        raise AudioError(
            f"sample rate {w.sample_rate} does not match config {cfg.sample_rate}"
        )
    return power_spectrum(w, cfg) @ mel_filterbank(cfg).T


def dct_ii(x, n_out: int | None = None) -> np.ndarray:
    """Unnormalized DCT-II along the last axis.

    y_k = sum_n x_n cos(pi * k * (2n + 1) / (2N)), k = 0..n_out-1. No
    orthonormal scaling is applied, so y_0 is the plain sum of the input.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n_out is None:
        n_out = n
    if n_out > n:
        raise ValueError(f"n_out={n_out} exceeds input length {n}")
    k = np.arange(n_out)[:, None]
    basis = np.cos(np.pi * k * (2 * np.arange(n)[None, :] + 1) / (2 * n))
    return x @ basis.T


def extract_mfcc(w: Waveform, cfg: MfccConfig = MfccConfig()) -> FeatureSequence:
    energies = mel_energies(w, cfg)
    log_mel = np.log(np.maximum(energies, cfg.log_floor))
    return FeatureSequence(dct_ii(log_mel, cfg.n_coeffs))


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Snap samples onto the 16-bit PCM grid used by the WAV writer."""
    ints = np.clip(np.round(np.asarray(samples) * PCM_SCALE), -32768, 32767)
    return ints / PCM_SCALE


def write_wav(path: str | Path, w: Waveform) -> None:
    ints = np.clip(np.round(w.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(ints.tobytes())


def read_wav(path: str | Path, expected_rate: int = 16000) -> Waveform:
    """Read a 16-bit little-endian mono PCM WAV at ``expected_rate``."""
    try:
        fh = wave.open(str(path), "rb")
    except wave.Error as exc:
        raise AudioError(f"{path}: not a PCM WAV file ({exc})") from exc
    with fh:
        if fh.getnchannels() != 1:
            raise AudioError(f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise AudioError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        if fh.getframerate() != expected_rate:
            raise AudioError(
                f"{path}: expected {expected_rate} Hz, got {fh.getframerate()} Hz"
            )
        raw = fh.readframes(fh.getnframes())
    ints = np.frombuffer(raw, dtype="<i2")
    return Waveform(ints / PCM_SCALE, expected_rate)
