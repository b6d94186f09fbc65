"""MFCC front-end: framing, Hamming window, mel filterbank, DCT, regression deltas.

Two feature layouts are produced:

* ``dvector``: 19 cepstra (orders 1..19) + log-energy, with deltas and
  delta-deltas, 60 columns.
* ``xvector``: 30 cepstra (orders 1..30), no deltas, 30 columns.

Features are stored on disk in a small binary container (magic ``JFEF``).
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .errors import ConfigurationError, ContractViolation, EmptyInputError, ShortUtteranceError

SAMPLE_RATE = 16000
WINDOW_MS = 20
HOP_MS = 10
N_FFT = 512
N_MELS = 26
N_MELS_XVECTOR = 40
LOG_FLOOR = 1e-10
DELTA_WINDOW = 2

FEATURE_MAGIC = b"JFEF"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ContractViolation(f"waveform must be mono, got shape {self.samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ContractViolation(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Frames:
    """Windowed analysis frames plus the raw (pre-window) frames they came from."""

    windowed: np.ndarray
    raw: np.ndarray
    sample_rate: int
    window_len: int
    hop_len: int


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    layout: dict[str, slice] = field(default_factory=dict)
    frame_hop_ms: int = HOP_MS
    window_ms: int = WINDOW_MS

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def window_length(sample_rate: int, ms: int = WINDOW_MS) -> int:
    return int(round(sample_rate * ms / 1000))


def num_frames(num_samples: int, window_len: int, hop_len: int) -> int:
    if num_samples < window_len:
        return 0
    return (num_samples - window_len) // hop_len + 1


def hamming(n: int) -> np.ndarray:
    if n == 1:
        return np.ones(1)
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2 * np.pi * k / (n - 1))


def frame_and_window(w: Waveform, window_ms: int = WINDOW_MS, hop_ms: int = HOP_MS) -> Frames:
    """Slice a waveform into overlapping frames and apply a Hamming window."""
    L = window_length(w.sample_rate, window_ms)
    hop = window_length(w.sample_rate, hop_ms)
    n = num_frames(len(w.samples), L, hop)
    if n == 0:
        raise EmptyInputError(
            f"waveform has {len(w.samples)} samples, fewer than one {L}-sample window"
        )
    idx = np.arange(L)[None, :] + hop * np.arange(n)[:, None]
    raw = w.samples[idx]
    return Frames(raw * hamming(L), raw, w.sample_rate, L, hop)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    """Center frequencies (Hz) of ``n_mels`` filters spaced evenly on the mel scale over 0..Nyquist."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters, shape (n_mels, n_fft // 2 + 1), peak gain 1."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def power_spectrum(windowed: np.ndarray, n_fft: int = N_FFT) -> np.ndarray:
    if windowed.shape[-1] > n_fft:
        raise ConfigurationError(f"frame length {windowed.shape[-1]} exceeds DFT size {n_fft}")
    spec = np.fft.rfft(windowed, n=n_fft, axis=-1)
    return spec.real**2 + spec.imag**2


def log_mel_energies(frames: Frames, n_mels: int = N_MELS, n_fft: int = N_FFT) -> np.ndarray:
    fb = mel_filterbank(n_mels, n_fft, frames.sample_rate)
    energies = power_spectrum(frames.windowed, n_fft) @ fb.T
    return np.log(np.maximum(energies, LOG_FLOOR))


def log_frame_energy(frames: Frames) -> np.ndarray:
    return np.log(np.maximum((frames.raw**2).sum(axis=1), LOG_FLOOR))


def mfcc_pipeline(
    frames: Frames,
    n_ceps: int = 19,
    include_log_energy: bool = True,
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
) -> FeatureMatrix:
    """Static cepstra (orders 1..n_ceps), optionally followed by a log-energy column."""
    if n_ceps >= n_mels:
        raise ConfigurationError(f"n_ceps={n_ceps} must be below the filter count {n_mels}")
    logmel = log_mel_energies(frames, n_mels, n_fft)
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, 1 : n_ceps + 1]
    layout = {"cepstra": slice(0, n_ceps)}
    if include_log_energy:
        ceps = np.concatenate([ceps, log_frame_energy(frames)[:, None]], axis=1)
        layout["log_energy"] = slice(n_ceps, n_ceps + 1)
    hop_ms = round(1000 * frames.hop_len / frames.sample_rate)
    win_ms = round(1000 * frames.window_len / frames.sample_rate)
    return FeatureMatrix(ceps, layout, hop_ms, win_ms)


def deltas(c: np.ndarray, K: int = DELTA_WINDOW) -> np.ndarray:
    """Regression deltas over +-K frames, edges clamped to the first/last frame."""
    T = c.shape[0]
    padded = np.concatenate([np.repeat(c[:1], K, axis=0), c, np.repeat(c[-1:], K, axis=0)])
    num = sum(k * (padded[K + k : K + k + T] - padded[K - k : K - k + T]) for k in range(1, K + 1))
    return num / (2 * sum(k * k for k in range(1, K + 1)))


def append_deltas(fm: FeatureMatrix, K: int = DELTA_WINDOW) -> FeatureMatrix:
    if any(name in fm.layout for name in ("delta", "delta_delta")):
        raise ContractViolation("append_deltas expects a static-only feature matrix")
    T, D = fm.frames.shape
    if T < 2 * K + 1:
        raise ShortUtteranceError(f"need at least {2 * K + 1} frames for deltas, got {T}")
    d1 = deltas(fm.frames, K)
    d2 = deltas(d1, K)
    layout = dict(fm.layout)
    layout["delta"] = slice(D, 2 * D)
    layout["delta_delta"] = slice(2 * D, 3 * D)
    return FeatureMatrix(np.concatenate([fm.frames, d1, d2], axis=1), layout, fm.frame_hop_ms, fm.window_ms)


def extract_features(w: Waveform, layout: str = "dvector") -> FeatureMatrix:
    """Full front-end for one of the two named layouts."""
    frames = frame_and_window(w)
    if layout == "dvector":
        return append_deltas(mfcc_pipeline(frames, n_ceps=19, include_log_energy=True))
    if layout == "xvector":
        return mfcc_pipeline(frames, n_ceps=30, include_log_energy=False, n_mels=N_MELS_XVECTOR)
    raise ConfigurationError(f"unknown feature layout {layout!r} (expected dvector or xvector)")


# -- file formats -----------------------------------------------------------


def write_features(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f8")
    if frames.ndim != 2:
        raise ContractViolation(f"feature matrix must be 2-D, got {frames.shape}")
    T, D = frames.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", T, D))
        fh.write(frames.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise ContractViolation(f"{path}: not a feature file (bad magic)")
    T, D = struct.unpack("<II", blob[4:12])
    payload = blob[12:]
    if len(payload) != 8 * T * D:
        raise ContractViolation(f"{path}: expected {T}x{D} float64 payload, got {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f8").reshape(T, D).astype(np.float64)


def write_wav(path, w: Waveform) -> None:
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    path = Path(path)
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ContractViolation(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32767.0, rate)
