"""Synthetic multi-speaker, multi-channel corpus.

Speakers are source-filter voices: a harmonic source at the speaker's f0
(with drift and jitter) passed through speaker-specific resonators and a
syllable-like amplitude envelope, with silence padding at both ends.
Channels are an FIR filter, a gain and additive white noise, which is
what makes non-speech frames carry channel identity.

Per-speaker and per-channel parameters sit on coarse grids with jitter so
that classes keep a minimum separation regardless of seed.
"""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigurationError, ContractViolation, JfeError
from .features import SAMPLE_RATE, Waveform, write_wav

logger = logging.getLogger(__name__)

PEAK = 0.9


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0: float
    formants: tuple[float, ...]
    bandwidths: tuple[float, ...]
    syllable_rate: float
    duty: float


@dataclass(frozen=True)
class ChannelProfile:
    channel_id: str
    taps: tuple[float, ...]
    gain: float
    noise_level: float

    def __post_init__(self):
        if not 1 <= len(self.taps) <= 64:
            raise ContractViolation(f"channel {self.channel_id}: FIR length must be 1..64")
        if self.noise_level < 0:
            raise ContractViolation(f"channel {self.channel_id}: noise level must be >= 0")


@dataclass
class CorpusSpec:
    n_speakers: int = 20
    n_channels: int = 4
    n_utterances: int = 6
    min_duration: float = 1.0
    max_duration: float = 1.0
    sample_rate: int = SAMPLE_RATE
    seed: int = 0
    silence_fraction: tuple[float, float] = (0.15, 0.3)
    channel_tilt: float = 0.7
    channel_curve: float = 0.5
    noise_range: tuple[float, float] = (0.003, 0.03)

    def __post_init__(self):
        if self.n_speakers < 2 or self.n_channels < 2 or self.n_utterances < 1:
            raise ConfigurationError(
                f"corpus needs >= 2 speakers, >= 2 channels, >= 1 utterance per pair; got "
                f"S={self.n_speakers} C={self.n_channels} U={self.n_utterances}"
            )
        if not 0.5 <= self.min_duration <= self.max_duration:
            raise ConfigurationError("durations must satisfy 0.5 <= min_duration <= max_duration")


@dataclass
class ManifestRow:
    path: str
    speaker: str
    channel: str
    duration: float

    @property
    def utt_id(self) -> str:
        return Path(self.path).stem


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @property
    def speakers(self) -> list[str]:
        return sorted({r.speaker for r in self.rows})

    @property
    def channels(self) -> list[str]:
        return sorted({r.channel for r in self.rows})

    def by_id(self) -> dict[str, ManifestRow]:
        return {r.utt_id: r for r in self.rows}

    def resolve(self, row: ManifestRow) -> Path:
        return self.root / row.path

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for r in self.rows:
                w.writerow([r.path, r.speaker, r.channel, repr(float(r.duration))])

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        rows = []
        with open(path, newline="") as fh:
            for lineno, rec in enumerate(csv.reader(fh, delimiter="\t"), 1):
                if not rec:
                    continue
                if len(rec) != 4:
                    raise ContractViolation(f"{path}:{lineno}: expected 4 tab-separated fields")
                rows.append(ManifestRow(rec[0], rec[1], rec[2], float(rec[3])))
        return cls(rows, path.parent)


# -- profiles ------------------------------------------------------------------


def _grid(n: int, lo: float, hi: float, rng: np.random.Generator, jitter: float = 0.15) -> np.ndarray:
    """n points evenly spaced on [lo, hi], shuffled, each jittered by a fraction of the spacing."""
    pts = np.linspace(lo, hi, n)
    step = (hi - lo) / max(n - 1, 1)
    return rng.permutation(pts + rng.uniform(-jitter, jitter, n) * step)


def make_speakers(n: int, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> list[SpeakerProfile]:
    f0 = _grid(n, 95.0, 240.0, rng)
    tract = _grid(n, 0.85, 1.2, rng)  # formant scale factor (vocal tract length)
    rate = _grid(n, 3.0, 6.0, rng)
    base = np.array([600.0, 1500.0, 2600.0, 3500.0])
    out = []
    for k in range(n):
        formants = base * tract[k] * (1.0 + rng.uniform(-0.06, 0.06, base.size))
        formants = np.minimum(formants, 0.45 * sample_rate)
        bw = np.array([70.0, 100.0, 150.0, 200.0]) * rng.uniform(0.8, 1.25, base.size)
        out.append(
            SpeakerProfile(
                speaker_id=f"spk{k:03d}",
                f0=float(f0[k]),
                formants=tuple(float(f) for f in formants),
                bandwidths=tuple(float(b) for b in bw),
                syllable_rate=float(rate[k]),
                duty=float(rng.uniform(0.55, 0.8)),
            )
        )
    return out


def make_channels(
    n: int,
    rng: np.random.Generator,
    tilt: float = 0.7,
    noise_range: tuple[float, float] = (0.003, 0.03),
    curve: float = 0.5,
) -> list[ChannelProfile]:
    """Three-tap FIR channels [1, beta, gamma]: beta sets spectral tilt, gamma a
    mid-band bump or dip; both sit on independent shuffled grids."""
    betas = _grid(n, -tilt, tilt, rng)
    gammas = _grid(n, -curve, curve, rng)
    gains = _grid(n, 0.5, 1.0, rng)
    noise = np.exp(_grid(n, np.log(noise_range[0]), np.log(noise_range[1]), rng))
    out = []
    for k in range(n):
        taps = np.array([1.0, betas[k], gammas[k]])
        out.append(ChannelProfile(f"ch{k}", tuple(float(t) for t in taps), float(gains[k]), float(noise[k])))
    return out


def identity_channel(channel_id: str = "identity") -> ChannelProfile:
    return ChannelProfile(channel_id, (1.0,), 1.0, 0.0)


# -- synthesis -------------------------------------------------------------------


def _resonator(x: np.ndarray, freq: float, bw: float, fs: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def _envelope(n: int, sp: SpeakerProfile, fs: int, rng, silence_fraction) -> np.ndarray:
    env = np.zeros(n)
    lead = int(n * rng.uniform(*silence_fraction))
    trail = int(n * rng.uniform(*silence_fraction))
    start, stop = lead, max(lead + 1, n - trail)
    period = fs / (sp.syllable_rate * rng.uniform(0.9, 1.1))
    t = start
    while t < stop:
        length = int(period * sp.duty * rng.uniform(0.8, 1.2))
        seg = min(length, stop - t)
        if seg > 1:
            env[t : t + seg] = np.sin(np.pi * np.arange(seg) / length) ** 0.5 * rng.uniform(0.7, 1.0)
        t += int(period)
    return env


def speaker_source(sp: SpeakerProfile, n: int, fs: int, rng: np.random.Generator,
                   silence_fraction=(0.15, 0.3)) -> np.ndarray:
    """Unit-peak voiced signal for one utterance of ``n`` samples."""
    f0 = sp.f0 * rng.uniform(0.95, 1.05)
    t = np.arange(n) / fs
    drift = 1.0 + 0.04 * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * t + rng.uniform(0, 2 * np.pi))
    jitter = 1.0 + 0.01 * rng.standard_normal(n)
    phase = 2 * np.pi * np.cumsum(f0 * drift * jitter) / fs
    n_harm = int((0.5 * fs - 200) // (f0 * 1.1))
    src = np.zeros(n)
    for k in range(1, n_harm + 1):
        src += np.sin(k * phase) / k
    shaped = np.zeros(n)
    scale = rng.uniform(0.97, 1.03)
    for f, bw in zip(sp.formants, sp.bandwidths):
        shaped += _resonator(src, f * scale, bw, fs)
    x = shaped * _envelope(n, sp, fs, rng, silence_fraction)
    peak = np.max(np.abs(x))
    return x / peak if peak > 0 else x


def apply_channel(x: np.ndarray, ch: ChannelProfile, rng: np.random.Generator) -> np.ndarray:
    y = ch.gain * np.convolve(x, ch.taps)[: len(x)]
    return y + ch.noise_level * rng.standard_normal(len(x))


def generate_utterance(
    sp: SpeakerProfile,
    ch: ChannelProfile,
    duration: float,
    rng: np.random.Generator,
    sample_rate: int = SAMPLE_RATE,
    silence_fraction=(0.15, 0.3),
) -> tuple[Waveform, dict]:
    """One peak-normalized utterance and its labels."""
    if duration < 0.5:
        raise ContractViolation(f"utterance duration must be >= 0.5 s, got {duration}")
    n = int(round(duration * sample_rate))
    src = speaker_source(sp, n, sample_rate, rng, silence_fraction)
    y = apply_channel(src, ch, rng)
    peak = np.max(np.abs(y))
    y = PEAK * y / peak if peak > 0 else y
    return Waveform(y, sample_rate), {"speaker": sp.speaker_id, "channel": ch.channel_id}


def _utt_rng(seed: int, s: int, c: int, u: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(s, c, u)))


def corpus_profiles(spec: CorpusSpec) -> tuple[list[SpeakerProfile], list[ChannelProfile]]:
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1 << 20,)))
    speakers = make_speakers(spec.n_speakers, rng, spec.sample_rate)
    channels = make_channels(spec.n_channels, rng, spec.channel_tilt, spec.noise_range, spec.channel_curve)
    return speakers, channels


def synthesize(spec: CorpusSpec, s: int, c: int, u: int, profiles=None) -> Waveform:
    speakers, channels = profiles or corpus_profiles(spec)
    rng = _utt_rng(spec.seed, s, c, u)
    duration = rng.uniform(spec.min_duration, spec.max_duration)
    wav, _ = generate_utterance(speakers[s], channels[c], duration, rng, spec.sample_rate, spec.silence_fraction)
    return wav


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("JFE_NUM_WORKERS", "1")))
    except ValueError:
        raise ConfigurationError("JFE_NUM_WORKERS must be an integer") from None


def generate_corpus(spec: CorpusSpec, out_dir) -> Manifest:
    """Write S x C x U WAV files under ``out_dir/wav`` and ``out_dir/manifest.tsv``."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    try:
        wav_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise JfeError(f"cannot create {wav_dir}: {exc}") from exc
    profiles = corpus_profiles(spec)
    speakers, channels = profiles
    jobs = [
        (s, c, u)
        for s in range(spec.n_speakers)
        for c in range(spec.n_channels)
        for u in range(spec.n_utterances)
    ]

    def work(job):
        s, c, u = job
        wav = synthesize(spec, s, c, u, profiles)
        rel = f"wav/{speakers[s].speaker_id}_{channels[c].channel_id}_u{u:02d}.wav"
        try:
            write_wav(out_dir / rel, wav)
        except OSError as exc:
            raise JfeError(f"cannot write {out_dir / rel}: {exc}") from exc
        return ManifestRow(rel, speakers[s].speaker_id, channels[c].channel_id, wav.duration)

    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        rows = list(pool.map(work, jobs))
    manifest = Manifest(rows, out_dir)
    manifest.write(out_dir / "manifest.tsv")
    return manifest


# -- trials ----------------------------------------------------------------------


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    target: bool
    matched: bool


@dataclass
class TrialSplit:
    train: list[str]
    enroll: dict[str, list[str]]
    trials: list[Trial]

    @property
    def test_ids(self) -> list[str]:
        return sorted({t.test_id for t in self.trials})


def split_trials(
    manifest: Manifest,
    rng: np.random.Generator,
    enroll_channels=None,
    n_eval: int = 2,
    train_channels: int | None = None,
) -> TrialSplit:
    """Hold out ``n_eval`` utterances per (speaker, channel) for evaluation.

    From each held-out group on an enrollment channel the first utterance is
    used for enrollment; all other held-out utterances are test segments.  A
    trial is ``matched`` when the test channel is an enrollment channel.
    Nontarget trials are drawn without replacement so that each condition has
    as many nontargets as targets.  Remaining utterances form the training set.

    ``train_channels=k`` keeps, for the i-th speaker, only training utterances
    from channels i, i+1, ..., i+k-1 (mod C), so that speaker and channel are
    confounded in training the way a speaker recorded on a few devices would be.
    Held-out utterances still cover every channel.
    """
    channels = manifest.channels
    speakers = manifest.speakers
    if enroll_channels is None:
        enroll_channels = channels[:1]
    enroll_channels = list(enroll_channels)
    if not set(enroll_channels) <= set(channels) or not enroll_channels:
        raise ConfigurationError(f"enrollment channels {enroll_channels} not in corpus channels {channels}")
    if n_eval < 2:
        raise ConfigurationError("n_eval must be >= 2 (one enrollment and one matched test)")
    if train_channels is not None and not 1 <= train_channels <= len(channels):
        raise ConfigurationError(f"train_channels must be in 1..{len(channels)}, got {train_channels}")
    k = len(channels) if train_channels is None else train_channels
    spk_index = {s: i for i, s in enumerate(speakers)}
    chan_index = {c: i for i, c in enumerate(channels)}
    groups: dict[tuple[str, str], list[str]] = {}
    for r in manifest.rows:
        groups.setdefault((r.speaker, r.channel), []).append(r.utt_id)
    train, enroll, tests = [], {s: [] for s in speakers}, []
    for (spk, chan), ids in sorted(groups.items()):
        if len(ids) < max(2, n_eval):
            raise ConfigurationError(f"({spk}, {chan}) has {len(ids)} utterances, need >= {max(2, n_eval)}")
        ids = sorted(ids)
        order = rng.permutation(len(ids))
        held = [ids[i] for i in order[:n_eval]]
        if (chan_index[chan] - spk_index[spk]) % len(channels) < k:
            train.extend(ids[i] for i in order[n_eval:])
        if chan in enroll_channels:
            enroll[spk].append(held[0])
            held = held[1:]
        tests.extend((spk, chan, h) for h in held)
    trials: list[Trial] = []
    for matched in (True, False):
        cond = [(s, h) for s, c, h in tests if (c in enroll_channels) == matched]
        targets = [Trial(s, h, True, matched) for s, h in cond]
        pool = [(e, h) for s, h in cond for e in speakers if e != s]
        pick = rng.choice(len(pool), size=min(len(targets), len(pool)), replace=False)
        nontargets = [Trial(pool[i][0], pool[i][1], False, matched) for i in sorted(pick)]
        trials.extend(targets + nontargets)
    return TrialSplit(sorted(train), enroll, trials)


def write_trials(path, trials) -> None:
    with open(path, "w") as fh:
        for t in trials:
            fh.write(
                f"{t.enroll_id}\t{t.test_id}\t{'target' if t.target else 'nontarget'}\t"
                f"{'matched' if t.matched else 'mismatched'}\n"
            )


def read_trials(path) -> list[Trial]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4 or parts[2] not in ("target", "nontarget") or parts[3] not in ("matched", "mismatched"):
                raise ContractViolation(f"{path}:{lineno}: malformed trial line")
            out.append(Trial(parts[0], parts[1], parts[2] == "target", parts[3] == "matched"))
    return out


def write_enrollment(path, enroll: dict[str, list[str]]) -> None:
    with open(path, "w") as fh:
        for spk, ids in sorted(enroll.items()):
            for utt in ids:
                fh.write(f"{spk}\t{utt}\n")


def read_enrollment(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ContractViolation(f"{path}:{lineno}: malformed enrollment line")
            out.setdefault(parts[0], []).append(parts[1])
    return out
