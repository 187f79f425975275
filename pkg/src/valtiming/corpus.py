"""Deterministic synthetic emotional-speech corpus with planted prosodic cues.

Each utterance is a harmonic source with a controlled F0 contour, syllable-
rate amplitude envelope and aspiration noise. Emotion shifts F0 level, F0
modulation depth, spectral tilt and loudness. Utterances labelled
``validate`` get a terminal F0 fall, lengthening of the final segment and a
trailing silence. Every label effect is scaled by ``cue_strength``; at 0 the
audio no longer depends on any label.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .audio import Waveform, quantize_pcm16, read_wav, write_wav

EMOTIONS = ("anger", "disgust", "fear", "joy", "neutral", "sadness", "surprise")
SENTIMENTS = ("negative", "neutral", "positive")
SENTIMENT_OF = {
    "anger": "negative",
    "disgust": "negative",
    "fear": "negative",
    "sadness": "negative",
    "neutral": "neutral",
    "joy": "positive",
    "surprise": "positive",
}
TIMING_LABELS = ("non-validate", "validate")  # index is the class id
SPLITS = ("train", "val", "test")
MANIFEST = "manifest.jsonl"

# f0 scale, f0 modulation depth, spectral tilt, loudness
EMOTION_PROFILES = {
    "neutral": (1.00, 0.04, 1.6, 1.00),
    "anger": (1.25, 0.10, 0.9, 1.45),
    "disgust": (0.88, 0.05, 2.1, 0.90),
    "fear": (1.35, 0.15, 1.8, 0.75),
    "joy": (1.30, 0.12, 1.2, 1.20),
    "sadness": (0.78, 0.02, 2.5, 0.65),
    "surprise": (1.50, 0.18, 1.3, 1.10),
}
# skewed towards neutral, as conversational emotion data usually is
DEFAULT_EMOTION_PROBS = (0.11, 0.07, 0.08, 0.17, 0.33, 0.12, 0.12)

PAUSE_SECONDS = 0.3
TERMINAL_FALL = 0.35
LENGTHENING = 0.5
FINAL_SEGMENT = 0.25
FALL_REGION = 0.3
MAX_HARMONIC_HZ = 4000.0


@dataclass
class CorpusSpec:
    n_train: int = 959
    n_val: int = 205
    n_test: int = 206
    speakers: tuple[int, int, int] = (16, 4, 4)
    min_duration: float = 0.5
    max_duration: float = 2.0
    cue_strength: float = 0.9
    validate_rate: float = 0.36
    emotion_probs: tuple[float, ...] = DEFAULT_EMOTION_PROBS
    seed: int = 42
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        self.speakers = tuple(int(s) for s in self.speakers)
        self.emotion_probs = tuple(float(p) for p in self.emotion_probs)
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one utterance")
        if len(self.speakers) != 3 or min(self.speakers) < 1:
            raise ValueError("speakers must give a positive count for train/val/test")
        if not 0.0 <= self.cue_strength <= 1.0:
            raise ValueError("cue_strength must lie in [0, 1]")
        if not 0.0 <= self.validate_rate <= 1.0:
            raise ValueError("validate_rate must lie in [0, 1]")
        if not 0 < self.min_duration <= self.max_duration:
            raise ValueError("need 0 < min_duration <= max_duration")
        if len(self.emotion_probs) != len(EMOTIONS) or abs(sum(self.emotion_probs) - 1) > 1e-9:
            raise ValueError("emotion_probs must have 7 entries summing to 1")

    @property
    def sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ManifestEntry:
    utt_id: str
    path: str
    emotion: str
    sentiment: str
    timing: str
    split: str
    speaker: str
    duration: float

    @property
    def timing_id(self) -> int:
        return TIMING_LABELS.index(self.timing)

    @property
    def emotion_id(self) -> int:
        return EMOTIONS.index(self.emotion)

    @property
    def sentiment_id(self) -> int:
        return SENTIMENTS.index(self.sentiment)


@dataclass
class UtteranceParams:
    emotion: str
    validate: bool
    duration: float  # seconds of voiced content before lengthening
    base_f0: float
    sample_rate: int = 16000


def _blend(emotion: str, strength: float) -> tuple[float, ...]:
    neutral = np.array(EMOTION_PROFILES["neutral"])
    target = np.array(EMOTION_PROFILES[emotion])
    return tuple(neutral + strength * (target - neutral))


def render_utterance(params: UtteranceParams, cue_strength: float, rng: np.random.Generator) -> Waveform:
    """Synthesize one utterance.

    The random draws are identical in number and order for every label, so
    with ``cue_strength == 0`` two utterances that share an rng state are
    byte-identical whatever their labels.
    """
    sr = params.sample_rate
    s = float(cue_strength)
    phase0 = rng.uniform(0, 2 * np.pi)
    syllable_rate = rng.uniform(3.5, 5.5)
    knots = rng.standard_normal(8)
    declination = rng.uniform(-0.15, 0.0)
    gain = rng.uniform(0.22, 0.32)
    noise_seed = int(rng.integers(2**32))

    f0_scale, depth, tilt, loudness = _blend(params.emotion, s)
    stretch = 1.0 + LENGTHENING * s if params.validate else 1.0
    D = params.duration
    split = (1 - FINAL_SEGMENT) * D
    voiced_len = split + FINAL_SEGMENT * D * stretch
    t = np.arange(int(round(voiced_len * sr))) / sr
    # content time: runs slower over the lengthened final segment
    tau = np.where(t < split, t, split + (t - split) / stretch)
    frac = np.clip(tau / D, 0.0, 1.0)

    contour = np.interp(frac, np.linspace(0, 1, len(knots)), knots)
    f0 = params.base_f0 * f0_scale * (1 + depth * contour) * (1 + declination * frac)
    if params.validate:
        ramp = np.clip((frac - (1 - FALL_REGION)) / FALL_REGION, 0.0, 1.0)
        f0 = f0 * (1 - TERMINAL_FALL * s * ramp)
    phase = 2 * np.pi * np.cumsum(f0) / sr

    n_harm = int(MAX_HARMONIC_HZ // f0.max())
    amps = np.arange(1, n_harm + 1, dtype=np.float64) ** -tilt
    amps /= np.sqrt(np.sum(amps**2))
    source = np.zeros_like(t)
    for k, a in enumerate(amps, start=1):
        source += a * np.sin(k * phase)

    envelope = 0.35 + 0.65 * np.sin(np.pi * syllable_rate * tau + phase0) ** 2
    edge = int(0.02 * sr)
    ramp_in = np.minimum(1.0, np.arange(len(t)) / edge)
    envelope *= ramp_in * ramp_in[::-1]
    noise = np.random.default_rng(noise_seed).standard_normal(len(t))
    voiced = gain * loudness * envelope * (source + 0.05 * noise)

    pause = np.zeros(int(round(PAUSE_SECONDS * s * sr)) if params.validate else 0)
    return Waveform(quantize_pcm16(np.concatenate([voiced, pause])), sr)


def speaker_f0(seed: int, speaker_index: int) -> float:
    return float(np.random.default_rng([seed, 1_000_000 + speaker_index]).uniform(95.0, 240.0))


def _plan(spec: CorpusSpec) -> list[tuple[ManifestEntry, UtteranceParams, int]]:
    plan = []
    index = 0
    speaker_offset = 0
    for split_no, split in enumerate(SPLITS):
        n = spec.sizes[split]
        n_spk = spec.speakers[split_no]
        rng = np.random.default_rng([spec.seed, 2_000_000 + split_no])
        n_val = int(round(spec.validate_rate * n))
        timing = rng.permutation(np.r_[np.ones(n_val, dtype=bool), np.zeros(n - n_val, dtype=bool)])
        emotions = rng.choice(len(EMOTIONS), size=n, p=spec.emotion_probs)
        for i in range(n):
            spk = speaker_offset + i % n_spk
            emotion = EMOTIONS[emotions[i]]
            utt_id = f"{split}-{i:05d}"
            entry = ManifestEntry(
                utt_id=utt_id,
                path=f"audio/{utt_id}.wav",
                emotion=emotion,
                sentiment=SENTIMENT_OF[emotion],
                timing=TIMING_LABELS[int(timing[i])],
                split=split,
                speaker=f"spk{spk:03d}",
                duration=0.0,
            )
            params = UtteranceParams(emotion, bool(timing[i]), 0.0, speaker_f0(spec.seed, spk), spec.sample_rate)
            plan.append((entry, params, index))
            index += 1
        speaker_offset += n_spk
    return plan


def generate_corpus(spec: CorpusSpec, out_dir: str | Path) -> list[ManifestEntry]:
    """Render every utterance to WAV and write the manifest last.

    The manifest is written to a temporary name and renamed into place, so
    its presence implies the audio is complete.
    """
    out = Path(out_dir)
    try:
        (out / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    entries = []
    for entry, params, index in _plan(spec):
        rng = np.random.default_rng([spec.seed, index])
        params.duration = rng.uniform(spec.min_duration, spec.max_duration)
        wave = render_utterance(params, spec.cue_strength, rng)
        write_wav(out / entry.path, wave)
        entry.duration = round(wave.duration, 6)
        entries.append(entry)
    tmp = out / (MANIFEST + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(asdict(entry), sort_keys=True, ensure_ascii=False) + "\n")
    os.replace(tmp, out / MANIFEST)
    return entries


def load_manifest(corpus_dir: str | Path) -> list[ManifestEntry]:
    path = Path(corpus_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        return [ManifestEntry(**json.loads(line)) for line in fh if line.strip()]


@dataclass
class Utterance:
    entry: ManifestEntry
    samples: np.ndarray = field(repr=False)


def load_split(corpus_dir: str | Path, split: str | Iterable[str]) -> list[Utterance]:
    """Read the audio of one or more splits into float32 arrays."""
    splits = {split} if isinstance(split, str) else set(split)
    unknown = splits - set(SPLITS)
    if unknown:
        raise ValueError(f"unknown split(s) {sorted(unknown)}; expected {SPLITS}")
    root = Path(corpus_dir)
    return [
        Utterance(e, read_wav(root / e.path).samples.astype(np.float32))
        for e in load_manifest(root)
        if e.split in splits
    ]
