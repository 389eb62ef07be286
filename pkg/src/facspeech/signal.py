"""Synthetic utterance waveforms and two-talker mixing at controlled TMR.

The corpus generator stands in for a recorded command corpus: each phone is
rendered from a spectral template (band-limited harmonics or band-passed
noise) with a per-speaker spectral shift, so speaker-dependent modeling
stays meaningful downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .errors import LexiconError

DEFAULT_SAMPLE_RATE = 8000

# Base peak amplitude of voiced material.  Kept low enough that a mixture at
# the most adverse default TMR still fits inside 16-bit PCM headroom.
BASE_AMP = 0.15
SILENCE_AMP_RATIO = 1e-4
EDGE_FADE_S = 0.004


@dataclass
class Waveform:
    """Single-channel audio: float64 samples plus the sampling rate in Hz."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))


@dataclass(frozen=True)
class MixSpec:
    """How to pick the masker gain g: an explicit value, or solved from TMR.

    Exactly one of ``explicit_gain`` / ``tmr_db`` governs g.
    """

    tmr_db: float | None = None
    explicit_gain: float | None = None

    def __post_init__(self):
        if (self.tmr_db is None) == (self.explicit_gain is None):
            raise ValueError("exactly one of tmr_db / explicit_gain must be set")
        if self.explicit_gain is not None and self.explicit_gain < 0:
            raise ValueError("explicit_gain must be nonnegative")

    @property
    def gain_mode(self) -> str:
        return "explicit_gain" if self.explicit_gain is not None else "from_tmr"


@dataclass(frozen=True)
class PhoneTemplate:
    """Spectral recipe for one phone.

    kind is "tone" (harmonic stack inside the band), "noise" (band-passed
    noise), or "silence".  The band is in Hz for a neutral speaker; per-
    speaker shifts scale it multiplicatively.
    """

    name: str
    kind: str
    band: tuple[float, float]
    dur_range: tuple[float, float]
    amp: float = BASE_AMP


@dataclass(frozen=True)
class Speaker:
    """Synthetic talker: a spectral shift factor and a fundamental."""

    speaker_id: str
    shift: float = 1.0
    f0: float = 120.0

    @property
    def gender(self) -> str:
        """Synthetic condition attribute: sign of the spectral shift."""
        return "high" if self.shift >= 1.0 else "low"


NEUTRAL_SPEAKER = Speaker("neutral", 1.0, 120.0)


@dataclass
class Voice:
    """Everything needed to render word sequences for one talker."""

    phone_table: dict[str, PhoneTemplate]
    lexicon: dict[str, list[str]]
    speaker: Speaker = NEUTRAL_SPEAKER
    sample_rate: int = DEFAULT_SAMPLE_RATE


@dataclass(frozen=True)
class Segment:
    """Phone-labelled sample interval [start, end) of a waveform."""

    phone: str
    start: int
    end: int


def default_phone_table(n_phones: int = 10) -> dict[str, PhoneTemplate]:
    """Inventory of ``n_phones`` band-distinct phones plus silence.

    Bands are log-spaced over speech range; tone and noise kinds alternate so
    both source types appear in every corpus.
    """
    edges = np.geomspace(220.0, 3400.0, n_phones + 1)
    table = {}
    for i in range(n_phones):
        name = f"p{i}"
        kind = "tone" if i % 2 == 0 else "noise"
        table[name] = PhoneTemplate(
            name=name,
            kind=kind,
            band=(float(edges[i]), float(edges[i + 1])),
            dur_range=(0.08, 0.14),
        )
    table["sil"] = PhoneTemplate(
        name="sil", kind="silence", band=(0.0, 0.0), dur_range=(0.08, 0.16)
    )
    return table


def make_speakers(n_speakers: int) -> list[Speaker]:
    """Deterministic speaker registry with alternating shift signs.

    Even indices shift the spectrum up ("high" gender attribute), odd ones
    down, with three magnitude steps so same-gender speakers still differ.
    """
    speakers = []
    for i in range(n_speakers):
        sign = 1.0 if i % 2 == 0 else -1.0
        magnitude = 0.07 + 0.035 * ((i // 2) % 3)
        shift = 2.0 ** (sign * magnitude)
        f0 = 115.0 * shift + 4.0 * (i // 2)
        speakers.append(Speaker(f"s{i}", shift=round(shift, 6), f0=round(f0, 3)))
    return speakers


def _fade(n: int, sr: int) -> np.ndarray:
    """Raised-cosine edge envelope to avoid clicks / spectral splatter."""
    env = np.ones(n)
    k = min(int(EDGE_FADE_S * sr), n // 2)
    if k > 0:
        ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, math.pi, k))
        env[:k] = ramp
        env[-k:] = ramp[::-1]
    return env


def _render_phone(tpl: PhoneTemplate, speaker: Speaker, n: int, sr: int,
                  rng: np.random.Generator) -> np.ndarray:
    if tpl.kind == "silence":
        return tpl.amp * SILENCE_AMP_RATIO * rng.standard_normal(n)

    lo, hi = tpl.band[0] * speaker.shift, tpl.band[1] * speaker.shift
    hi = min(hi, 0.49 * sr)
    if tpl.kind == "tone":
        f0 = speaker.f0
        freqs = np.arange(math.ceil(lo / f0), math.floor(hi / f0) + 1) * f0
        if len(freqs) == 0:
            freqs = np.array([0.5 * (lo + hi)])
        t = np.arange(n) / sr
        phases = rng.uniform(0.0, 2.0 * math.pi, size=len(freqs))
        seg = np.sin(2.0 * math.pi * freqs[:, None] * t[None, :]
                     + phases[:, None]).sum(axis=0)
        seg *= tpl.amp / math.sqrt(len(freqs))
    elif tpl.kind == "noise":
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        f = np.fft.rfftfreq(n, d=1.0 / sr)
        spec[(f < lo) | (f > hi)] = 0.0
        seg = np.fft.irfft(spec, n=n)
        rms = math.sqrt(float(np.mean(seg ** 2))) or 1.0
        seg *= tpl.amp / (math.sqrt(2.0) * rms)
    else:
        raise ValueError(f"unknown template kind {tpl.kind!r}")
    return seg * _fade(n, sr)


def synth_utterance_aligned(word_seq: list[str], voice: Voice,
                            seed: int) -> tuple[Waveform, list[Segment]]:
    """Render a word sequence and return the waveform with phone segments.

    Deterministic given (word_seq, voice, seed).  Durations are drawn per
    phone from the template range; segments carry exact sample boundaries so
    no forced alignment is ever needed downstream.
    """
    if not word_seq:
        raise ValueError("word_seq must not be empty")
    phones = []
    for word in word_seq:
        if word not in voice.lexicon:
            raise LexiconError(f"word {word!r} has no phone expansion")
        phones.extend(voice.lexicon[word])
    for ph in phones:
        if ph not in voice.phone_table:
            raise LexiconError(f"phone {ph!r} has no template")

    rng = np.random.default_rng(seed)
    sr = voice.sample_rate
    pieces, segments, cursor = [], [], 0
    for ph in phones:
        tpl = voice.phone_table[ph]
        dur = rng.uniform(*tpl.dur_range)
        n = max(int(round(dur * sr)), 1)
        pieces.append(_render_phone(tpl, voice.speaker, n, sr, rng))
        segments.append(Segment(ph, cursor, cursor + n))
        cursor += n
    return Waveform(np.concatenate(pieces), sr), segments


def synth_utterance(word_seq: list[str], voice: Voice, seed: int) -> Waveform:
    """Like :func:`synth_utterance_aligned`, waveform only."""
    return synth_utterance_aligned(word_seq, voice, seed)[0]


def gain_from_tmr(tmr_db: float, energy_a: float, energy_b: float) -> float:
    """Masker gain g with 10*log10(energy_a / (g^2 * energy_b)) = tmr_db."""
    if energy_a <= 0 or energy_b <= 0:
        raise ValueError("energies must be positive")
    return math.sqrt(energy_a / energy_b) * 10.0 ** (-tmr_db / 20.0)


def resolve_gain(spec: MixSpec, energy_a: float, energy_b: float) -> float:
    if spec.explicit_gain is not None:
        return spec.explicit_gain
    return gain_from_tmr(spec.tmr_db, energy_a, energy_b)


def mix(x_a: Waveform, x_b: Waveform, spec: MixSpec) -> Waveform:
    """Per-sample y[t] = x_a[t] + g*x_b[t]; shorter input zero-padded at tail."""
    if x_a.sample_rate != x_b.sample_rate:
        raise ValueError("sample-rate mismatch")
    n = max(len(x_a), len(x_b))
    a = np.zeros(n)
    b = np.zeros(n)
    a[: len(x_a)] = x_a.samples
    b[: len(x_b)] = x_b.samples
    g = resolve_gain(spec, x_a.energy(), x_b.energy())
    return Waveform(a + g * b, x_a.sample_rate)


def pad_to(w: Waveform, n: int) -> Waveform:
    """Zero-pad at the tail to ``n`` samples (no-op when already long enough)."""
    if len(w) >= n:
        return w
    out = np.zeros(n)
    out[: len(w)] = w.samples
    return Waveform(out, w.sample_rate)


# --- WAV + manifest I/O ----------------------------------------------------

def write_wav(path, w: Waveform):
    """16-bit PCM, single channel.  Values outside [-1, 1) are clipped."""
    scaled = np.clip(w.samples, -1.0, 32767.0 / 32768.0)
    wavfile.write(str(path), w.sample_rate, np.round(scaled * 32768.0).astype(np.int16))


def read_wav(path) -> Waveform:
    sr, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError("expected single-channel WAV")
    if data.dtype != np.int16:
        raise ValueError("expected 16-bit PCM WAV")
    return Waveform(data.astype(np.float64) / 32768.0, int(sr))


@dataclass(frozen=True)
class UtteranceRecord:
    """One corpus manifest row."""

    utt_id: str
    speaker_id: str
    path: str
    words: tuple[str, ...] = field(default_factory=tuple)


def write_manifest(path, records: list[UtteranceRecord]):
    """Line-oriented manifest: utt_id, speaker, path, word sequence (TSV)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#utt_id\tspeaker_id\tpath\twords\n")
        for r in records:
            fh.write(f"{r.utt_id}\t{r.speaker_id}\t{r.path}\t{' '.join(r.words)}\n")


def read_manifest(path) -> list[UtteranceRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            utt_id, speaker_id, rel, words = line.split("\t")
            records.append(UtteranceRecord(utt_id, speaker_id, rel,
                                           tuple(words.split())))
    return records
