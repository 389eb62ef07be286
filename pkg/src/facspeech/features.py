"""MFCC / log-mel front end, delta features, and network input composition."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signal import Waveform

LOG_FLOOR_DEFAULT = 1e-10
DELTA_HALF_WINDOW = 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mel: int, fft_size: int, sample_rate: int,
                   f_lo: float = 0.0, f_hi: float | None = None) -> np.ndarray:
    """Triangular mel filters evaluated at rfft bin frequencies.

    Peak height 1 per filter, so any single FFT bin's total weight across
    filters never exceeds 1 (adjacent triangles share their boundary).
    """
    if f_hi is None:
        f_hi = sample_rate / 2.0
    n_bins = fft_size // 2 + 1
    freqs = np.arange(n_bins) * (sample_rate / fft_size)
    mel_pts = np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mel + 2)
    hz_pts = mel_to_hz(mel_pts)
    w = np.zeros((n_mel, n_bins))
    for m in range(n_mel):
        left, center, right = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rise = (freqs - left) / (center - left)
        fall = (right - freqs) / (right - center)
        w[m] = np.maximum(0.0, np.minimum(rise, fall))
    return w


def dct_matrix(n_cep: int, n_mel: int) -> np.ndarray:
    """First ``n_cep`` rows of the orthonormal DCT-II basis over n_mel points.

    Rows are orthonormal, which makes the pseudo-inverse exactly the
    transpose.
    """
    k = np.arange(n_cep)[:, None]
    m = np.arange(n_mel)[None, :]
    c = np.sqrt(2.0 / n_mel) * np.cos(np.pi * k * (2 * m + 1) / (2 * n_mel))
    c[0] *= np.sqrt(0.5)
    return c


@dataclass
class Frontend:
    """Immutable analysis configuration plus its derived matrices.

    Defaults are desk scale (25 ms / 10 ms Hamming frames at 8 kHz,
    24 mel filters, 13 cepstra); ``paper_gmm`` / ``paper_dnn`` presets carry
    the reported configuration.
    """

    sample_rate: int = 8000
    frame_len: int = 200
    frame_shift: int = 80
    fft_size: int = 256
    n_mel: int = 24
    n_cep: int = 13
    log_floor: float = LOG_FLOOR_DEFAULT
    window: str = "hamming"
    mel_matrix: np.ndarray = field(init=False, repr=False)
    dct: np.ndarray = field(init=False, repr=False)
    dct_pinv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n_bins = self.fft_size // 2 + 1
        if self.frame_len > self.fft_size:
            raise ValueError("frame_len must not exceed fft_size")
        if not (1 <= self.n_cep <= self.n_mel <= n_bins):
            raise ValueError("need n_cep <= n_mel <= fft bins")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        self.mel_matrix = mel_filterbank(self.n_mel, self.fft_size, self.sample_rate)
        row_sums = self.mel_matrix.sum(axis=1)
        if np.any(row_sums <= 0):
            raise ValueError(
                "mel filter with no FFT-bin support; increase fft_size or "
                "reduce n_mel")
        self.dct = dct_matrix(self.n_cep, self.n_mel)
        self.dct_pinv = self.dct.T.copy()
        if self.window == "hamming":
            self._win = np.hamming(self.frame_len)
        elif self.window == "rect":
            self._win = np.ones(self.frame_len)
        else:
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def frame_shift_s(self) -> float:
        return self.frame_shift / self.sample_rate

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            raise ValueError("waveform shorter than one frame")
        return 1 + (n_samples - self.frame_len) // self.frame_shift

    def frame_center_sample(self, t: int) -> int:
        return t * self.frame_shift + self.frame_len // 2


def paper_gmm_frontend(**overrides) -> Frontend:
    """Reported source-model front end: 27 mel filters, 19 cepstra."""
    kw = dict(fft_size=512, frame_len=200, frame_shift=80, n_mel=27, n_cep=19)
    kw.update(overrides)
    return Frontend(**kw)


def paper_dnn_frontend(**overrides) -> Frontend:
    """Reported network front end: 50 mel filters."""
    kw = dict(fft_size=512, frame_len=200, frame_shift=80, n_mel=50, n_cep=13)
    kw.update(overrides)
    return Frontend(**kw)


@dataclass
class FeatureSequence:
    """T x D frame matrix plus the feature kind and frame shift."""

    frames: np.ndarray
    kind: str  # mfcc_static | mfcc_with_delta | log_mel | mel_power
    frame_shift_s: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a T x D matrix")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames must be finite")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def stft_power(w: Waveform, f: Frontend) -> np.ndarray:
    """Squared-magnitude spectrogram, T x (fft_size/2 + 1)."""
    n_frames = f.n_frames(len(w))
    idx = (np.arange(n_frames)[:, None] * f.frame_shift
           + np.arange(f.frame_len)[None, :])
    frames = w.samples[idx] * f._win[None, :]
    spec = np.fft.rfft(frames, n=f.fft_size, axis=1)
    return (spec.real ** 2 + spec.imag ** 2)


def mel_power(w: Waveform, f: Frontend) -> np.ndarray:
    return stft_power(w, f) @ f.mel_matrix.T


def log_mel(w: Waveform, f: Frontend) -> FeatureSequence:
    """log(max(mel power, floor)); natural logarithm, D = n_mel."""
    lm = np.log(np.maximum(mel_power(w, f), f.log_floor))
    return FeatureSequence(lm, "log_mel", f.frame_shift_s)


def mfcc(w: Waveform, f: Frontend) -> FeatureSequence:
    """Static MFCCs: DCT of the floored log mel power, D = n_cep."""
    y = log_mel(w, f).frames @ f.dct.T
    return FeatureSequence(y, "mfcc_static", f.frame_shift_s)


def delta_matrix(frames: np.ndarray, half_window: int = DELTA_HALF_WINDOW) -> np.ndarray:
    """Regression deltas over +/-half_window frames with edge replication."""
    T = frames.shape[0]
    denom = 2.0 * sum(k * k for k in range(1, half_window + 1))
    padded = np.concatenate([
        np.repeat(frames[:1], half_window, axis=0),
        frames,
        np.repeat(frames[-1:], half_window, axis=0),
    ])
    out = np.zeros_like(frames)
    for k in range(1, half_window + 1):
        out += k * (padded[half_window + k: half_window + k + T]
                    - padded[half_window - k: half_window - k + T])
    return out / denom


def append_deltas(fs: FeatureSequence) -> FeatureSequence:
    """Append first-order regression deltas; doubles D."""
    if fs.kind != "mfcc_static":
        raise ValueError("append_deltas expects mfcc_static input")
    if fs.n_frames < 1:
        raise ValueError("empty feature sequence")
    out = np.concatenate([fs.frames, delta_matrix(fs.frames)], axis=1)
    return FeatureSequence(out, "mfcc_with_delta", fs.frame_shift_s)


def mfcc_with_deltas(w: Waveform, f: Frontend) -> FeatureSequence:
    return append_deltas(mfcc(w, f))


# --- network input composition ----------------------------------------------

@dataclass
class Standardization:
    """Per-dimension mean/std for the continuous network inputs.

    mel statistics apply to every slot of the context window; the gain
    feature has its own scalar pair.
    """

    mel_mean: np.ndarray
    mel_std: np.ndarray
    gain_mean: float = 0.0
    gain_std: float = 1.0


def fit_standardization(mel_frames: np.ndarray,
                        gains_db: np.ndarray | None = None) -> Standardization:
    mel_frames = np.asarray(mel_frames, dtype=np.float64)
    std = mel_frames.std(axis=0)
    std[std < 1e-8] = 1.0
    if gains_db is None or len(np.atleast_1d(gains_db)) == 0:
        g_mean, g_std = 0.0, 1.0
    else:
        gains_db = np.atleast_1d(np.asarray(gains_db, dtype=np.float64))
        g_mean = float(gains_db.mean())
        g_std = float(gains_db.std()) or 1.0
    return Standardization(mel_frames.mean(axis=0), std, g_mean, g_std)


@dataclass
class InputSpec:
    """Shape and metadata contract for network input vectors."""

    context: int
    n_mel: int
    speaker_pairs: tuple[tuple[str, str], ...]
    stats: Standardization
    use_gain: bool = True

    @property
    def window_frames(self) -> int:
        return 2 * self.context + 1

    @property
    def n_continuous(self) -> int:
        return self.window_frames * self.n_mel

    @property
    def dim(self) -> int:
        return self.n_continuous + len(self.speaker_pairs) + (1 if self.use_gain else 0)

    def pair_index(self, speaker_pair: tuple[str, str]) -> int:
        try:
            return self.speaker_pairs.index(tuple(speaker_pair))
        except ValueError:
            raise KeyError(f"unknown speaker pair {speaker_pair!r}") from None


@dataclass
class DnnInput:
    """One composed network input: context window + pair code + gain."""

    window: np.ndarray            # (2c+1, n_mel), standardized
    speaker_pair_code: np.ndarray  # one-hot over ordered pairs
    gain_feature: float            # standardized dB scalar (0 when unused)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.window.ravel(),
                               self.speaker_pair_code,
                               [self.gain_feature]])


def window_indices(T: int, c: int) -> np.ndarray:
    """(T, 2c+1) frame indices with edge replication."""
    idx = np.arange(T)[:, None] + np.arange(-c, c + 1)[None, :]
    return np.clip(idx, 0, T - 1)


def compose_input_matrix(fs: FeatureSequence, spec: InputSpec,
                         speaker_pair: tuple[str, str],
                         gain_db: float) -> np.ndarray:
    """All frames of one utterance composed at once, (T, spec.dim)."""
    if fs.kind != "log_mel":
        raise ValueError("network inputs are composed from log_mel features")
    if fs.dim != spec.n_mel:
        raise ValueError("mel dimension does not match input spec")
    pair_idx = spec.pair_index(speaker_pair)
    std_frames = (fs.frames - spec.stats.mel_mean) / spec.stats.mel_std
    windows = std_frames[window_indices(fs.n_frames, spec.context)]
    out = np.zeros((fs.n_frames, spec.dim))
    out[:, : spec.n_continuous] = windows.reshape(fs.n_frames, -1)
    out[:, spec.n_continuous + pair_idx] = 1.0
    if spec.use_gain:
        out[:, -1] = (gain_db - spec.stats.gain_mean) / spec.stats.gain_std
    return out


def compose_dnn_input(fs: FeatureSequence, frame_index: int, spec: InputSpec,
                      speaker_pair: tuple[str, str], gain_db: float) -> DnnInput:
    """One frame's input: frames [t-c, t+c] edge-replicated, then the
    speaker-pair one-hot and the gain feature."""
    if not (0 <= frame_index < fs.n_frames):
        raise ValueError("frame_index out of range")
    row = compose_input_matrix(fs, spec, speaker_pair, gain_db)[frame_index]
    code = row[spec.n_continuous: spec.n_continuous + len(spec.speaker_pairs)]
    gain_feat = float(row[-1]) if spec.use_gain else 0.0
    return DnnInput(row[: spec.n_continuous].reshape(spec.window_frames, spec.n_mel),
                    code.copy(), gain_feat)


# --- feature archive ---------------------------------------------------------

ARCHIVE_MAGIC = b"FACFEAT1\n"


def write_feature_archive(path, items: dict[str, FeatureSequence]):
    """Binary archive: per-utterance text header + row-major float64 payload.

    Header line: ``id kind T D frame_shift_s``; payload is little-endian.
    """
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        for utt_id, fs in items.items():
            header = f"{utt_id} {fs.kind} {fs.n_frames} {fs.dim} {fs.frame_shift_s!r}\n"
            fh.write(header.encode("utf-8"))
            fh.write(fs.frames.astype("<f8").tobytes(order="C"))


def read_feature_archive(path) -> dict[str, FeatureSequence]:
    items = {}
    with open(path, "rb") as fh:
        if fh.read(len(ARCHIVE_MAGIC)) != ARCHIVE_MAGIC:
            raise ValueError("not a feature archive")
        while True:
            header = fh.readline()
            if not header:
                break
            utt_id, kind, T, D, shift = header.decode("utf-8").split()
            T, D = int(T), int(D)
            payload = fh.read(T * D * 8)
            if len(payload) != T * D * 8:
                raise ValueError("truncated feature archive")
            frames = np.frombuffer(payload, dtype="<f8").reshape(T, D).copy()
            items[utt_id] = FeatureSequence(frames, kind, float(shift))
    return items


def frame_labels(segments, frontend: Frontend, n_frames: int) -> list[str]:
    """Phone label per frame: the segment owning the frame-center sample."""
    labels = []
    bounds = [(s.phone, s.start, s.end) for s in segments]
    j = 0
    for t in range(n_frames):
        center = frontend.frame_center_sample(t)
        while j < len(bounds) - 1 and center >= bounds[j][2]:
            j += 1
        labels.append(bounds[j][0])
    return labels
