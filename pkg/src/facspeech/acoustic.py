"""One-state monophone GMM-HMM source models.

Training is plain EM from exactly labelled frames (the synthetic corpus
emits ground-truth alignments), with k-means++ initialization and a
variance floor.  Evaluation helpers are vectorized over frames and states
because the joint-state estimators call them in bulk.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureSequence

LOG_2PI = math.log(2.0 * math.pi)
VARIANCE_FLOOR_FRACTION = 1e-3
SELF_LOOP_EPS = 1e-4


@dataclass
class GmmState:
    """Diagonal-covariance mixture for one phone state."""

    weights: np.ndarray    # (K,)
    means: np.ndarray      # (K, D)
    variances: np.ndarray  # (K, D)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if abs(self.weights.sum() - 1.0) > 1e-10:
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class GmmHmmSet:
    """Monophone set: one GMM per phone plus self-loop and prior vectors."""

    phones: list[str]
    states: list[GmmState]
    self_loop: np.ndarray
    priors: np.ndarray
    d_static: int
    cepstral_ones: np.ndarray  # DCT basis applied to the all-ones mel vector
    feature_kind: str = "mfcc_with_delta"
    training_log: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.self_loop = np.asarray(self.self_loop, dtype=np.float64)
        self.priors = np.asarray(self.priors, dtype=np.float64)
        self.cepstral_ones = np.asarray(self.cepstral_ones, dtype=np.float64)
        if np.any((self.self_loop <= 0) | (self.self_loop >= 1)):
            raise ValueError("self-loop probabilities must lie in (0, 1)")
        if abs(self.priors.sum() - 1.0) > 1e-8 or np.any(self.priors < 0):
            raise ValueError("priors must form a simplex")

    @property
    def n_states(self) -> int:
        return len(self.phones)

    @property
    def dim(self) -> int:
        return self.states[0].dim

    def state_index(self, phone: str) -> int:
        return self.phones.index(phone)

    def stacked_params(self):
        """(weights list, means (S,Kmax,D), vars, mask) padded for batch eval."""
        kmax = max(s.n_components for s in self.states)
        S, D = self.n_states, self.dim
        logw = np.full((S, kmax), -np.inf)
        means = np.zeros((S, kmax, D))
        variances = np.ones((S, kmax, D))
        for i, st in enumerate(self.states):
            k = st.n_components
            logw[i, :k] = np.log(st.weights)
            means[i, :k] = st.means
            variances[i, :k] = st.variances
        return logw, means, variances


def variance_floor(frames: np.ndarray,
                   fraction: float = VARIANCE_FLOOR_FRACTION) -> np.ndarray:
    glob = frames.var(axis=0)
    glob[glob <= 0] = 1.0
    return fraction * glob


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; returns (k, D) initial centers."""
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            ((x[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[rng.choice(n, p=d2 / total)])
    return np.asarray(centers)


def _gmm_loglik_rows(x: np.ndarray, logw: np.ndarray, means: np.ndarray,
                     variances: np.ndarray) -> np.ndarray:
    """Per-frame, per-component log densities plus log weights, (T, K)."""
    diff = x[:, None, :] - means[None, :, :]
    ll = -0.5 * (np.sum(diff * diff / variances[None, :, :], axis=2)
                 + np.sum(np.log(variances), axis=1)[None, :]
                 + x.shape[1] * LOG_2PI)
    return ll + logw[None, :]


def fit_gmm(x: np.ndarray, n_components: int, floor: np.ndarray,
            n_iter: int = 10, seed: int = 0):
    """EM fit of a diagonal GMM; returns (GmmState, per-iteration loglik)."""
    rng = np.random.default_rng(seed)
    n, d = x.shape
    if n_components > n:
        warnings.warn(
            f"only {n} frames for {n_components} components; reducing", stacklevel=2)
        n_components = max(1, n)
    if n_components == 1:
        mean = x.mean(axis=0)
        var = np.maximum(x.var(axis=0), floor)
        state = GmmState(np.ones(1), mean[None, :], var[None, :])
        ll = float(_gmm_loglik_rows(x, np.zeros(1), state.means,
                                    state.variances).sum())
        return state, [ll]

    means = _kmeanspp_init(x, n_components, rng)
    variances = np.tile(np.maximum(x.var(axis=0), floor), (n_components, 1))
    logw = np.full(n_components, -math.log(n_components))
    trace = []
    for _ in range(n_iter):
        rows = _gmm_loglik_rows(x, logw, means, variances)
        norm = _logsumexp(rows, axis=1)
        trace.append(float(norm.sum()))
        resp = np.exp(rows - norm[:, None])
        nk = resp.sum(axis=0) + 1e-12
        means = (resp.T @ x) / nk[:, None]
        sq = (resp.T @ (x * x)) / nk[:, None]
        variances = np.maximum(sq - means ** 2, floor)
        logw = np.log(nk / nk.sum())
    rows = _gmm_loglik_rows(x, logw, means, variances)
    trace.append(float(_logsumexp(rows, axis=1).sum()))
    return GmmState(np.exp(logw), means, variances), trace


def _logsumexp(a: np.ndarray, axis=None):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def train_gmm_hmm(features: list[FeatureSequence], alignments: list[list[str]],
                  n_components: int, phones: list[str] | None = None,
                  cepstral_ones: np.ndarray | None = None,
                  d_static: int | None = None,
                  n_iter: int = 10, seed: int = 0) -> GmmHmmSet:
    """Fit per-phone GMMs and self-loop probabilities from labelled frames."""
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if len(features) != len(alignments):
        raise ValueError("features and alignments must pair up")
    if phones is None:
        phones = sorted({ph for al in alignments for ph in al})
    index = {ph: i for i, ph in enumerate(phones)}

    buckets = {ph: [] for ph in phones}
    stay = np.zeros(len(phones))
    leave = np.zeros(len(phones))
    for fs, al in zip(features, alignments):
        if fs.n_frames != len(al):
            raise ValueError("alignment length does not match frame count")
        for t, ph in enumerate(al):
            buckets[ph].append(fs.frames[t])
        for prev, cur in zip(al[:-1], al[1:]):
            if prev == cur:
                stay[index[prev]] += 1
            else:
                leave[index[prev]] += 1

    allframes = np.concatenate([fs.frames for fs in features])
    floor = variance_floor(allframes)
    d = allframes.shape[1]
    if d_static is None:
        d_static = d // 2 if d % 2 == 0 else d
    if cepstral_ones is None:
        cepstral_ones = np.zeros(d_static)

    states, log = [], {}
    for ph in phones:
        if not buckets[ph]:
            raise ValueError(f"no frames labelled {ph!r}")
        x = np.asarray(buckets[ph])
        state, trace = fit_gmm(x, n_components, floor, n_iter=n_iter,
                               seed=seed + index[ph])
        states.append(state)
        log[ph] = trace

    self_loop = np.clip(stay / np.maximum(stay + leave, 1.0),
                        SELF_LOOP_EPS, 1.0 - SELF_LOOP_EPS)
    priors = np.full(len(phones), 1.0 / len(phones))
    return GmmHmmSet(list(phones), states, self_loop, priors, d_static,
                     cepstral_ones, training_log=log)


def adapt_speaker(base: GmmHmmSet, speaker_features: list[FeatureSequence],
                  speaker_alignments: list[list[str]],
                  tau: float = 8.0) -> GmmHmmSet:
    """MAP-style mean interpolation towards the speaker's sample means.

    Component responsibilities come from the base model; states without data
    keep the base parameters.  tau -> inf reproduces the base, tau = 0 the
    speaker means.
    """
    buckets = {ph: [] for ph in base.phones}
    for fs, al in zip(speaker_features, speaker_alignments):
        for t, ph in enumerate(al):
            buckets[ph].append(fs.frames[t])

    states = []
    for ph, st in zip(base.phones, base.states):
        if not buckets[ph]:
            states.append(GmmState(st.weights.copy(), st.means.copy(),
                                   st.variances.copy()))
            continue
        x = np.asarray(buckets[ph])
        rows = _gmm_loglik_rows(x, np.log(st.weights), st.means, st.variances)
        resp = np.exp(rows - _logsumexp(rows, axis=1)[:, None])
        nk = resp.sum(axis=0)
        xbar = np.where(nk[:, None] > 0, (resp.T @ x) / np.maximum(nk, 1e-12)[:, None],
                        st.means)
        if tau == math.inf:
            means = st.means.copy()
        else:
            means = (nk[:, None] * xbar + tau * st.means) / (nk[:, None] + tau)
            # components that saw no data stay at the base mean
            means = np.where(nk[:, None] > 0, means, st.means)
        states.append(GmmState(st.weights.copy(), means, st.variances.copy()))
    return GmmHmmSet(list(base.phones), states, base.self_loop.copy(),
                     base.priors.copy(), base.d_static,
                     base.cepstral_ones.copy(), base.feature_kind)


def log_likelihood_matrix(model: GmmHmmSet, frames: np.ndarray) -> np.ndarray:
    """log p(x|s) for every frame and state, (T, S)."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[1] != model.dim:
        raise ValueError("feature dimension does not match model")
    logw, means, variances = model.stacked_params()
    diff = frames[:, None, None, :] - means[None, :, :, :]
    ll = -0.5 * ((diff * diff / variances[None]).sum(-1)
                 + np.log(variances).sum(-1)[None]
                 + model.dim * LOG_2PI)
    return _logsumexp(ll + logw[None], axis=2)


def log_likelihoods(model: GmmHmmSet, frame: np.ndarray) -> np.ndarray:
    """Per-state log p(x|s) for a single frame."""
    return log_likelihood_matrix(model, frame[None, :])[0]


def state_posterior_matrix(model: GmmHmmSet, frames: np.ndarray) -> np.ndarray:
    """p(s|x) per frame under the model's state priors, rows sum to 1."""
    scores = log_likelihood_matrix(model, frames) + np.log(model.priors)[None, :]
    scores -= _logsumexp(scores, axis=1)[:, None]
    return np.exp(scores)


def state_posteriors(model: GmmHmmSet, frame: np.ndarray) -> np.ndarray:
    return state_posterior_matrix(model, frame[None, :])[0]


def gain_adapt(model: GmmHmmSet, gain: float) -> GmmHmmSet:
    """Shift static means for a source scaled by ``gain`` in the time domain.

    Power scales by gain^2, so floored log mel shifts by 2*ln(gain) and the
    cepstra by 2*ln(gain) times the DCT of the all-ones vector.  Deltas and
    covariances are untouched.
    """
    if gain <= 0:
        raise ValueError("gain must be positive")
    shift = 2.0 * math.log(gain) * model.cepstral_ones
    states = []
    for st in model.states:
        means = st.means.copy()
        means[:, : model.d_static] += shift[None, :]
        states.append(GmmState(st.weights.copy(), means, st.variances.copy()))
    return GmmHmmSet(list(model.phones), states, model.self_loop.copy(),
                     model.priors.copy(), model.d_static,
                     model.cepstral_ones.copy(), model.feature_kind)


def collapse_to_gaussians(model: GmmHmmSet):
    """Moment-match each state's GMM to a single diagonal Gaussian.

    Returns (means (S, D), variances (S, D)).
    """
    S, D = model.n_states, model.dim
    means = np.zeros((S, D))
    variances = np.zeros((S, D))
    for i, st in enumerate(model.states):
        w = st.weights[:, None]
        mu = (w * st.means).sum(axis=0)
        var = (w * (st.variances + st.means ** 2)).sum(axis=0) - mu ** 2
        means[i] = mu
        variances[i] = np.maximum(var, 1e-12)
    return means, variances


def estimate_gain(mixed: FeatureSequence, target_model: GmmHmmSet,
                  masker_model: GmmHmmSet, candidates) -> float:
    """Grid search: the gain whose adapted masker maximizes the summed
    per-frame max joint-state likelihood under first-order combination."""
    from .jointlik import MismatchContext, vts_pair_gaussians, diag_gaussian_loglik

    candidates = list(candidates)
    if not candidates:
        raise ValueError("candidate grid must not be empty")
    ctx = MismatchContext.for_model(target_model)
    mu_a, var_a = collapse_to_gaussians(target_model)
    best_gain, best_score = None, -np.inf
    for g in candidates:
        mu_b, var_b = collapse_to_gaussians(gain_adapt(masker_model, g))
        my, vy = vts_pair_gaussians(mu_a, var_a, mu_b, var_b, ctx,
                                    target_model.d_static)
        ll = diag_gaussian_loglik(mixed.frames, my.reshape(-1, my.shape[-1]),
                                  vy.reshape(-1, vy.shape[-1]))
        score = float(ll.max(axis=1).sum())
        if score > best_score:
            best_gain, best_score = g, score
    return best_gain


# --- model file --------------------------------------------------------------

MODEL_MAGIC = "FACGMM1"


def save_model(path, model: GmmHmmSet):
    """Structured text header plus float64 parameter blocks."""
    with open(path, "wb") as fh:
        comps = " ".join(str(s.n_components) for s in model.states)
        header = (f"{MODEL_MAGIC}\n"
                  f"phones {' '.join(model.phones)}\n"
                  f"dim {model.dim}\n"
                  f"d_static {model.d_static}\n"
                  f"feature_kind {model.feature_kind}\n"
                  f"components {comps}\n"
                  "end_header\n")
        fh.write(header.encode("utf-8"))
        for arr in [model.self_loop, model.priors, model.cepstral_ones]:
            fh.write(arr.astype("<f8").tobytes())
        for st in model.states:
            for arr in [st.weights, st.means, st.variances]:
                fh.write(np.asarray(arr).astype("<f8").tobytes())


def load_model(path) -> GmmHmmSet:
    with open(path, "rb") as fh:
        if fh.readline().decode().strip() != MODEL_MAGIC:
            raise ValueError("not a model file")
        meta = {}
        while True:
            line = fh.readline().decode().strip()
            if line == "end_header":
                break
            key, _, value = line.partition(" ")
            meta[key] = value
        phones = meta["phones"].split()
        dim = int(meta["dim"])
        d_static = int(meta["d_static"])
        comps = [int(c) for c in meta["components"].split()]

        def block(n):
            return np.frombuffer(fh.read(8 * n), dtype="<f8").copy()

        self_loop = block(len(phones))
        priors = block(len(phones))
        ones = block(d_static)
        states = []
        for k in comps:
            w = block(k)
            m = block(k * dim).reshape(k, dim)
            v = block(k * dim).reshape(k, dim)
            states.append(GmmState(w, m, v))
    return GmmHmmSet(phones, states, self_loop, priors, d_static, ones,
                     meta["feature_kind"])
