"""Joint-state likelihood estimators for two additively mixed sources.

Four routes to p(y | s_a, s_b) over cepstral features:

* max model: elementwise-max interaction, closed form density from the two
  Gaussians' pdfs and cdfs;
* data-driven parallel model combination: Monte Carlo through the mismatch
  function, then a Gaussian fit;
* first-order series combination: linearize the mismatch at the source
  means and propagate means/covariances;
* weighted stereo samples: kernel-smoothed empirical distribution built
  from aligned source/mixture feature triples.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from .acoustic import GmmHmmSet, collapse_to_gaussians, state_posterior_matrix
from .features import FeatureSequence, Frontend

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MismatchContext:
    """Cepstral analysis pair (C, C^-1) plus the phase factor alpha."""

    dct: np.ndarray
    dct_pinv: np.ndarray
    log_floor: float = 1e-10
    alpha: float = 0.0

    def __post_init__(self):
        if not -1.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [-1, 1]")

    @classmethod
    def from_frontend(cls, f: Frontend, alpha: float = 0.0) -> "MismatchContext":
        return cls(f.dct, f.dct_pinv, f.log_floor, alpha)

    @classmethod
    def for_model(cls, model: GmmHmmSet, alpha: float = 0.0) -> "MismatchContext":
        """Square orthonormal cepstral basis sized to the model's static part.

        Used when only model-domain combination is needed and the original
        front end is not at hand; with d = M the basis is exactly invertible.
        """
        from .features import dct_matrix
        d = model.d_static
        c = dct_matrix(d, d)
        return cls(c, c.T.copy(), alpha=alpha)

    @property
    def dim(self) -> int:
        return self.dct.shape[0]


@dataclass
class DiagGaussian:
    """Diagonal Gaussian; mean and per-dimension variance."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape:
            raise ValueError("mean/var shape mismatch")
        if np.any(self.var < 0):
            raise ValueError("variances must be nonnegative")


JointGaussian = DiagGaussian


@dataclass
class WeightedSampleSet:
    """Stereo mixture samples with per-source state weights."""

    samples: np.ndarray    # (N, D) mixed features y_k
    weights_a: np.ndarray  # (N, S_a)
    weights_b: np.ndarray  # (N, S_b)

    def __post_init__(self):
        if not (len(self.samples) == len(self.weights_a) == len(self.weights_b)):
            raise ValueError("sample/weight lengths must agree")
        if np.any(self.weights_a < 0) or np.any(self.weights_b < 0):
            raise ValueError("weights must be nonnegative")


@dataclass
class JointStateTensor:
    """T x |s_a| x |s_b| array of joint-state scores for the decoder."""

    values: np.ndarray
    scale: str  # "log_likelihood" | "posterior"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError("values must be T x Sa x Sb")
        if self.scale not in ("log_likelihood", "posterior"):
            raise ValueError(f"unknown scale {self.scale!r}")
        if self.scale == "posterior" and np.any(self.values < 0):
            raise ValueError("posterior tensor must be nonnegative")

    @property
    def shape(self):
        return self.values.shape

    def log_values(self) -> np.ndarray:
        """Log-domain view for decoding; posterior entries are floored."""
        if self.scale == "log_likelihood":
            return np.asarray(self.values, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return np.log(np.asarray(self.values, dtype=np.float64))


def normalize_tensor(values: np.ndarray, scale: str) -> JointStateTensor:
    """Per-frame normalization of log-likelihood slices into posteriors."""
    if scale == "log_likelihood":
        flat = values.reshape(values.shape[0], -1)
        flat = flat - flat.max(axis=1, keepdims=True)
        p = np.exp(flat)
        p /= p.sum(axis=1, keepdims=True)
        return JointStateTensor(p.reshape(values.shape), "posterior")
    return JointStateTensor(values, "posterior")


# --- mismatch function -------------------------------------------------------

def _to_melspace(x, ctx: MismatchContext):
    return np.asarray(x) @ ctx.dct_pinv.T


def mismatch(x_a: np.ndarray, x_b: np.ndarray, ctx: MismatchContext) -> np.ndarray:
    """Cepstra of the power sum of two sources given their cepstra.

    With alpha = 0 this is C log(exp(C^-1 x_a) + exp(C^-1 x_b)); nonzero
    alpha adds the 2*alpha*sqrt(power product) cross term inside the log.
    Computed in shifted log space; a nonpositive inner sum (possible only
    for negative alpha) is clamped at the mel-power floor and flagged.
    """
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    la = _to_melspace(x_a, ctx)
    lb = _to_melspace(x_b, ctx)
    m = np.maximum(la, lb)
    inner = np.exp(la - m) + np.exp(lb - m)
    if ctx.alpha != 0.0:
        inner = inner + 2.0 * ctx.alpha * np.exp(0.5 * (la + lb) - m)
    bad = inner <= 0.0
    if np.any(bad):
        warnings.warn("mismatch inner sum nonpositive; clamped at mel-power floor",
                      stacklevel=2)
        inner = np.where(bad, 1.0, inner)
    logpow = m + np.log(inner)
    logpow = np.where(bad, math.log(ctx.log_floor), logpow)
    return logpow @ ctx.dct.T


def mismatch_jacobians(x0_a: np.ndarray, x0_b: np.ndarray,
                       ctx: MismatchContext):
    """Jacobians of the zero-phase mismatch at the expansion pair.

    J_a = C diag(sigma) C^-1 with sigma the source-a share of mel power;
    J_a + J_b = I by construction.
    """
    if ctx.alpha != 0.0:
        raise NotImplementedError("Jacobians implemented for alpha = 0 only")
    la = _to_melspace(np.asarray(x0_a, dtype=np.float64), ctx)
    lb = _to_melspace(np.asarray(x0_b, dtype=np.float64), ctx)
    sigma = _sigmoid(la - lb)
    j_a = ctx.dct @ (sigma[:, None] * ctx.dct_pinv)
    j_b = ctx.dct @ ((1.0 - sigma)[:, None] * ctx.dct_pinv)
    return j_a, j_b


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --- max model ---------------------------------------------------------------

def max_model_loglik(y: np.ndarray, g_a: DiagGaussian, g_b: DiagGaussian) -> float:
    """Log density of the elementwise max of two diagonal Gaussians at y.

    Per dimension: p(y) = p_a(y) Phi_b(y) + p_b(y) Phi_a(y), accumulated in
    the log domain.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.any(g_a.var <= 0) or np.any(g_b.var <= 0):
        raise ValueError("max model requires positive variances")
    za = (y - g_a.mean) / np.sqrt(g_a.var)
    zb = (y - g_b.mean) / np.sqrt(g_b.var)
    logp_a = -0.5 * (za ** 2 + LOG_2PI) - 0.5 * np.log(g_a.var)
    logp_b = -0.5 * (zb ** 2 + LOG_2PI) - 0.5 * np.log(g_b.var)
    term1 = logp_a + log_ndtr(zb)
    term2 = logp_b + log_ndtr(za)
    return float(np.logaddexp(term1, term2).sum())


# --- data-driven parallel model combination ----------------------------------

def pmc_combine(g_a: DiagGaussian, g_b: DiagGaussian, n_samples: int,
                ctx: MismatchContext, seed: int = 0) -> DiagGaussian:
    """Monte Carlo through the mismatch: sample both sources, map, fit."""
    if n_samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    xa = g_a.mean + np.sqrt(g_a.var) * rng.standard_normal((n_samples, len(g_a.mean)))
    xb = g_b.mean + np.sqrt(g_b.var) * rng.standard_normal((n_samples, len(g_b.mean)))
    ys = mismatch(xa, xb, ctx)
    return DiagGaussian(ys.mean(axis=0), ys.var(axis=0, ddof=1))


# --- first-order series combination -------------------------------------------

def vts_combine(g_a: DiagGaussian, g_b: DiagGaussian, ctx: MismatchContext,
                d_static: int | None = None) -> DiagGaussian:
    """Combine two diagonal source Gaussians through the linearized mismatch.

    Statics: mean through the exact mismatch at the expansion point, variance
    via J_a S_a J_a' + J_b S_b J_b' (diagonal extracted).  Delta blocks reuse
    the static-point Jacobians.
    """
    d = len(g_a.mean)
    if d_static is None:
        d_static = d
    mu_sa, mu_sb = g_a.mean[:d_static], g_b.mean[:d_static]
    j_a, j_b = mismatch_jacobians(mu_sa, mu_sb, ctx)
    mean = np.empty(d)
    var = np.empty(d)
    mean[:d_static] = mismatch(mu_sa, mu_sb, ctx)
    var[:d_static] = (j_a ** 2) @ g_a.var[:d_static] + (j_b ** 2) @ g_b.var[:d_static]
    if d_static < d:
        mean[d_static:] = j_a @ g_a.mean[d_static:] + j_b @ g_b.mean[d_static:]
        var[d_static:] = ((j_a ** 2) @ g_a.var[d_static:]
                          + (j_b ** 2) @ g_b.var[d_static:])
    return DiagGaussian(mean, var)


def vts_pair_gaussians(means_a: np.ndarray, vars_a: np.ndarray,
                       means_b: np.ndarray, vars_b: np.ndarray,
                       ctx: MismatchContext, d_static: int):
    """All-pairs batch of :func:`vts_combine`.

    means_a is (P_a, D) etc.; returns means/vars of shape (P_a, P_b, D).
    Kept numerically identical to the scalar path so the two can be cross
    checked index by index.
    """
    pa, d = means_a.shape
    pb = means_b.shape[0]
    la = means_a[:, :d_static] @ ctx.dct_pinv.T            # (Pa, M)
    lb = means_b[:, :d_static] @ ctx.dct_pinv.T            # (Pb, M)
    diffs = la[:, None, :] - lb[None, :, :]                # (Pa, Pb, M)
    sigma = _sigmoid(diffs)
    m = np.maximum(la[:, None, :], lb[None, :, :])
    logpow = m + np.log(np.exp(la[:, None, :] - m) + np.exp(lb[None, :, :] - m))

    mean = np.empty((pa, pb, d))
    var = np.empty((pa, pb, d))
    mean[..., :d_static] = logpow @ ctx.dct.T

    # (J_a)_{ij} = sum_m C[i,m] sigma[m] Cpinv[m,j]; diag(J S J')_i
    #   = sum_j (J_a[i,j])^2 S_j for diagonal S.
    ja = np.einsum("im,abm,mj->abij", ctx.dct, sigma, ctx.dct_pinv, optimize=True)
    jb = np.einsum("im,abm,mj->abij", ctx.dct, 1.0 - sigma, ctx.dct_pinv,
                   optimize=True)
    var[..., :d_static] = (np.einsum("abij,aj->abi", ja ** 2, vars_a[:, :d_static],
                                     optimize=True)
                           + np.einsum("abij,bj->abi", jb ** 2, vars_b[:, :d_static],
                                       optimize=True))
    if d_static < d:
        mean[..., d_static:] = (np.einsum("abij,aj->abi", ja, means_a[:, d_static:],
                                          optimize=True)
                                + np.einsum("abij,bj->abi", jb, means_b[:, d_static:],
                                            optimize=True))
        var[..., d_static:] = (np.einsum("abij,aj->abi", ja ** 2, vars_a[:, d_static:],
                                         optimize=True)
                               + np.einsum("abij,bj->abi", jb ** 2,
                                           vars_b[:, d_static:], optimize=True))
    return mean, var


def diag_gaussian_loglik(frames: np.ndarray, means: np.ndarray,
                         variances: np.ndarray) -> np.ndarray:
    """log N(frame; mean_p, var_p) for every frame/Gaussian pair, (T, P)."""
    frames = np.atleast_2d(frames)
    d = frames.shape[1]
    inv = 1.0 / variances
    quad = (frames ** 2) @ inv.T - 2.0 * frames @ (means * inv).T \
        + (means ** 2 * inv).sum(axis=1)[None, :]
    return -0.5 * (quad + np.log(variances).sum(axis=1)[None, :] + d * LOG_2PI)


# --- weighted stereo samples ---------------------------------------------------

def wss_build(stereo_a: np.ndarray, stereo_b: np.ndarray, mixed: np.ndarray,
              model_a: GmmHmmSet, model_b: GmmHmmSet,
              literal_printed_weights: bool = False) -> WeightedSampleSet:
    """Per-sample source-state weights from frame-aligned stereo features.

    Weights are the state posteriors of each source frame under its own
    model.  ``literal_printed_weights`` drops the prior from the numerator
    (the non-normalizing variant) for comparison runs.
    """
    stereo_a, stereo_b, mixed = (np.atleast_2d(x) for x in (stereo_a, stereo_b, mixed))
    if not (len(stereo_a) == len(stereo_b) == len(mixed)):
        raise ValueError("stereo streams must be frame-aligned")
    wa = state_posterior_matrix(model_a, stereo_a)
    wb = state_posterior_matrix(model_b, stereo_b)
    if literal_printed_weights:
        wa = wa / model_a.priors[None, :]
        wb = wb / model_b.priors[None, :]
    return WeightedSampleSet(mixed.copy(), wa, wb)


def silverman_bandwidth(samples: np.ndarray) -> float:
    n, d = samples.shape
    sigma = float(samples.std(axis=0).mean()) or 1.0
    return sigma * (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * n ** (-1.0 / (d + 4.0))


def wss_loglik(ws: WeightedSampleSet, y: np.ndarray, s_a: int, s_b: int,
               bandwidth: float) -> float:
    """Log of the weight-normalized Gaussian-kernel density estimate at y."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    w = ws.weights_a[:, s_a] * ws.weights_b[:, s_b]
    total = w.sum()
    if total <= 0:
        return -np.inf
    d = ws.samples.shape[1]
    sq = ((ws.samples - np.asarray(y)[None, :]) ** 2).sum(axis=1)
    logk = -0.5 * sq / bandwidth ** 2 - 0.5 * d * (LOG_2PI + 2.0 * math.log(bandwidth))
    m = logk.max()
    val = float(np.log(np.dot(w, np.exp(logk - m))) + m - math.log(total))
    return val


def wss_joint_tensor(mixed: FeatureSequence, ws: WeightedSampleSet,
                     bandwidth: float | None = None,
                     scale: str = "log_likelihood") -> JointStateTensor:
    """Vectorized tensor fill of :func:`wss_loglik` over frames and states."""
    if bandwidth is None:
        bandwidth = silverman_bandwidth(ws.samples)
    y = mixed.frames
    d = y.shape[1]
    sq = (y ** 2).sum(1)[:, None] - 2.0 * y @ ws.samples.T \
        + (ws.samples ** 2).sum(1)[None, :]
    logk = -0.5 * sq / bandwidth ** 2 - 0.5 * d * (LOG_2PI + 2.0 * math.log(bandwidth))
    m = logk.max(axis=1, keepdims=True)
    kmat = np.exp(logk - m)                                    # (T, N)
    num = np.einsum("tk,ki,kj->tij", kmat, ws.weights_a, ws.weights_b,
                    optimize=True)
    den = np.einsum("ki,kj->ij", ws.weights_a, ws.weights_b, optimize=True)
    with np.errstate(divide="ignore"):
        values = np.log(num) - np.log(den)[None] + m[:, :, None]
    if scale == "posterior":
        return normalize_tensor(values, "log_likelihood")
    return JointStateTensor(values, "log_likelihood")


# --- joint-state tensors from model pairs --------------------------------------

def _state_component_table(model: GmmHmmSet):
    """Flatten (state, component) into rows: log weight, mean, var."""
    logw, means, variances = [], [], []
    owner = []
    for i, st in enumerate(model.states):
        for k in range(st.n_components):
            logw.append(math.log(st.weights[k]))
            means.append(st.means[k])
            variances.append(st.variances[k])
            owner.append(i)
    return (np.asarray(logw), np.asarray(means), np.asarray(variances),
            np.asarray(owner, dtype=np.intp))


def vts_joint_tensor(mixed: FeatureSequence, model_a: GmmHmmSet,
                     model_b: GmmHmmSet, ctx: MismatchContext,
                     mode: str = "pairwise",
                     scale: str = "log_likelihood") -> JointStateTensor:
    """Joint-state scores for every frame under linearized combination.

    ``pairwise`` combines every GMM component pair and log-sum-exps with
    product weights; ``collapse`` moment-matches each state first.
    """
    sa, sb = model_a.n_states, model_b.n_states
    d_static = model_a.d_static
    if mode == "pairwise":
        logw_a, mu_a, var_a, own_a = _state_component_table(model_a)
        logw_b, mu_b, var_b, own_b = _state_component_table(model_b)
    elif mode == "collapse":
        mu_a, var_a = collapse_to_gaussians(model_a)
        mu_b, var_b = collapse_to_gaussians(model_b)
        logw_a = np.zeros(sa)
        logw_b = np.zeros(sb)
        own_a = np.arange(sa)
        own_b = np.arange(sb)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    my, vy = vts_pair_gaussians(mu_a, var_a, mu_b, var_b, ctx, d_static)
    pa, pb, d = my.shape
    ll = diag_gaussian_loglik(mixed.frames, my.reshape(-1, d), vy.reshape(-1, d))
    ll = ll.reshape(-1, pa, pb) + (logw_a[:, None] + logw_b[None, :])[None]

    T = mixed.n_frames
    values = np.full((T, sa, sb), -np.inf)
    # log-sum-exp over component pairs grouped by owning state pair
    for i in range(sa):
        rows = own_a == i
        for j in range(sb):
            cols = own_b == j
            block = ll[:, rows][:, :, cols].reshape(T, -1)
            mx = block.max(axis=1)
            values[:, i, j] = mx + np.log(np.exp(block - mx[:, None]).sum(axis=1))
    if scale == "posterior":
        return normalize_tensor(values, "log_likelihood")
    return JointStateTensor(values, "log_likelihood")


def max_joint_tensor(mixed: FeatureSequence, model_a: GmmHmmSet,
                     model_b: GmmHmmSet,
                     scale: str = "log_likelihood") -> JointStateTensor:
    """Max-model tensor over collapsed single-Gaussian states."""
    mu_a, var_a = collapse_to_gaussians(model_a)
    mu_b, var_b = collapse_to_gaussians(model_b)
    y = mixed.frames
    za = (y[:, None, :] - mu_a[None]) / np.sqrt(var_a)[None]
    zb = (y[:, None, :] - mu_b[None]) / np.sqrt(var_b)[None]
    logp_a = -0.5 * (za ** 2 + LOG_2PI) - 0.5 * np.log(var_a)[None]
    logp_b = -0.5 * (zb ** 2 + LOG_2PI) - 0.5 * np.log(var_b)[None]
    lcdf_a = log_ndtr(za)
    lcdf_b = log_ndtr(zb)
    # accumulate per-dimension log densities over all (i, j) pairs
    vals = np.logaddexp(
        logp_a[:, :, None, :] + lcdf_b[:, None, :, :],
        logp_b[:, None, :, :] + lcdf_a[:, :, None, :],
    ).sum(axis=3)
    if scale == "posterior":
        return normalize_tensor(vals, "log_likelihood")
    return JointStateTensor(vals, "log_likelihood")


def pmc_joint_tensor(mixed: FeatureSequence, model_a: GmmHmmSet,
                     model_b: GmmHmmSet, ctx: MismatchContext,
                     n_samples: int = 256, seed: int = 0,
                     scale: str = "log_likelihood") -> JointStateTensor:
    """Monte-Carlo-combined tensor over collapsed states.

    Statics go through the sampled mismatch; delta blocks use the sampled
    Jacobian mixing weights so dynamic features stay informative.
    """
    rng = np.random.default_rng(seed)
    mu_a, var_a = collapse_to_gaussians(model_a)
    mu_b, var_b = collapse_to_gaussians(model_b)
    sa, sb = model_a.n_states, model_b.n_states
    ds = model_a.d_static
    d = mu_a.shape[1]
    my = np.empty((sa, sb, d))
    vy = np.empty((sa, sb, d))
    for i in range(sa):
        for j in range(sb):
            za = rng.standard_normal((n_samples, d))
            zb = rng.standard_normal((n_samples, d))
            xa = mu_a[i] + np.sqrt(var_a[i]) * za
            xb = mu_b[j] + np.sqrt(var_b[j]) * zb
            la = xa[:, :ds] @ ctx.dct_pinv.T
            lb = xb[:, :ds] @ ctx.dct_pinv.T
            m = np.maximum(la, lb)
            logpow = m + np.log(np.exp(la - m) + np.exp(lb - m))
            ys = np.empty((n_samples, d))
            ys[:, :ds] = logpow @ ctx.dct.T
            if ds < d:
                sigma = _sigmoid(la - lb)
                mixed_delta = (sigma * (xa[:, ds:] @ ctx.dct_pinv.T)
                               + (1.0 - sigma) * (xb[:, ds:] @ ctx.dct_pinv.T))
                ys[:, ds:] = mixed_delta @ ctx.dct.T
            my[i, j] = ys.mean(axis=0)
            vy[i, j] = np.maximum(ys.var(axis=0, ddof=1), 1e-12)
    ll = diag_gaussian_loglik(mixed.frames, my.reshape(-1, d), vy.reshape(-1, d))
    values = ll.reshape(-1, sa, sb)
    if scale == "posterior":
        return normalize_tensor(values, "log_likelihood")
    return JointStateTensor(values, "log_likelihood")


# --- tensor file ----------------------------------------------------------------

TENSOR_MAGIC = b"FACTEN1\n"


def save_tensor(path, tensor: JointStateTensor):
    """Header (T, S_a, S_b, scale) + frame-major float32 payload."""
    T, sa, sb = tensor.shape
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(f"{T} {sa} {sb} {tensor.scale}\n".encode("utf-8"))
        fh.write(np.asarray(tensor.values, dtype="<f4").tobytes(order="C"))


def load_tensor(path) -> JointStateTensor:
    with open(path, "rb") as fh:
        if fh.read(len(TENSOR_MAGIC)) != TENSOR_MAGIC:
            raise ValueError("not a joint-state tensor file")
        T, sa, sb, scale = fh.readline().decode("utf-8").split()
        T, sa, sb = int(T), int(sa), int(sb)
        payload = fh.read(T * sa * sb * 4)
        values = np.frombuffer(payload, dtype="<f4").reshape(T, sa, sb).copy()
    return JointStateTensor(values, scale)
