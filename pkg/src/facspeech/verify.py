"""Oracle-backed verification suite.

Each check pits a production implementation against an independent
reference (finite differences, CDF quadrature, Monte Carlo, exhaustive
path enumeration).  The implementations under test are injectable so that
deliberately broken variants ("mutation canaries") can prove the checks
have teeth.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import acoustic, decoder, dnn, features, jointlik


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}"


@dataclass
class VerifySummary:
    level: str
    results: list
    elapsed_s: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def report(self) -> str:
        lines = [r.line() for r in self.results]
        lines.append(f"{'OK' if self.passed else 'FAILED'}: "
                     f"{sum(r.passed for r in self.results)}/{len(self.results)} "
                     f"checks in {self.elapsed_s:.1f}s ({self.level})")
        return "\n".join(lines)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.abs(a) + np.abs(b) + 1e-12
    return float(np.max(np.abs(a - b) / denom))


def _grad_rel_err(analytic, numeric) -> float:
    """Gradient-scale relative error: sup-norm deviation over sup-norm size.

    Componentwise ratios blow up on near-zero entries where the finite
    difference is pure cancellation noise; relative-to-norm is the stable
    reading of "relative error" for gradient checks.
    """
    worst = 0.0
    for a, b in zip(analytic, numeric):
        scale = max(float(np.abs(a).max()), float(np.abs(b).max()), 1e-12)
        worst = max(worst, float(np.abs(a - b).max()) / scale)
    return worst


# --- tiny network fixtures -----------------------------------------------------

def _tiny_net(seed=0, n_in=8, hidden=(10, 12), joint=(3, 4)):
    rng = np.random.default_rng(seed)
    sizes = [n_in, *hidden, joint[0] * joint[1]]
    layers = [0.5 * rng.standard_normal((a + 1, b))
              for a, b in zip(sizes[:-1], sizes[1:])]
    return dnn.JointPosteriorNet(layers, joint)


def _numeric_grads(loss_fn, net, eps=1e-6):
    grads = []
    for w in net.layers:
        g = np.zeros_like(w)
        flat = w.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn()
            flat[i] = orig - eps
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def check_finetune_gradient(level: str = "fast", seed: int = 0,
                            grad_fn=dnn.finetune_output_grad,
                            tol: float = 1e-6) -> CheckResult:
    """Marginal-objective full-network gradient vs central differences."""
    rng = np.random.default_rng(seed)
    net = _tiny_net(seed)
    n = 3
    inputs = rng.standard_normal((n, net.n_inputs))
    dm_a = rng.dirichlet(np.ones(net.joint_shape[0]), size=n)
    dm_b = rng.dirichlet(np.ones(net.joint_shape[1]), size=n)
    _, analytic = dnn.finetune_loss_and_grads(net, inputs, dm_a, dm_b,
                                              grad_fn=grad_fn)
    numeric = _numeric_grads(
        lambda: dnn.finetune_dataset_loss(net, inputs, dm_a, dm_b), net)
    err = _grad_rel_err(analytic, numeric)
    return CheckResult("finetune-gradient-vs-fd", err < tol,
                       f"max rel err {err:.2e} (tol {tol:g})")


def check_init_gradient(level: str = "fast", seed: int = 1,
                        tol: float = 1e-6) -> CheckResult:
    """Joint-layer init objective gradient vs central differences."""
    rng = np.random.default_rng(seed)
    net = _tiny_net(seed)
    n = 3
    inputs = rng.standard_normal((n, net.n_inputs))
    labels = rng.dirichlet(np.ones(net.n_joint), size=n)
    _, analytic = dnn.init_loss_and_grads(net, inputs, labels)

    def loss():
        out = dnn.forward_batch(net, inputs)
        return 0.5 * float(((out - labels) ** 2).sum())

    numeric = _numeric_grads(loss, net)
    err = _grad_rel_err(analytic, numeric)
    return CheckResult("init-gradient-vs-fd", err < tol,
                       f"max rel err {err:.2e} (tol {tol:g})")


# --- mismatch Jacobians -----------------------------------------------------------

def _random_basis_ctx(rng, d):
    """Square invertible (non-orthogonal) cepstral basis.

    The complementarity identity must hold for any valid basis; a skewed
    basis also exposes transposition bugs that orthonormal bases mask.
    """
    while True:
        c = rng.standard_normal((d, d))
        if abs(np.linalg.det(c)) > 1e-3:
            break
    return jointlik.MismatchContext(c, np.linalg.inv(c))


def check_jacobian_identity(level: str = "fast", seed: int = 2,
                            jacobian_fn=jointlik.mismatch_jacobians,
                            n_pairs: int = 1000,
                            tol_identity: float = 1e-10,
                            tol_fd: float = 1e-6) -> CheckResult:
    """J_a + J_b = I over random pairs plus a finite-difference spot check."""
    rng = np.random.default_rng(seed)
    f = features.Frontend(n_cep=6, n_mel=10)
    ctx_std = jointlik.MismatchContext.from_frontend(f)
    worst = 0.0
    for k in range(n_pairs):
        ctx = ctx_std if k % 2 == 0 else _random_basis_ctx(rng, 6)
        xa = 3.0 * rng.standard_normal(ctx.dim)
        xb = 3.0 * rng.standard_normal(ctx.dim)
        j_a, j_b = jacobian_fn(xa, xb, ctx)
        worst = max(worst, float(np.abs(j_a + j_b - np.eye(ctx.dim)).max()))
    if worst >= tol_identity:
        return CheckResult("jacobian-complementarity", False,
                           f"max |J_a+J_b-I| = {worst:.2e}")

    fd_worst = 0.0
    eps = 1e-6
    for _ in range(5 if level == "fast" else 20):
        xa = rng.standard_normal(6)
        xb = rng.standard_normal(6)
        j_a, _ = jacobian_fn(xa, xb, ctx_std)
        j_fd = np.zeros_like(j_a)
        for i in range(6):
            step = np.zeros(6)
            step[i] = eps
            j_fd[:, i] = (jointlik.mismatch(xa + step, xb, ctx_std)
                          - jointlik.mismatch(xa - step, xb, ctx_std)) / (2 * eps)
        fd_worst = max(fd_worst, _rel_err(j_a, j_fd))
    ok = fd_worst < tol_fd
    return CheckResult("jacobian-complementarity", ok,
                       f"identity dev {worst:.1e}, fd rel err {fd_worst:.1e}")


def check_mismatch_linear_domain(level: str = "fast", seed: int = 3,
                                 tol: float = 1e-9) -> CheckResult:
    """Mismatch output vs explicit exponentiate-add-log in mel power."""
    rng = np.random.default_rng(seed)
    f = features.Frontend(n_cep=8, n_mel=8)  # square basis keeps it exact
    ctx = jointlik.MismatchContext.from_frontend(f)
    worst = 0.0
    for _ in range(50):
        xa = 2.0 * rng.standard_normal(8)
        xb = 2.0 * rng.standard_normal(8)
        y = jointlik.mismatch(xa, xb, ctx)
        pow_sum = np.exp(ctx.dct_pinv @ xa) + np.exp(ctx.dct_pinv @ xb)
        worst = max(worst, _rel_err(y, ctx.dct @ np.log(pow_sum)))
    return CheckResult("mismatch-linear-domain", worst < tol,
                       f"max rel err {worst:.1e}")


# --- max model ---------------------------------------------------------------------

def _max_density_quadrature(y, mu_a, var_a, mu_b, var_b, h=1e-3):
    """CDF-based quadrature of the elementwise-max integral.

    Density of max(A, B) is the derivative of F_A * F_B; taken with a
    five-point stencil so the truncation error sits far below the check
    tolerance.
    """
    def cdf_prod(v):
        return (norm.cdf(v, mu_a, math.sqrt(var_a))
                * norm.cdf(v, mu_b, math.sqrt(var_b)))

    return (cdf_prod(y - 2 * h) - 8 * cdf_prod(y - h)
            + 8 * cdf_prod(y + h) - cdf_prod(y + 2 * h)) / (12 * h)


def check_max_model(level: str = "fast", seed: int = 4,
                    maxlik_fn=jointlik.max_model_loglik,
                    n_sets: int = 100, tol: float = 1e-8) -> CheckResult:
    """Closed-form max-model density vs quadrature, plus exchange symmetry."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_sets):
        mu_a, mu_b = rng.uniform(-2, 2, size=2)
        var_a, var_b = rng.uniform(0.2, 2.0, size=2)
        y = rng.uniform(-3, 3)
        g_a = jointlik.DiagGaussian(np.array([mu_a]), np.array([var_a]))
        g_b = jointlik.DiagGaussian(np.array([mu_b]), np.array([var_b]))
        loglik = maxlik_fn(np.array([y]), g_a, g_b)
        ref = _max_density_quadrature(y, mu_a, var_a, mu_b, var_b)
        worst = max(worst, abs(math.exp(loglik) - ref))
        if maxlik_fn(np.array([y]), g_b, g_a) != loglik:
            return CheckResult("max-model-quadrature", False,
                               "exchange symmetry violated")
    return CheckResult("max-model-quadrature", worst < tol,
                       f"max abs density err {worst:.1e} (tol {tol:g})")


# --- PMC vs first-order combination ---------------------------------------------------

def check_pmc_vts(level: str = "fast", seed: int = 5,
                  n_pairs: int | None = None,
                  n_samples: int | None = None) -> CheckResult:
    """Small-variance agreement: Monte Carlo mean within 3 standard errors
    of the linearized mean.

    Compared per pair as vectors (||mean diff|| against 3 ||SE||): a
    per-dimension max over all pairs would be exceeded by pure sampling
    noise alone at this many draws.
    """
    if n_pairs is None:
        n_pairs = 20 if level == "full" else 5
    if n_samples is None:
        n_samples = 10 ** 6 if level == "full" else 2 * 10 ** 4
    rng = np.random.default_rng(seed)
    d = 8
    c = features.dct_matrix(d, d)
    ctx = jointlik.MismatchContext(c, c.T.copy())
    worst = 0.0
    for k in range(n_pairs):
        g_a = jointlik.DiagGaussian(rng.uniform(-1, 1, d),
                                    rng.uniform(1e-5, 3e-5, d))
        g_b = jointlik.DiagGaussian(rng.uniform(-1, 1, d),
                                    rng.uniform(1e-5, 3e-5, d))
        pmc = jointlik.pmc_combine(g_a, g_b, n_samples, ctx, seed=seed + k)
        vts = jointlik.vts_combine(g_a, g_b, ctx)
        stderr = np.sqrt(pmc.var / n_samples)
        dev = float(np.linalg.norm(pmc.mean - vts.mean)
                    / (3.0 * np.linalg.norm(stderr)))
        worst = max(worst, dev)
    return CheckResult("pmc-vts-consistency", worst < 1.0,
                       f"worst ||mean diff|| / 3||SE|| = {worst:.2f} "
                       f"({n_pairs} pairs, {n_samples} samples)")


# --- decoder vs exhaustive enumeration --------------------------------------------------

def enumerate_chain_paths(net: decoder.Wordnet, model: acoustic.GmmHmmSet,
                          T: int):
    """Every length-T state path through the wordnet, with transition cost.

    Deliberately independent of the decoder internals: walks (node, phone)
    pairs recursively frame by frame.  Returns (state sequence, node
    sequence, total transition log-prob) triples.
    """
    out = []
    end_nodes = set(net.end_nodes)

    def rec(t, node_id, phi, states, nodes, logp):
        node = net.nodes[node_id]
        state = model.state_index(node.phones[phi])
        states.append(state)
        if not nodes or nodes[-1] != node_id:
            nodes.append(node_id)
            entered_node = True
        else:
            entered_node = False
        if t == T - 1:
            if node_id in end_nodes and phi == len(node.phones) - 1:
                out.append((list(states), list(nodes), logp))
        else:
            sl = float(model.self_loop[state])
            rec(t + 1, node_id, phi, states, nodes, logp + math.log(sl))
            adv = math.log(1.0 - sl)
            if phi + 1 < len(node.phones):
                rec(t + 1, node_id, phi + 1, states, nodes, logp + adv)
            elif node.slot + 1 < len(net.layers):
                for nxt in net.layers[node.slot + 1]:
                    rec(t + 1, nxt, 0, states, nodes, logp + adv)
        states.pop()
        if entered_node:
            nodes.pop()

    for start in net.start_nodes:
        rec(0, start, 0, [], [], 0.0)
    return out


def brute_force_joint_decode(tensor: jointlik.JointStateTensor,
                             net_a: decoder.Wordnet, net_b: decoder.Wordnet,
                             models) -> tuple:
    """Exhaustive maximization over all joint paths (oracle for the kernel)."""
    model_a, model_b = models
    T = tensor.shape[0]
    logv = np.maximum(tensor.log_values(), decoder.LOG_TENSOR_FLOOR)
    paths_a = enumerate_chain_paths(net_a, model_a, T)
    paths_b = enumerate_chain_paths(net_b, model_b, T)
    if not paths_a or not paths_b:
        return None
    best = (-np.inf, None, None)
    ts = np.arange(T)
    for states_a, nodes_a, lp_a in paths_a:
        obs_rows = logv[ts, states_a, :]
        for states_b, nodes_b, lp_b in paths_b:
            score = lp_a + lp_b + float(obs_rows[ts, states_b].sum())
            if score > best[0]:
                best = (score, (states_a, nodes_a), (states_b, nodes_b))
    score, (sa, na), (sb, nb) = best
    words_a = [net_a.nodes[n].word for n in na]
    words_b = [net_b.nodes[n].word for n in nb]
    return score, words_a, words_b


def random_toy_instance(rng: np.random.Generator, max_joint_paths: int = 10 ** 4):
    """Small random grammar/model/tensor instance whose joint paths are
    enumerable."""
    n_phones = 4
    phones = [f"q{i}" for i in range(n_phones)]
    while True:
        n_slots = int(rng.integers(2, 4))
        slot_words = []
        lexicon = {}
        widx = 0
        for s in range(n_slots):
            n_alt = int(rng.integers(1, 3))
            words = []
            for _ in range(n_alt):
                word = f"w{widx}"
                widx += 1
                n_ph = int(rng.integers(1, 3))
                lexicon[word] = [phones[int(rng.integers(n_phones))]
                                 for _ in range(n_ph)]
                words.append(word)
            slot_words.append(words)
        grammar = decoder.Grammar(
            {f"s{i}": [[w] for w in ws] for i, ws in enumerate(slot_words)},
            [f"$s{i}" for i in range(n_slots)])
        net = decoder.build_wordnet(grammar, lexicon)
        min_len = sum(min(len(lexicon[w]) for w in ws) for ws in slot_words)
        T = min_len + int(rng.integers(1, 4))

        states = [acoustic.GmmState(np.ones(1), np.zeros((1, 2)),
                                    np.ones((1, 2))) for _ in phones]
        model = acoustic.GmmHmmSet(
            phones, states, rng.uniform(0.3, 0.8, n_phones),
            np.full(n_phones, 1.0 / n_phones), 2, np.zeros(2))
        paths = enumerate_chain_paths(net, model, T)
        if 0 < len(paths) ** 2 <= max_joint_paths:
            break
    vals = rng.random((T, n_phones, n_phones)) + 1e-3
    vals /= vals.sum(axis=(1, 2), keepdims=True)
    tensor = jointlik.JointStateTensor(vals, "posterior")
    return tensor, net, model


def check_decoder_bruteforce(level: str = "fast", seed: int = 6,
                             decode_fn=decoder.joint_decode,
                             n_instances: int | None = None) -> CheckResult:
    """Beam-off joint decoding vs exhaustive joint-path enumeration."""
    if n_instances is None:
        n_instances = 50 if level == "full" else 10
    rng = np.random.default_rng(seed)
    for k in range(n_instances):
        tensor, net, model = random_toy_instance(rng)
        ref = brute_force_joint_decode(tensor, net, net, (model, model))
        res = decode_fn(tensor, net, net, (model, model))
        if not math.isclose(res.log_score, ref[0], rel_tol=0, abs_tol=1e-9):
            return CheckResult("decoder-bruteforce", False,
                               f"instance {k}: score {res.log_score!r} "
                               f"vs oracle {ref[0]!r}")
        if res.words_a != ref[1] or res.words_b != ref[2]:
            return CheckResult("decoder-bruteforce", False,
                               f"instance {k}: word mismatch")
    return CheckResult("decoder-bruteforce", True,
                       f"{n_instances} random instances, exact agreement")


# --- suite -------------------------------------------------------------------------

ALL_CHECKS = (
    check_finetune_gradient,
    check_init_gradient,
    check_jacobian_identity,
    check_mismatch_linear_domain,
    check_max_model,
    check_pmc_vts,
    check_decoder_bruteforce,
)


def verify_suite(level: str = "fast") -> VerifySummary:
    """Run every oracle-backed check at the given level (fast | full)."""
    if level not in ("fast", "full"):
        raise ValueError(f"unknown verify level {level!r}")
    start = time.perf_counter()
    results = [check(level=level) for check in ALL_CHECKS]
    return VerifySummary(level, results, time.perf_counter() - start)
