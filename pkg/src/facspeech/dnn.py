"""Joint-state posterior network: generative pre-training, joint-layer
initialization against combined-model labels, and marginal fine-tuning.

The network is a stack of sigmoid layers whose top layer holds one unit per
joint state (s_a, s_b).  A fixed marginalization readout (row and column
sums) turns the joint matrix into the two chains' marginal posteriors; the
fine-tuning objective penalizes the distance between those marginals and
the stereo-feature state posteriors, and its output gradient is the sum of
a row-constant and a column-constant matrix.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, TrainingPhaseError
from .features import FeatureSequence, InputSpec, Standardization, compose_input_matrix
from .jointlik import JointStateTensor, MismatchContext, vts_joint_tensor


def sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --- restricted Boltzmann machines -------------------------------------------

@dataclass
class RbmLayer:
    """RBM parameters; gaussian visible layers expect standardized data."""

    weights: np.ndarray       # (V, H)
    visible_bias: np.ndarray  # (V,)
    hidden_bias: np.ndarray   # (H,)
    visible_kind: str         # "gaussian" | "bernoulli"

    @property
    def n_visible(self) -> int:
        return self.weights.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[1]

    def hidden_probs(self, v: np.ndarray) -> np.ndarray:
        return sigmoid(v @ self.weights + self.hidden_bias)

    def visible_from_hidden(self, h: np.ndarray) -> np.ndarray:
        pre = h @ self.weights.T + self.visible_bias
        if self.visible_kind == "gaussian":
            return pre
        return sigmoid(pre)


@dataclass
class RbmHyper:
    rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 5
    batch: int = 64
    n_fantasy: int = 64
    cd_steps: int = 1
    seed: int = 0


def rbm_train_pcd(data: np.ndarray, visible_kind: str, n_hidden: int,
                  hyper: RbmHyper) -> RbmLayer:
    """Persistent-contrastive-divergence training of a single RBM.

    The positive phase uses hidden probabilities from the data; the negative
    phase keeps persistent fantasy chains updated by ``cd_steps`` Gibbs
    sweeps per mini-batch.  Deterministic given the hyper seed.
    """
    data = np.asarray(data, dtype=np.float64)
    if visible_kind not in ("gaussian", "bernoulli"):
        raise ValueError(f"unknown visible kind {visible_kind!r}")
    rng = np.random.default_rng(hyper.seed)
    n, v_dim = data.shape
    w = 0.01 * rng.standard_normal((v_dim, n_hidden))
    a = np.zeros(v_dim)
    b = np.zeros(n_hidden)
    layer = RbmLayer(w, a, b, visible_kind)

    chains = data[rng.integers(n, size=hyper.n_fantasy)].copy()
    dw = np.zeros_like(w)
    da = np.zeros_like(a)
    db = np.zeros_like(b)
    recon_trace = []

    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, hyper.batch):
            vb = data[order[lo: lo + hyper.batch]]
            h_pos = layer.hidden_probs(vb)
            pos_w = vb.T @ h_pos / len(vb)
            pos_a = vb.mean(axis=0)
            pos_b = h_pos.mean(axis=0)

            for _ in range(hyper.cd_steps):
                h_prob = layer.hidden_probs(chains)
                h_samp = (rng.random(h_prob.shape) < h_prob).astype(np.float64)
                v_mean = layer.visible_from_hidden(h_samp)
                if visible_kind == "gaussian":
                    chains = v_mean + rng.standard_normal(v_mean.shape)
                else:
                    chains = (rng.random(v_mean.shape) < v_mean).astype(np.float64)
            h_neg = layer.hidden_probs(chains)
            neg_w = chains.T @ h_neg / len(chains)
            neg_a = chains.mean(axis=0)
            neg_b = h_neg.mean(axis=0)

            dw = hyper.momentum * dw + hyper.rate * (pos_w - neg_w)
            da = hyper.momentum * da + hyper.rate * (pos_a - neg_a)
            db = hyper.momentum * db + hyper.rate * (pos_b - neg_b)
            layer.weights += dw
            layer.visible_bias += da
            layer.hidden_bias += db
            if not (np.all(np.isfinite(layer.weights))
                    and np.all(np.isfinite(layer.visible_bias))
                    and np.all(np.isfinite(layer.hidden_bias))):
                raise DivergenceError("RBM parameters diverged", epoch=epoch)
        recon = layer.visible_from_hidden(layer.hidden_probs(data))
        recon_trace.append(float(np.mean((recon - data) ** 2)))
    layer.recon_trace = recon_trace
    return layer


# --- the joint posterior network ----------------------------------------------

@dataclass
class JointPosteriorNet:
    """Sigmoid feed-forward net whose top layer is the joint-state matrix.

    Each entry of ``layers`` is an (in+1, out) matrix with the bias row
    folded in last.  ``state`` tracks training-phase ordering.
    """

    layers: list
    joint_shape: tuple[int, int]
    input_spec: InputSpec | None = None
    state: str = "generative"  # generative -> initialized -> finetuned
    log: list = field(default_factory=list, repr=False)

    @property
    def n_inputs(self) -> int:
        return self.layers[0].shape[0] - 1

    @property
    def n_joint(self) -> int:
        return self.joint_shape[0] * self.joint_shape[1]


def stack_dbn(layers: list[RbmLayer]) -> list[np.ndarray]:
    """Convert a DBN into feed-forward weights; visible biases are dropped."""
    for lower, upper in zip(layers[:-1], layers[1:]):
        if lower.n_hidden != upper.n_visible:
            raise ValueError("RBM layer sizes do not chain")
    return [np.vstack([l.weights, l.hidden_bias[None, :]]) for l in layers]


def add_joint_layer(hidden_weights: list[np.ndarray], joint_shape: tuple[int, int],
                    input_spec: InputSpec | None = None,
                    seed: int = 0) -> JointPosteriorNet:
    """Append the randomly initialized joint-state layer L."""
    rng = np.random.default_rng(seed)
    n_in = hidden_weights[-1].shape[1] if hidden_weights else (
        input_spec.dim if input_spec else 0)
    n_out = joint_shape[0] * joint_shape[1]
    w = 0.01 * rng.standard_normal((n_in + 1, n_out))
    w[-1, :] = 0.0
    return JointPosteriorNet([m.copy() for m in hidden_weights] + [w],
                             tuple(joint_shape), input_spec)


def forward_batch(net: JointPosteriorNet, inputs: np.ndarray,
                  keep_activations: bool = False):
    """Sigmoid forward pass for a batch of row vectors."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[1] != net.n_inputs:
        raise ValueError("input dimension does not match network")
    acts = [inputs]
    a = inputs
    for w in net.layers:
        a = sigmoid(a @ w[:-1] + w[-1])
        acts.append(a)
    if keep_activations:
        return a, acts
    return a


def forward(net: JointPosteriorNet, input_vec: np.ndarray) -> np.ndarray:
    """Joint matrix X (rows indexed by the first chain) for one input."""
    out = forward_batch(net, np.asarray(input_vec)[None, :])
    return out[0].reshape(net.joint_shape)


def marginalize(x: np.ndarray):
    """Row sums and column sums of the joint matrix (the fixed readout)."""
    x = np.asarray(x)
    return x.sum(axis=1), x.sum(axis=0)


def finetune_loss(x: np.ndarray, dm_a: np.ndarray, dm_b: np.ndarray) -> float:
    m_a, m_b = marginalize(x)
    return 0.5 * (float(((m_a - dm_a) ** 2).sum())
                  + float(((m_b - dm_b) ** 2).sum()))


def finetune_output_grad(x: np.ndarray, dm_a: np.ndarray,
                         dm_b: np.ndarray) -> np.ndarray:
    """d(loss)/dX(i,j) = (m_a - dm_a)[i] + (m_b - dm_b)[j]."""
    m_a, m_b = marginalize(x)
    return (m_a - dm_a)[:, None] + (m_b - dm_b)[None, :]


def _backprop(net: JointPosteriorNet, acts: list, grad_out: np.ndarray):
    """Gradients of a loss w.r.t. every layer matrix, given dLoss/d(output)."""
    grads = [None] * len(net.layers)
    delta = grad_out * acts[-1] * (1.0 - acts[-1])
    for li in range(len(net.layers) - 1, -1, -1):
        a_prev = acts[li]
        gw = np.empty_like(net.layers[li])
        gw[:-1] = a_prev.T @ delta
        gw[-1] = delta.sum(axis=0)
        grads[li] = gw
        if li > 0:
            delta = (delta @ net.layers[li][:-1].T) * acts[li] * (1.0 - acts[li])
    return grads


def init_loss_and_grads(net: JointPosteriorNet, inputs: np.ndarray,
                        labels: np.ndarray):
    """Joint-layer initialization objective: half the squared X - D error.

    ``labels`` is (N, S_a*S_b) row-major.  Returns the summed loss and the
    per-layer gradient list.
    """
    out, acts = forward_batch(net, inputs, keep_activations=True)
    diff = out - labels
    loss = 0.5 * float((diff ** 2).sum())
    return loss, _backprop(net, acts, diff)


def finetune_loss_and_grads(net: JointPosteriorNet, inputs: np.ndarray,
                            dm_a: np.ndarray, dm_b: np.ndarray,
                            grad_fn=finetune_output_grad):
    """Marginal-matching objective summed over the batch, plus gradients."""
    out, acts = forward_batch(net, inputs, keep_activations=True)
    sa, sb = net.joint_shape
    n = out.shape[0]
    xs = out.reshape(n, sa, sb)
    m_a = xs.sum(axis=2)
    m_b = xs.sum(axis=1)
    loss = 0.5 * float(((m_a - dm_a) ** 2).sum() + ((m_b - dm_b) ** 2).sum())
    grad_out = np.empty_like(xs)
    for k in range(n):
        grad_out[k] = grad_fn(xs[k], dm_a[k], dm_b[k])
    return loss, _backprop(net, acts, grad_out.reshape(n, sa * sb))


def finetune_dataset_loss(net: JointPosteriorNet, inputs: np.ndarray,
                          dm_a: np.ndarray, dm_b: np.ndarray) -> float:
    out = forward_batch(net, inputs)
    sa, sb = net.joint_shape
    xs = out.reshape(len(out), sa, sb)
    return 0.5 * float(((xs.sum(axis=2) - dm_a) ** 2).sum()
                       + ((xs.sum(axis=1) - dm_b) ** 2).sum())


@dataclass
class NetHyper:
    rate: float = 0.1
    momentum: float = 0.9
    epochs: int = 10
    batch: int = 128
    seed: int = 0


def _sgd_epochs(net, n_samples, hyper, step_fn, epoch_fn=None):
    rng = np.random.default_rng(hyper.seed)
    velocity = [np.zeros_like(w) for w in net.layers]
    for epoch in range(hyper.epochs):
        order = rng.permutation(n_samples)
        for lo in range(0, n_samples, hyper.batch):
            idx = order[lo: lo + hyper.batch]
            loss, grads = step_fn(idx)
            if not math.isfinite(loss):
                raise DivergenceError("training loss diverged", epoch=epoch)
            for w, v, g in zip(net.layers, velocity, grads):
                v *= hyper.momentum
                v -= (hyper.rate / len(idx)) * g
                w += v
        if epoch_fn is not None:
            epoch_fn(epoch)


def train_init_phase(net: JointPosteriorNet, inputs: np.ndarray,
                     labels: np.ndarray, hyper: NetHyper) -> JointPosteriorNet:
    """Phase two: fit the whole stack to approximate joint posteriors."""
    labels = labels.reshape(len(labels), -1)
    if labels.shape[1] != net.n_joint:
        raise ValueError("label shape does not match the joint layer")

    def step(idx):
        loss, grads = init_loss_and_grads(net, inputs[idx], labels[idx])
        net.log.append(("init", loss / len(idx)))
        return loss, grads

    _sgd_epochs(net, len(inputs), hyper, step)
    net.state = "initialized"
    return net


def train_finetune_phase(net: JointPosteriorNet, inputs: np.ndarray,
                         dm_a: np.ndarray, dm_b: np.ndarray, hyper: NetHyper,
                         heldout: tuple | None = None,
                         early_stop: bool = False) -> JointPosteriorNet:
    """Phase three: marginal-matching SGD over all layers.

    Records per-epoch training J (and held-out J when given).  With
    ``early_stop`` the best held-out parameters are restored at the end.
    """
    if net.state == "generative":
        raise TrainingPhaseError(
            "joint layer must be initialized before fine-tuning")

    history = []
    best = [np.inf, None]

    def step(idx):
        return finetune_loss_and_grads(net, inputs[idx], dm_a[idx], dm_b[idx])

    def at_epoch_end(epoch):
        j_train = finetune_dataset_loss(net, inputs, dm_a, dm_b) / len(inputs)
        j_held = None
        if heldout is not None:
            hv, ha, hb = heldout
            j_held = finetune_dataset_loss(net, hv, ha, hb) / len(hv)
            if early_stop and j_held < best[0]:
                best[0] = j_held
                best[1] = [w.copy() for w in net.layers]
        history.append((epoch, j_train, j_held))
        net.log.append(("finetune", epoch, j_train, j_held))

    _sgd_epochs(net, len(inputs), hyper, step, at_epoch_end)
    if early_stop and best[1] is not None:
        net.layers = best[1]
    net.state = "finetuned"
    net.finetune_history = history
    return net


def init_labels_vts(mixed: FeatureSequence, model_a, model_b,
                    ctx: MismatchContext, mode: str = "pairwise") -> np.ndarray:
    """Per-frame approximate joint-posterior label matrices, (T, Sa, Sb)."""
    tensor = vts_joint_tensor(mixed, model_a, model_b, ctx, mode=mode,
                              scale="posterior")
    return tensor.values


def infer_joint_tensor(net: JointPosteriorNet, mixed: FeatureSequence,
                       speaker_pair, gain_db: float = 0.0) -> JointStateTensor:
    """Run the net over an utterance and renormalize each frame's X.

    Sigmoid outputs are unnormalized, so every frame slice is scaled to sum
    to one before it reaches the decoder.
    """
    if net.input_spec is None:
        raise ValueError("network has no input spec")
    inputs = compose_input_matrix(mixed, net.input_spec, speaker_pair, gain_db)
    out = forward_batch(net, inputs)
    sums = out.sum(axis=1, keepdims=True)
    sums[sums <= 0] = 1.0
    post = (out / sums).reshape(mixed.n_frames, *net.joint_shape)
    return JointStateTensor(post, "posterior")


# --- net file + training log ----------------------------------------------------

NET_MAGIC = "FACNET1"


def save_net(path, net: JointPosteriorNet):
    with open(path, "wb") as fh:
        sizes = " ".join(f"{w.shape[0]}x{w.shape[1]}" for w in net.layers)
        spec = net.input_spec
        lines = [NET_MAGIC,
                 f"layers {sizes}",
                 f"joint_shape {net.joint_shape[0]} {net.joint_shape[1]}",
                 f"state {net.state}"]
        if spec is not None:
            pairs = ",".join(f"{a}:{b}" for a, b in spec.speaker_pairs)
            lines += [f"input_context {spec.context}",
                      f"input_n_mel {spec.n_mel}",
                      f"input_pairs {pairs}",
                      f"input_use_gain {int(spec.use_gain)}",
                      f"gain_stats {spec.stats.gain_mean!r} {spec.stats.gain_std!r}"]
        lines.append("end_header")
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        if spec is not None:
            fh.write(spec.stats.mel_mean.astype("<f8").tobytes())
            fh.write(spec.stats.mel_std.astype("<f8").tobytes())
        for w in net.layers:
            fh.write(w.astype("<f8").tobytes(order="C"))


def load_net(path) -> JointPosteriorNet:
    with open(path, "rb") as fh:
        if fh.readline().decode().strip() != NET_MAGIC:
            raise ValueError("not a network file")
        meta = {}
        while True:
            line = fh.readline().decode().rstrip("\n")
            if line == "end_header":
                break
            key, _, value = line.partition(" ")
            meta[key] = value
        shapes = [tuple(int(v) for v in s.split("x"))
                  for s in meta["layers"].split()]
        joint_shape = tuple(int(v) for v in meta["joint_shape"].split())
        spec = None
        if "input_context" in meta:
            n_mel = int(meta["input_n_mel"])
            g_mean, g_std = (float(v) for v in meta["gain_stats"].split())
            mel_mean = np.frombuffer(fh.read(8 * n_mel), dtype="<f8").copy()
            mel_std = np.frombuffer(fh.read(8 * n_mel), dtype="<f8").copy()
            pairs = tuple(tuple(p.split(":")) for p in meta["input_pairs"].split(",")
                          if p)
            spec = InputSpec(int(meta["input_context"]), n_mel, pairs,
                             Standardization(mel_mean, mel_std, g_mean, g_std),
                             use_gain=bool(int(meta["input_use_gain"])))
        layers = []
        for rows, cols in shapes:
            w = np.frombuffer(fh.read(8 * rows * cols), dtype="<f8")
            layers.append(w.reshape(rows, cols).copy())
    return JointPosteriorNet(layers, joint_shape, spec, state=meta["state"])


def write_training_log(path, net: JointPosteriorNet):
    """CSV of (phase, epoch, loss, heldout_loss) rows from the net's log."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "epoch", "loss", "heldout_loss"])
        step = 0
        for entry in net.log:
            if entry[0] == "init":
                writer.writerow(["init", step, f"{entry[1]:.8g}", ""])
                step += 1
            else:
                _, epoch, j_train, j_held = entry
                writer.writerow(["finetune", epoch, f"{j_train:.8g}",
                                 "" if j_held is None else f"{j_held:.8g}"])
