"""Numpy MLP policies trained by imitation through the projection heads.

Reverse mode is written out by hand: MLP layers, the batched projection
kernel, the head combiner and the softplus gains each contribute one
backward rule.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .composition import HeadCombiner
from .geometry import sigmoid
from .poset import enumerate_linear_extensions, sample_linear_extension

CHECKPOINT_VERSION = 1


class NonFiniteLoss(FloatingPointError):
    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")
        self.epoch, self.step, self.value = epoch, step, value


@dataclass
class Mlp:
    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator) -> "Mlp":
        W, b = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            W.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            b.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(list(sizes), W, b)

    def forward(self, X):
        """Returns output and the per-layer inputs needed for backprop."""
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if k < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, G):
        """Gradients of the weights and biases given the output gradient ``G``."""
        gW, gb = [None] * len(self.weights), [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            gW[k] = acts[k].T @ G
            gb[k] = G.sum(axis=0)
            if k:
                G = (G @ self.weights[k].T) * (acts[k] > 0.0)
        return gW, gb


def _adam_init(params: dict[str, np.ndarray]):
    return {k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()}


@dataclass
class TrainState:
    """Everything that evolves during training, plus the static model layout.

    ``mode`` is ``mixture``, ``hard`` (Gumbel-softmax while training, argmax
    at inference) or ``none`` (no safety layer: a plain imitation MLP).
    """

    scenario: str
    scenario_hash: str
    mode: str
    orders: np.ndarray  # (H, N) int64
    mlps: list[Mlp]
    raw_gains: list[np.ndarray]
    logits: np.ndarray
    feat_mean: np.ndarray
    feat_std: np.ndarray
    seed: int
    temperature: float = 1.0
    learn_gains: bool = True
    step: int = 0
    m1: dict = field(default_factory=dict)
    m2: dict = field(default_factory=dict)

    @property
    def heads(self) -> int:
        return len(self.mlps)

    @property
    def projected(self) -> bool:
        return self.mode != "none"

    def combiner(self) -> HeadCombiner:
        mode = {"mixture": "mixture", "hard": "gumbel", "none": "mixture"}[self.mode]
        return HeadCombiner(mode, self.logits, self.temperature)

    # flat parameter view used by the optimizer and gradient checks
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for h, net in enumerate(self.mlps):
            for k, (W, b) in enumerate(zip(net.weights, net.biases)):
                out[f"h{h}.W{k}"] = W
                out[f"h{h}.b{k}"] = b
        if self.projected:
            for j, g in enumerate(self.raw_gains):
                out[f"gain{j}"] = g
            out["logits"] = self.logits
        return out


def init_state(scenario, *, mode: str = "mixture", heads: int | None = None, orders=None,
               layers: Sequence[int] | None = None, seed: int = 0, feat_mean=None, feat_std=None,
               init_raw_gain: float | None = None, learn_gains: bool = True,
               temperature: float = 1.0) -> TrainState:
    """Fresh model for ``scenario``.

    Head orders default to the lexicographically first linear extensions,
    topped up with sampled ones when the poset has fewer than ``heads``.
    Gains start at softplus(``init_raw_gain``); ``None`` copies the
    scenario's (expert) gains instead.
    """
    if mode not in ("mixture", "hard", "none"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    H = int(heads or scenario.params.get("heads", 1))
    if mode == "none":
        H = 1
    if orders is None:
        exts = [tuple(e) for e in enumerate_linear_extensions(scenario.poset, limit=H)]
        while len(exts) < H:
            exts.append(tuple(sample_linear_extension(scenario.poset, rng)))
        orders = exts[:H]
    orders = np.asarray(orders, dtype=np.int64).reshape(len(orders), -1)
    H = orders.shape[0]
    sizes = list(layers or scenario.params["layers"])
    mlps = [Mlp.init(sizes, rng) for _ in range(H)]
    if init_raw_gain is None:
        raw = [np.array(s.raw_gains, dtype=float) for s in scenario.specs]
    else:
        raw = [np.full(s.order, float(init_raw_gain)) for s in scenario.specs]
    fm = np.zeros(sizes[0]) if feat_mean is None else np.asarray(feat_mean, dtype=float)
    fs = np.ones(sizes[0]) if feat_std is None else np.asarray(feat_std, dtype=float)
    return TrainState(scenario.name, scenario.config_hash(), mode, orders, mlps, raw, np.zeros(H), fm, fs,
                      int(seed), float(temperature), bool(learn_gains))


@dataclass
class Tape:
    zn: np.ndarray
    acts: list
    U: np.ndarray
    A: np.ndarray
    c: np.ndarray
    compiled: list
    out: np.ndarray
    active: np.ndarray
    infeasible: np.ndarray
    weights: np.ndarray
    u: np.ndarray


def forward(state: TrainState, scenario, x, z, *, training: bool = False, rng=None, noise=None,
            nominal_noise=None, record: bool = False):
    """Policy output for a batch. Returns ``(u, tape)``.

    ``nominal_noise`` (B, m) is added to every head's nominal control before
    projection. With ``record`` the tape additionally carries the
    intermediate projection steps as ``tape.steps``.
    """
    x = np.atleast_2d(x)
    zn = (np.atleast_2d(z) - state.feat_mean) / state.feat_std
    outs, acts = [], []
    for net in state.mlps:
        o, a = net.forward(zn)
        outs.append(o)
        acts.append(a)
    U = np.stack(outs, axis=1)  # (B, H, m)
    if nominal_noise is not None:
        U = U + np.asarray(nominal_noise)[:, None, :]
    B = U.shape[0]
    if not state.projected:
        w = np.ones((B, 1))
        tape = Tape(zn, acts, U, None, None, [], U, None, np.zeros((B, 1), np.uint8), w, U[:, 0])
        tape.steps = None
        return U[:, 0].copy(), tape
    A, c, compiled = scenario.compile(x, state.raw_gains)
    out, active, infeasible, steps = kernels.project_heads(A, c, state.orders, U, record)
    w = state.combiner().combination_weights(B, training=training, rng=rng, noise=noise)
    u = np.einsum("bh,bhm->bm", w, out)
    tape = Tape(zn, acts, U, A, c, compiled, out, active, infeasible, w, u)
    tape.steps = steps
    return u, tape


def backward(state: TrainState, tape: Tape, G_u, *, training: bool = False) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with upstream gradient ``G_u`` (B, m)."""
    grads: dict[str, np.ndarray] = {}
    if state.projected:
        G_out = tape.weights[:, :, None] * G_u[:, None, :]
        G_w = np.einsum("bm,bhm->bh", G_u, tape.out)
        w = tape.weights
        if state.mode == "mixture":
            grads["logits"] = np.sum(w * (G_w - np.sum(w * G_w, axis=1, keepdims=True)), axis=0)
        elif state.mode == "hard" and training:
            grads["logits"] = np.sum(w * (G_w - np.sum(w * G_w, axis=1, keepdims=True)), axis=0) / state.temperature
        else:
            grads["logits"] = np.zeros_like(state.logits)
        G_U, G_c = kernels.project_heads_backward(tape.A, tape.c, state.orders, tape.active, G_out)
        for j, cb in enumerate(tape.compiled):
            raw = state.raw_gains[j]
            kappa = np.logaddexp(0.0, raw)
            dc = cb.threshold_grad(kappa)  # (B, order)
            g = (G_c[:, j, None] * dc).sum(axis=0) * sigmoid(raw)
            grads[f"gain{j}"] = g if state.learn_gains else np.zeros_like(g)
    else:
        G_U = G_u[:, None, :]
    for h, net in enumerate(state.mlps):
        gW, gb = net.backward(tape.acts[h], G_U[:, h])
        for k in range(len(gW)):
            grads[f"h{h}.W{k}"] = gW[k]
            grads[f"h{h}.b{k}"] = gb[k]
    return grads


def loss_and_grad(state: TrainState, scenario, x, z, u_star, *, training: bool = True, rng=None, noise=None):
    """Mean over the batch of ``|u* - u|^2`` and its gradients."""
    u, tape = forward(state, scenario, x, z, training=training, rng=rng, noise=noise)
    diff = u - np.atleast_2d(u_star)
    B = diff.shape[0]
    loss = float(np.sum(diff * diff) / B)
    grads = backward(state, tape, 2.0 * diff / B, training=training)
    return loss, grads


def adam_step(state: TrainState, grads: dict[str, np.ndarray], lr: float = 1e-3,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    params = state.params()
    if not state.m1:
        state.m1, state.m2 = _adam_init(params)
    state.step += 1
    b1, b2 = betas
    for k, p in params.items():
        g = grads[k]
        state.m1[k] = b1 * state.m1[k] + (1 - b1) * g
        state.m2[k] = b2 * state.m2[k] + (1 - b2) * g * g
        mhat = state.m1[k] / (1 - b1**state.step)
        vhat = state.m2[k] / (1 - b2**state.step)
        p -= lr * mhat / (np.sqrt(vhat) + eps)  # in place: params() aliases the model arrays


@dataclass
class Dataset:
    episode: np.ndarray
    t: np.ndarray
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def take(self, mask) -> "Dataset":
        return Dataset(self.episode[mask], self.t[mask], self.x[mask], self.z[mask], self.u[mask])

    def split(self, val_frac: float = 0.1) -> tuple["Dataset", "Dataset"]:
        """Hold out the last ``val_frac`` of episodes (by id)."""
        eps = np.unique(self.episode)
        n_val = int(round(val_frac * len(eps)))
        if n_val == 0 or n_val == len(eps):
            return self, self.take(np.zeros(len(self), dtype=bool))
        val_eps = eps[-n_val:]
        mask = np.isin(self.episode, val_eps)
        return self.take(~mask), self.take(mask)


def evaluate_mse(state: TrainState, scenario, data: Dataset, batch: int = 2048) -> float:
    if len(data) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(data), batch):
        u, _ = forward(state, scenario, data.x[i:i + batch], data.z[i:i + batch])
        total += float(np.sum((u - data.u[i:i + batch]) ** 2))
    return total / len(data)


@dataclass
class Curve:
    epoch: list[int] = field(default_factory=list)
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse"])
            for e, a, b in zip(self.epoch, self.train_mse, self.val_mse):
                w.writerow([e, repr(a), repr(b)])


def train(state: TrainState, scenario, data: Dataset, *, epochs: int = 20, batch_size: int = 256,
          lr: float = 1e-3, val_frac: float = 0.1, seed: int | None = None, log=None) -> tuple[TrainState, Curve]:
    """Imitation training with Adam; returns the state and per-epoch curve.

    ``train_mse`` is the sample-weighted mean of the minibatch losses seen
    during the epoch; ``val_mse`` is measured on held-out episodes at the
    end of the epoch.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    tr, va = data.split(val_frac)
    rng = np.random.default_rng(state.seed if seed is None else seed)
    curve = Curve()
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(tr))
        total, count = 0.0, 0
        for k, i in enumerate(range(0, len(tr), batch_size)):
            idx = perm[i:i + batch_size]
            loss, grads = loss_and_grad(state, scenario, tr.x[idx], tr.z[idx], tr.u[idx], training=True, rng=rng)
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch, k, loss)
            adam_step(state, grads, lr)
            total += loss * len(idx)
            count += len(idx)
        curve.epoch.append(epoch)
        curve.train_mse.append(total / count)
        curve.val_mse.append(evaluate_mse(state, scenario, va))
        if log:
            log(f"epoch {epoch}: train {curve.train_mse[-1]:.5f} val {curve.val_mse[-1]:.5f}")
    return state, curve


def feature_stats(z) -> tuple[np.ndarray, np.ndarray]:
    z = np.atleast_2d(z)
    std = z.std(axis=0)
    return z.mean(axis=0), np.where(std > 1e-8, std, 1.0)


# ---------------------------------------------------------------- checkpoints


def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def save_checkpoint(state: TrainState, path) -> None:
    blob = {
        "version": CHECKPOINT_VERSION,
        "scenario": state.scenario,
        "scenario_hash": state.scenario_hash,
        "mode": state.mode,
        "seed": state.seed,
        "temperature": state.temperature,
        "learn_gains": state.learn_gains,
        "step": state.step,
        "orders": state.orders.tolist(),
        "layers": state.mlps[0].sizes,
        "mlps": [{"W": [_arr(W) for W in n.weights], "b": [_arr(b) for b in n.biases]} for n in state.mlps],
        "raw_gains": [_arr(g) for g in state.raw_gains],
        "logits": _arr(state.logits),
        "feat_mean": _arr(state.feat_mean),
        "feat_std": _arr(state.feat_std),
    }
    Path(path).write_text(json.dumps(blob))


def load_checkpoint(path) -> TrainState:
    blob = json.loads(Path(path).read_text())
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    sizes = blob["layers"]
    mlps = [Mlp(list(sizes), [np.array(W) for W in n["W"]], [np.array(b) for b in n["b"]]) for n in blob["mlps"]]
    return TrainState(blob["scenario"], blob["scenario_hash"], blob["mode"], np.array(blob["orders"], dtype=np.int64),
                      mlps, [np.array(g) for g in blob["raw_gains"]], np.array(blob["logits"]),
                      np.array(blob["feat_mean"]), np.array(blob["feat_std"]), blob["seed"],
                      blob["temperature"], blob["learn_gains"], blob["step"])
