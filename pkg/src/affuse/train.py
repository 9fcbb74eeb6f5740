"""Losses, optimizers, the epoch loop and a finite-difference gradient checker."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .fusion import FusionOutput
from .metrics import classification_report
from .models import FusionModel
from .rng import MASK64, RngStream
from .tensor import Parameter, Tensor, backward, log_softmax, mul, no_grad

SHUFFLE_SALT = 0x7A3D_5EED_0000_0001


@dataclass
class LossConfig:
    aux_weight: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        for key in ("aux_weight", "weight_decay"):
            v = getattr(self, key)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{key} must be finite and >= 0")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    optimizer: str = "adam"
    dropout_p: float | None = None
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochStats:
    loss: float
    accuracy: float
    macro_f1: float = 0.0


# ---------------------------------------------------------------- losses

def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    bsz, c = logits.shape
    picked = mul(log_softmax(logits, axis=1), Tensor(one_hot(labels, c)))
    return picked.sum() * (-1.0 / bsz)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    diff = pred - target
    return mul(diff, diff).mean()


def l2_penalty(params: Sequence[Parameter], weight_decay: float) -> Tensor | None:
    """(weight_decay / 2) * sum of squared non-exempt parameters."""
    total = None
    for p in params:
        if p.decay_exempt:
            continue
        sq = mul(p, p).sum()
        total = sq if total is None else total + sq
    return None if total is None else total * (weight_decay / 2.0)


def total_loss(logits: Tensor, labels, fusion_out: FusionOutput | None,
               params: Sequence[Parameter], cfg: LossConfig) -> Tensor:
    loss = cross_entropy(logits, labels)
    if cfg.aux_weight > 0:
        if fusion_out is None or fusion_out.aux_pred is None:
            raise ValueError("aux_weight > 0 but the fusion output has no aux_pred")
        loss = loss + mse(fusion_out.aux_pred, fusion_out.aux_target) * cfg.aux_weight
    if cfg.weight_decay > 0:
        pen = l2_penalty(params, cfg.weight_decay)
        if pen is not None:
            loss = loss + pen
    return loss


# ---------------------------------------------------------------- optimizers

class Optimizer:
    """SGD with momentum (v <- mu v + g; theta -= lr v) or bias-corrected Adam."""

    def __init__(self, params: Sequence[Parameter], kind: str = "adam", lr: float = 3e-3,
                 momentum: float = 0.9, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if kind not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = list(params)
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g.shape != p.data.shape or self.m[i].shape != p.data.shape:
                raise ValueError(f"shape drift on {p.name}: {g.shape} vs {p.data.shape}")
            if self.kind == "sgd_momentum":
                self.m[i] = self.momentum * self.m[i] + g
                p.data = p.data - self.lr * self.m[i]
            else:
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
                m_hat = self.m[i] / (1.0 - self.beta1 ** self.t)
                v_hat = self.v[i] / (1.0 - self.beta2 ** self.t)
                p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimizer_step(opt: Optimizer) -> None:
    opt.step()


# ---------------------------------------------------------------- training

def epoch_stream(seed: int, epoch: int) -> RngStream:
    """Per-epoch stream for shuffling and dropout: (seed ^ salt) ^ epoch."""
    return RngStream(((int(seed) ^ SHUFFLE_SALT) ^ int(epoch)) & MASK64)


def _batches(n: int, batch_size: int, order: Sequence[int]):
    for start in range(0, n, batch_size):
        yield np.asarray(order[start:start + batch_size], dtype=np.int64)


def train_epoch(model: FusionModel, dataset, train_cfg: TrainConfig, loss_cfg: LossConfig,
                opt: Optimizer, epoch: int = 0) -> EpochStats:
    """One pass in training mode; stats are averaged over the pass's own forwards."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    rng = epoch_stream(train_cfg.seed, epoch)
    order = rng.permutation(n) if train_cfg.shuffle else list(range(n))
    params = model.parameters()
    loss_sum = 0.0
    preds, labels = [], []
    for idx in _batches(n, train_cfg.batch_size, order):
        y = dataset.labels[idx]
        opt.zero_grad()
        logits, out = model(dataset.inputs(idx), "train", rng)
        loss = total_loss(logits, y, out, params, loss_cfg)
        backward(loss)
        opt.step()
        loss_sum += loss.item() * len(idx)
        preds.append(logits.data.argmax(axis=1))
        labels.append(y)
    rep = classification_report(np.concatenate(preds), np.concatenate(labels), dataset.num_classes)
    return EpochStats(loss_sum / n, rep.accuracy, rep.macro_f1)


def predict(model: FusionModel, dataset, batch_size: int = 256):
    """Eval-mode logits and fusion outputs over the whole dataset, in order."""
    logits, alphas = [], []
    with no_grad():
        for idx in _batches(len(dataset), batch_size, list(range(len(dataset)))):
            lg, out = model(dataset.inputs(idx), "eval")
            logits.append(lg.data)
            if out.alphas is not None:
                alphas.append(out.alphas.data)
    return np.concatenate(logits), (np.concatenate(alphas) if alphas else None)


def evaluate(model: FusionModel, dataset, batch_size: int = 256):
    """Eval-mode mean cross-entropy, classification report and attention weights."""
    logits, alphas = predict(model, dataset, batch_size)
    loss = cross_entropy(Tensor(logits), dataset.labels).item()
    rep = classification_report(logits.argmax(axis=1), dataset.labels, dataset.num_classes)
    return loss, rep, alphas


# ---------------------------------------------------------------- gradient check

def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-12, abs(a) + abs(b))


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
               n_coords: int = 20, seed: int = 0, extended: bool = True) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values (no dropout). Step ``h = 1e-6 * max(1, |theta_i|)``. The analytic
    gradient is always float64; with ``extended`` the perturbed losses are
    evaluated with parameters promoted to ``np.longdouble`` so roundoff in the
    difference quotient stays well below the gradients being checked (a no-op
    where longdouble is plain double).
    """
    params = list(params)
    loss = loss_fn()
    if loss.data.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    for p in params:
        p.zero_grad()
    backward(loss)
    sizes = [p.size for p in params]
    total = sum(sizes)
    if total == 0:
        raise ValueError("no parameter coordinates to check")
    rng = RngStream(seed)
    dtype = np.longdouble if extended else np.float64
    originals = [p.data for p in params]
    worst = 0.0
    try:
        for p in params:
            p.data = p.data.astype(dtype)
        for _ in range(n_coords):
            flat = rng.next_below(total)
            pi = 0
            while flat >= sizes[pi]:
                flat -= sizes[pi]
                pi += 1
            p = params[pi]
            idx = np.unravel_index(flat, p.shape)
            theta = dtype(originals[pi][idx])
            h = dtype(1e-6 * max(1.0, abs(float(theta))))
            with no_grad():
                p.data[idx] = theta + h
                up = loss_fn().data
                p.data[idx] = theta - h
                down = loss_fn().data
                p.data[idx] = theta
            numeric = float((up - down) / (2 * h))
            worst = max(worst, relative_error(float(p.grad[idx]), numeric))
    finally:
        for p, data in zip(params, originals):
            p.data = data
    return worst


def model_loss_fn(model: FusionModel, inputs, labels, loss_cfg: LossConfig) -> Callable[[], Tensor]:
    """Eval-mode loss closure for :func:`grad_check`.

    The auxiliary target is gradient-blocked, so its value is captured from
    the first (unperturbed) evaluation and held fixed for the finite
    differences; otherwise the two sides would differentiate different
    functions.
    """
    params = model.parameters()
    frozen: list[Tensor] = []

    def loss_fn() -> Tensor:
        logits, out = model(inputs, "eval")
        if out.aux_target is not None:
            if not frozen:
                frozen.append(out.aux_target)
            out.aux_target = frozen[0]
        return total_loss(logits, labels, out, params, loss_cfg)

    return loss_fn
