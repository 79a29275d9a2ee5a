"""Backpropagation, initialization, Adam and the minibatch training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BadLabel, EmptyDataset, ShapeMismatch, SpecInvalid
from .mnist_io import BatchPlan, Dataset, batches
from .nn_core import (
    TANH,
    Fc,
    FcLayer,
    Flatten,
    Lst,
    ModelSpec,
    ResLst,
    check_params,
    model_forward,
    validate_spec,
)
from .rng import SplitMix64

log = logging.getLogger(__name__)

PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 1000
    lr: float = 2e-3
    weight_decay: float = 1e-5
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


# Initialization ----------------------------------------------------------------

def glorot_init(d_in: int, d_out: int, rng: SplitMix64, dtype=np.float64) -> FcLayer:
    """Uniform Glorot weights in ``[-L, L]``, ``L = sqrt(6 / (d_in + d_out))``; zero bias."""
    bound = math.sqrt(6.0 / (d_in + d_out))
    W = rng.uniform_array((d_out, d_in), -bound, bound).astype(dtype)
    return FcLayer(W, np.zeros(d_out, dtype=dtype))


def init_params(spec: ModelSpec, seed: int, dtype=np.float64) -> list:
    """Draw every weight matrix in stage order from one seeded stream."""
    validate_spec(spec)
    rng = SplitMix64(seed)
    params = []
    for st in spec.stages:
        if isinstance(st, (Lst, ResLst)):
            d_in, d_out = (st.d, st.d) if isinstance(st, ResLst) else (st.d_in, st.d_out)
            row = glorot_init(d_in, d_out, rng, dtype)
            col = glorot_init(d_in, d_out, rng, dtype)
            params.append({"W1": row.W, "b1": row.b, "W2": col.W, "b2": col.b})
        elif isinstance(st, Fc):
            layer = glorot_init(st.d_in, st.d_out, rng, dtype)
            params.append({"W": layer.W, "b": layer.b})
        else:
            params.append({})
    return params


# Loss ----------------------------------------------------------------------------

def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean ``-log softmax(logits)[label]``; accepts one sample or a batch."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    if len(labels) != len(logits):
        raise ShapeMismatch(f"{len(logits)} logit rows for {len(labels)} labels")
    if np.any(labels < 0) or np.any(labels >= logits.shape[-1]):
        raise BadLabel(f"labels must lie in 0..{logits.shape[-1] - 1}")
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


# Backward ------------------------------------------------------------------------

def _forward_cached(spec: ModelSpec, params: list, X: np.ndarray):
    caches = []
    out = X
    for st, p in zip(spec.stages, params):
        if isinstance(st, (Lst, ResLst)):
            V = np.tanh(out @ p["W1"].T + p["b1"])
            Y = np.tanh(p["W2"] @ V + p["b2"][:, None])
            caches.append((out, V, Y))
            out = Y + out if isinstance(st, ResLst) else Y
        elif isinstance(st, Flatten):
            caches.append(out.shape)
            out = out.reshape(out.shape[0], -1)
        elif isinstance(st, Fc):
            z = out @ p["W"].T + p["b"]
            y = np.tanh(z) if st.activation == TANH else z
            caches.append((out, y))
            out = y
    return out, caches


def _lst_backward(p: dict, cache, dY: np.ndarray):
    X, V, Y = cache
    dA2 = dY * (1.0 - Y * Y)
    # each shared weight collects one contribution per row (W1) or column (W2)
    # application, summed over the batch
    dW2 = np.tensordot(dA2, V, axes=([0, 2], [0, 2]))
    db2 = dA2.sum(axis=(0, 2))
    dV = p["W2"].T @ dA2
    dA1 = dV * (1.0 - V * V)
    dW1 = np.tensordot(dA1, X, axes=([0, 1], [0, 1]))
    db1 = dA1.sum(axis=(0, 1))
    dX = dA1 @ p["W1"]
    return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}, dX


def backward(spec: ModelSpec, params: list, images: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its exact gradient for every parameter.

    Returns ``(loss, grads)`` with ``grads`` shaped like ``params``.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 3 or len(images) == 0:
        raise ShapeMismatch(f"expected a nonempty (N, d, d) batch, got shape {images.shape}")
    if len(labels) != len(images):
        raise ShapeMismatch(f"{len(images)} images for {len(labels)} labels")
    check_params(spec, params)
    logits, caches = _forward_cached(spec, params, images)
    n = len(labels)
    if np.any(labels < 0) or np.any(labels >= logits.shape[-1]):
        raise BadLabel("label out of range")
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].astype(np.float64).mean())

    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n

    grads = [None] * len(spec.stages)
    for i in range(len(spec.stages) - 1, -1, -1):
        st, p, cache = spec.stages[i], params[i], caches[i]
        if isinstance(st, Fc):
            x, y = cache
            dz = grad * (1.0 - y * y) if st.activation == TANH else grad
            grads[i] = {"W": dz.T @ x, "b": dz.sum(axis=0)}
            grad = dz @ p["W"]
        elif isinstance(st, Flatten):
            grads[i] = {}
            grad = grad.reshape(cache)
        elif isinstance(st, Lst):
            grads[i], grad = _lst_backward(p, cache, grad)
        elif isinstance(st, ResLst):
            g, dX = _lst_backward(p, cache, grad)
            grads[i] = g
            grad = dX + grad
        else:
            raise SpecInvalid(f"unknown stage {st!r}")
    return loss, grads


def input_gradient(spec: ModelSpec, params: list, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean loss with respect to the input images."""
    logits, caches = _forward_cached(spec, params, images)
    n = len(labels)
    grad = np.exp(_log_softmax(logits))
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    for i in range(len(spec.stages) - 1, -1, -1):
        st, p, cache = spec.stages[i], params[i], caches[i]
        if isinstance(st, Fc):
            x, y = cache
            dz = grad * (1.0 - y * y) if st.activation == TANH else grad
            grad = dz @ p["W"]
        elif isinstance(st, Flatten):
            grad = grad.reshape(cache)
        elif isinstance(st, Lst):
            grad = _lst_backward(p, cache, grad)[1]
        elif isinstance(st, ResLst):
            grad = _lst_backward(p, cache, grad)[1] + grad
    return grad


def batch_loss(spec: ModelSpec, params: list, images: np.ndarray, labels: np.ndarray) -> float:
    return cross_entropy(model_forward(spec, params, images), labels)


# Gradient checking -------------------------------------------------------------

GRAD_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise.

    Central differences at ``h = 1e-5`` carry roughly ``1e-10`` of rounding
    noise, so entries smaller than ``floor`` are judged on absolute error.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradients(spec, params, images, labels, h: float = 1e-5) -> list:
    """Central finite differences of the mean loss for every parameter entry."""
    out = []
    for p in params:
        g = {}
        for k, arr in p.items():
            num = np.zeros_like(arr, dtype=np.float64)
            flat, nflat = arr.reshape(-1), num.reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + h
                up = batch_loss(spec, params, images, labels)
                flat[j] = old - h
                down = batch_loss(spec, params, images, labels)
                flat[j] = old
                nflat[j] = (up - down) / (2 * h)
            g[k] = num
        out.append(g)
    return out


def gradcheck(spec, params, images, labels, h: float = 1e-5) -> float:
    """Largest relative error between analytic and finite-difference gradients."""
    _, analytic = backward(spec, params, images, labels)
    numeric = numeric_gradients(spec, params, images, labels, h)
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        for k in ga:
            if ga[k].size:
                worst = max(worst, float(relative_error(ga[k], gn[k]).max()))
    return worst


# Optimizer ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def fresh(cls, params: list, **hyper) -> "AdamState":
        m = [{k: np.zeros_like(a) for k, a in p.items()} for p in params]
        v = [{k: np.zeros_like(a) for k, a in p.items()} for p in params]
        return cls(m=m, v=v, **hyper)


def adam_step(state: AdamState, params: list, grads: list):
    """One bias-corrected Adam update with coupled L2 decay, in place.

    Returns ``(params, state)`` for convenience.
    """
    if len(grads) != len(params):
        raise ShapeMismatch("gradient and parameter lists differ in length")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        for k, w in p.items():
            gk = g[k]
            if gk.shape != w.shape:
                raise ShapeMismatch(f"gradient {k} has shape {gk.shape}, parameter {w.shape}")
            if state.weight_decay:
                gk = gk + state.weight_decay * w
            m[k] *= state.beta1
            m[k] += (1.0 - state.beta1) * gk
            v[k] *= state.beta2
            v[k] += (1.0 - state.beta2) * gk * gk
            w -= state.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
    return params, state


# Training loop ---------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float
    seconds: float = 0.0


@dataclass
class TrainResult:
    params: list
    history: list = field(default_factory=list)


def predict(spec: ModelSpec, params: list, images: np.ndarray, chunk: int = 2000) -> np.ndarray:
    """Argmax class per image; ties go to the lowest index."""
    out = []
    for s in range(0, len(images), chunk):
        out.append(np.argmax(model_forward(spec, params, images[s:s + chunk]), axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(spec: ModelSpec, params: list, ds: Dataset) -> float:
    if len(ds) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    dtype = params[-1]["W"].dtype
    return float(np.mean(predict(spec, params, ds.images.astype(dtype, copy=False)) == ds.labels))


def train(
    spec: ModelSpec,
    ds_train: Dataset,
    ds_test: Optional[Dataset],
    cfg: TrainConfig,
    params: Optional[list] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Shuffled minibatch Adam for ``cfg.epochs`` epochs; returns final-epoch parameters."""
    if len(ds_train) == 0:
        raise EmptyDataset("training set is empty")
    dtype = cfg.dtype
    if params is None:
        params = init_params(spec, cfg.seed, dtype)
    else:
        params = [{k: a.astype(dtype) for k, a in p.items()} for p in params]
    train_ds = Dataset(ds_train.images.astype(dtype, copy=False), ds_train.labels)
    test_ds = Dataset(ds_test.images.astype(dtype, copy=False), ds_test.labels) if ds_test else None
    state = AdamState.fresh(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    plan = BatchPlan(cfg.seed, cfg.batch_size)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        total, seen = 0.0, 0
        for xb, yb in batches(train_ds, plan, epoch):
            loss, grads = backward(spec, params, xb, yb)
            adam_step(state, params, grads)
            total += loss * len(yb)
            seen += len(yb)
        acc = evaluate(spec, params, test_ds) if test_ds is not None else float("nan")
        rec = EpochRecord(epoch, total / seen, acc, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d  loss %.5f  test acc %.2f%%", epoch, rec.train_loss, 100 * acc)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(params, history)


def write_history_csv(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_train_loss", "test_accuracy"])
        for rec in history:
            w.writerow([rec.epoch, repr(float(rec.train_loss)), repr(float(rec.test_accuracy))])


def read_history_csv(path) -> list:
    with open(path, newline="") as fh:
        return [
            EpochRecord(int(r["epoch"]), float(r["mean_train_loss"]), float(r["test_accuracy"]))
            for r in csv.DictReader(fh)
        ]
