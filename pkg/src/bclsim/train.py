"""Local SGD training and evaluation.

``train_local`` is the single training primitive every client (benign or
malicious) uses: mini-batch SGD on softmax cross-entropy, deterministic
given (model, data order, seed).  Parameters are float32; an optional
``grad_hook`` lets callers blend extra gradient terms into each step
(used by the constraint-loss attack).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import LabeledSet
from .layermap import LayerMap
from .models import Architecture, backward, forward

__all__ = ["TrainSpec", "train_local", "evaluate", "softmax_cross_entropy",
           "batch_loss_and_grads"]


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 2
    batch_size: int = 64
    lr: float = 0.01
    seed: int = 0
    dropout: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss and d(loss)/d(logits) for integer labels."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    eps = np.finfo(logits.dtype).tiny
    loss = -np.mean(np.log(probs[np.arange(n), labels] + eps))
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def batch_loss_and_grads(arch: Architecture, params: list[np.ndarray],
                         xb: np.ndarray, yb: np.ndarray, *,
                         train: bool = False,
                         rng: np.random.Generator | None = None,
                         scratch: dict | None = None):
    """Loss and per-entry gradients for one batch (dtype follows inputs)."""
    logits, cache = forward(arch, params, xb, train=train, rng=rng,
                            want_cache=True, scratch=scratch)
    loss, dlogits = softmax_cross_entropy(logits, yb)
    grads, _ = backward(arch, params, cache, dlogits, scratch=scratch)
    return loss, grads


GradHook = Callable[[list[np.ndarray], list[np.ndarray]], list[np.ndarray]]


def train_local(model: LayerMap, arch: Architecture, data: LabeledSet,
                spec: TrainSpec, *, grad_hook: GradHook | None = None) -> LayerMap:
    """Mini-batch SGD from ``model``; returns a new LayerMap.

    The input model is never modified.  Batching reshuffles every epoch
    from a generator seeded by ``spec.seed``, and dropout draws from the
    same stream, so the result is bit-reproducible.
    """
    arch.check_model(model)
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = [e.reshaped().astype(np.float32) for e in model.entries]
    x = data.images.astype(np.float32, copy=False)
    y = data.labels
    rng = np.random.default_rng(spec.seed)
    lr = np.float32(spec.lr)
    n = len(data)
    scratch: dict = {}
    for _ in range(spec.epochs):
        order = rng.permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            xb, yb = x[idx], y[idx]
            drop_rng = rng if spec.dropout else None
            _, grads = batch_loss_and_grads(
                arch, params, xb, yb, train=spec.dropout, rng=drop_rng,
                scratch=scratch)
            if grad_hook is not None:
                grads = grad_hook(params, grads)
            for j in range(len(params)):
                params[j] = params[j] - lr * grads[j]
    return LayerMap.from_arrays(model, params)


def evaluate(model: LayerMap, arch: Architecture, data: LabeledSet,
             batch_size: int = 64, scratch: dict | None = None) -> float:
    """Fraction of samples classified correctly (inference mode, no dropout).

    On a poisoned validation split whose labels carry the target class this
    is exactly the backdoor success rate.  Callers looping over many models
    can pass a shared ``scratch`` dict to recycle the big conv buffers.
    """
    arch.check_model(model)
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    params = [e.reshaped() for e in model.entries]
    own_scratch = scratch if scratch is not None else {}
    correct = 0
    for start in range(0, len(data), batch_size):
        xb = data.images[start:start + batch_size].astype(np.float32, copy=False)
        yb = data.labels[start:start + batch_size]
        logits, _ = forward(arch, params, xb, scratch=own_scratch)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / len(data)
