"""Dense forward/backward kernels, Adam and finite-difference gradient checks.

Every differentiable op returns its output together with a ``backward``
closure mapping the upstream gradient to the gradient w.r.t. the op's input.
Parameter gradients are accumulated into :attr:`Param.grad` by the closure.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass(eq=False)
class Param:
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    name: str = ""

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def linear(W: Param, x: np.ndarray):
    """``y = W x`` for a vector ``x`` or row-wise ``Y = X W^T`` for a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.value.shape[1]:
        raise ShapeError(f"linear: W is {W.value.shape}, input has trailing dim {x.shape[-1]}")
    y = x @ W.value.T

    def backward(dy):
        dy = np.asarray(dy, dtype=np.float64)
        if x.ndim == 1:
            W.grad += np.outer(dy, x)
        else:
            W.grad += dy.T @ x
        return dy @ W.value

    return y, backward


def masked_max(values: np.ndarray, index_set: Sequence[int]):
    """Max of ``values`` over ``index_set``; the empty set yields ``(0.0, None)``.

    Ties go to the smallest index. The backward pass sends the whole upstream
    gradient to the argmax.
    """
    values = np.asarray(values, dtype=np.float64)
    idx = np.asarray(sorted(int(i) for i in index_set), dtype=np.int64)
    if len(idx) == 0:
        return 0.0, None, (lambda g: np.zeros_like(values))
    best = int(idx[np.argmax(values[idx])])  # argmax returns the first, i.e. smallest index

    def backward(g):
        out = np.zeros_like(values)
        out[best] = g
        return out

    return float(values[best]), best, backward


def segment_max(values: np.ndarray, indptr: np.ndarray, indices: np.ndarray):
    """Row-batched masked max over CSR segments.

    ``values`` has shape ``(B, n)``; segment ``s`` covers
    ``indices[indptr[s]:indptr[s+1]]``. Returns ``(max, argmax)`` of shape
    ``(B, S)``; empty segments give 0 and argmax -1. Within a segment the
    indices must be ascending so the first maximal position is the smallest
    index.
    """
    values = np.atleast_2d(values)
    B = values.shape[0]
    S = len(indptr) - 1
    out = np.zeros((B, S))
    arg = np.full((B, S), -1, dtype=np.int64)
    lengths = np.diff(indptr)
    nonempty = np.flatnonzero(lengths > 0)
    if len(nonempty) == 0:
        return out, arg
    gathered = values[:, indices]
    starts = indptr[nonempty]
    mx = np.maximum.reduceat(gathered, starts, axis=1)
    seg_of = np.repeat(np.arange(len(nonempty)), lengths[nonempty])
    hit = gathered == mx[:, seg_of]
    pos = np.where(hit, np.arange(len(indices))[None, :], len(indices))
    first = np.minimum.reduceat(pos, starts, axis=1)
    out[:, nonempty] = mx
    arg[:, nonempty] = indices[first]
    return out, arg


def scatter_to_argmax(grad: np.ndarray, arg: np.ndarray, n: int) -> np.ndarray:
    """Backward of :func:`segment_max`: route ``grad[b, s]`` to ``arg[b, s]``."""
    B = grad.shape[0]
    out = np.zeros((B, n))
    rows, cols = np.nonzero(arg >= 0)
    np.add.at(out, (rows, arg[rows, cols]), grad[rows, cols])
    return out


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, (lambda g: g * y * (1.0 - y))


def relu(x):
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0
    return np.where(mask, x, 0.0), (lambda g: g * mask)


def identity(x):
    return np.asarray(x, dtype=np.float64), (lambda g: g)


ACTIVATIONS: dict[str, Callable] = {"relu": relu, "sigmoid": sigmoid, "identity": identity}


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.mean(diff * diff)), (lambda g=1.0: g * 2.0 * diff / n)


def softmax_cross_entropy(logits, classes):
    """Mean cross-entropy of row-wise softmax; ``classes`` holds class indices."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    classes = np.asarray(classes, dtype=np.int64)
    n = logits.shape[0]
    if classes.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {n} rows but {classes.shape} targets")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = -float(logp[np.arange(n), classes].mean())

    def backward(g=1.0):
        p = np.exp(logp)
        p[np.arange(n), classes] -= 1.0
        return g * p / n

    return loss, backward


class Adam:
    """Adam with bias correction, one moment pair per parameter."""

    def __init__(self, params: Sequence[Param], lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        zero_grads(self.params)

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_update(x, g, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8, active=None):
    """Functional Adam step on raw arrays (in place); ``t`` is the new step count.

    ``active`` optionally masks the leading axis so frozen rows stay put.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    step = lr * (m / (1.0 - beta1 ** t)) / (np.sqrt(v / (1.0 - beta2 ** t)) + eps)
    if active is not None:
        step *= active.reshape((-1,) + (1,) * (step.ndim - 1))
    x -= step


def grad_check(closure: Callable[[], float], params: Sequence[Param], epsilon: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``closure`` must zero the grads, run forward and backward and return the
    loss. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    closure()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + epsilon
            up = closure()
            flat[k] = old - epsilon
            down = closure()
            flat[k] = old
            num = (up - down) / (2 * epsilon)
            ana = a.reshape(-1)[k]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    closure()
    return worst
