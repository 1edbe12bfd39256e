"""Numeric substrate: seeded random streams and differentiable primitives.

Every primitive comes as a ``*_forward`` / ``*_backward`` pair. Forward
functions return ``(out, cache)``; backward functions take the upstream
gradient and the cache and return gradients for each input, in argument
order. Arrays of any leading batch shape are accepted; the primitive acts
on the trailing axis.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DTYPES = {"float64": np.float64, "float32": np.float32}


def resolve_dtype(precision: str) -> type:
    try:
        return DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}")


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Backed by the counter-based Philox generator. The key is derived from a
    ``SeedSequence`` whose spawn key is the stream path, so
    ``RngStream(s, 3).split(7)`` is the same stream wherever it is built.
    Instances are single-owner; hand each worker its own split.
    """

    def __init__(self, seed: int, stream_id: int | tuple[int, ...] = 0):
        if isinstance(stream_id, (int, np.integer)):
            path = (int(stream_id),)
        else:
            path = tuple(int(s) for s in stream_id)
        if seed < 0 or any(s < 0 for s in path):
            raise ValueError("seed and stream ids must be non-negative")
        self.seed = int(seed)
        self.path = path
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=path)
        key = seq.generate_state(2, dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    @property
    def stream_id(self) -> tuple[int, ...]:
        return self.path

    def split(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(ids))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.path})"


def _check_grad(dy: np.ndarray, shape: tuple) -> None:
    if dy.shape != shape:
        raise ValueError(f"upstream gradient shape {dy.shape} does not match forward output {shape}")


# -- softmax -----------------------------------------------------------------

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    logits = np.asarray(logits)
    if logits.size == 0 or logits.shape[axis] < 1:
        raise ValueError("invalid logits: empty class axis")
    if not np.all(np.isfinite(logits)):
        raise ValueError("invalid logits")
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_forward(logits):
    p = softmax(logits)
    return p, (p,)


def softmax_backward(dy, cache):
    (p,) = cache
    _check_grad(dy, p.shape)
    return (p * (dy - (dy * p).sum(axis=-1, keepdims=True)),)


# -- linear (matrix product + bias add) ---------------------------------------

def linear_forward(x, w, b):
    """``y = x @ w + b`` with ``w`` of shape (in, out)."""
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"linear shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    y = x @ w + b
    return y, (x, w, y.shape)


def linear_backward(dy, cache):
    x, w, shape = cache
    _check_grad(dy, shape)
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    return dx, dw, db


# -- batched matrix product -----------------------------------------------------

def matmul_forward(a, b):
    y = a @ b
    return y, (a, b, y.shape)


def matmul_backward(dy, cache):
    a, b, shape = cache
    _check_grad(dy, shape)
    return dy @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ dy


# -- layer normalisation ----------------------------------------------------------

def layer_norm_forward(x, gamma, beta, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma + beta
    return y, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    _check_grad(dy, xhat.shape)
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    return dx, dgamma, dbeta


# -- pointwise ----------------------------------------------------------------------

def relu_forward(x):
    y = np.maximum(x, 0)
    return y, (x > 0,)


def relu_backward(dy, cache):
    (on,) = cache
    _check_grad(dy, on.shape)
    return (dy * on,)


def residual_forward(x, fx):
    y = x + fx
    return y, (y.shape,)


def residual_backward(dy, cache):
    (shape,) = cache
    _check_grad(dy, shape)
    return dy, dy


_BACKWARD: dict[str, Callable] = {
    "softmax": softmax_backward,
    "linear": linear_backward,
    "matmul": matmul_backward,
    "layer_norm": layer_norm_backward,
    "relu": relu_backward,
    "residual": residual_backward,
}


def primitive_backward(op: str, cache, upstream: np.ndarray) -> tuple[np.ndarray, ...]:
    """Dispatch to the backward pass of primitive ``op``."""
    try:
        fn = _BACKWARD[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}")
    return fn(upstream, cache)


def central_difference(f: Callable[[], float], x: np.ndarray, index, step: float = 1e-5) -> float:
    """Central difference of scalar ``f`` w.r.t. ``x[index]`` (``x`` mutated and restored)."""
    orig = x[index].copy()
    x[index] = orig + step
    fp = f()
    x[index] = orig - step
    fm = f()
    x[index] = orig
    return (fp - fm) / (2.0 * step)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
