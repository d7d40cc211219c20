"""Minimal neural-net toolkit: layers with explicit reverse-mode backprop.

Parameters are plain float64 numpy arrays in a flat dict. Each layer exposes
a forward returning (output, cache) and a backward mapping the upstream
gradient plus the cache to input/parameter gradients, so gradients are exact
reverse accumulation with no framework in the loop. Everything is
deterministic given the init seed.
"""

from __future__ import annotations

import numpy as np

Params = dict[str, np.ndarray]
Grads = dict[str, np.ndarray]


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], scale: float = 1.0) -> np.ndarray:
    """Uniform(-s, s) with s = scale / sqrt(fan_in); fan_in is the leading dim."""
    fan_in = shape[0]
    bound = scale / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def matmul2d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x (..., K) @ w (K, D) through a single 2-D GEMM."""
    lead = x.shape[:-1]
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(*lead, w.shape[1])


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return matmul2d(x, w) + b, (x, w)


def linear_backward(dy: np.ndarray, cache, need_dx: bool = True):
    x, w = cache
    dx = matmul2d(dy, w.T) if need_dx else None
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dw, db


def tanh_forward(x: np.ndarray):
    y = np.tanh(x)
    return y, y


def tanh_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (1.0 - y * y)


def causal_shift(h: np.ndarray, offset: int) -> np.ndarray:
    """Shift a (B, T, C) sequence right by offset steps, zero-filling the past."""
    if offset == 0:
        return h
    out = np.zeros_like(h)
    out[:, offset:, :] = h[:, :-offset, :]
    return out


def causal_unshift_add(dh: np.ndarray, grad: np.ndarray, offset: int) -> None:
    """Adjoint of causal_shift: scatter grad back in place."""
    if offset == 0:
        dh += grad
    else:
        dh[:, :-offset, :] += grad[:, offset:, :]


def causal_conv_forward(h: np.ndarray, w_cat: np.ndarray, b: np.ndarray, dilation: int, kernel: int):
    """Causal dilated temporal convolution over (B, T, C).

    Taps at t - (kernel-1-k)*dilation for k in 0..kernel-1; w_cat stacks the
    per-tap weight matrices along axis 0, shape (kernel*C_in, C_out).
    """
    taps = [causal_shift(h, (kernel - 1 - k) * dilation) for k in range(kernel)]
    stacked = np.concatenate(taps, axis=-1)
    y = matmul2d(stacked, w_cat) + b
    return y, (stacked, w_cat, h.shape, dilation, kernel)


def causal_conv_backward(dy: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    stacked, w_cat, h_shape, dilation, kernel = cache
    c_in = h_shape[-1]
    dstacked = matmul2d(dy, w_cat.T)
    dw = stacked.reshape(-1, stacked.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dh = np.zeros(h_shape)
    for k in range(kernel):
        offset = (kernel - 1 - k) * dilation
        causal_unshift_add(dh, dstacked[..., k * c_in : (k + 1) * c_in], offset)
    return dh, dw, db


class Adam:
    """Adaptive-moment first-order optimizer over a flat param dict."""

    def __init__(self, params: Params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Grads) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def flatten_params(params: Params) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def unflatten_params(vector: np.ndarray, template: Params) -> Params:
    out: Params = {}
    i = 0
    for k in sorted(template):
        n = template[k].size
        out[k] = vector[i : i + n].reshape(template[k].shape).copy()
        i += n
    return out
