"""Parameter initialization and the two supported optimizers (SGD, Adam-lite)."""

import numpy as np

from .autodiff import Tensor
from .errors import ArgumentError


def conv_param(rng, out_ch, in_ch, k):
    fan_in = in_ch * k * k
    w = rng.standard_normal((out_ch, in_ch, k, k)) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(np.float32), requires_grad=True)


def linear_param(rng, n_in, n_out):
    w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
    return Tensor(w.astype(np.float32), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def embedding_param(rng, n_rows, dim):
    w = rng.standard_normal((n_rows, dim)) * 0.05
    return Tensor(w.astype(np.float32), requires_grad=True)


def zero_grads(params):
    for p in params:
        p.grad = None


class SGD:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = float(lr)

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= (self.lr * p.grad.astype(np.float64)).astype(np.float32)


class Adam:
    """Plain Adam with bias correction; moments kept in float64."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else float(lr)
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            upd = lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.data -= upd.astype(np.float32)


def cosine_lr(base_lr, step, total_steps):
    """Cosine decay from base_lr to 0 over total_steps."""
    if total_steps <= 0:
        raise ArgumentError("total_steps must be positive")
    frac = min(step, total_steps) / total_steps
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * frac))


def sinusoidal_embedding(t, dim):
    """Standard sin/cos features of integer timesteps; t is an int array (B,)."""
    if dim % 2:
        raise ArgumentError("embedding dim must be even")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)
