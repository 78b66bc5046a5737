"""AdamW with decoupled weight decay and global-norm gradient clipping."""

import numpy as np

from .tensor import ContractError, ParameterError


class AdamWState:
    """Per-parameter-group moment buffers and hyperparameters."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        if lr <= 0:
            raise ParameterError("lr must be > 0")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ParameterError("betas must be in [0, 1)")
        if eps <= 0:
            raise ParameterError("eps must be > 0")
        if weight_decay < 0:
            raise ParameterError("weight_decay must be >= 0")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]


def adamw_step(state, lr=None):
    """One AdamW update over state.params, reading each param's .grad.

    Weight decay is decoupled: w <- w * (1 - lr * wd) independent of the
    adaptive update. Params with grad None are treated as zero-gradient
    (they still decay). `lr` overrides state.lr for this step, which is
    how schedules drive the optimizer.
    """
    if lr is None:
        lr = state.lr
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, p in enumerate(state.params):
        g = p.grad
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ContractError(
                f"grad shape {g.shape} does not match param {p.shape}"
            )
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        m = state.m[i]
        v = state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_grad_norm(params, max_norm):
    """Scale all grads so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def zero_grads(params):
    for p in params:
        p.grad = None
