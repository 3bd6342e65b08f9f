"""Adam with bias correction and the step-decay learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np


def adam_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update, in place; returns the ParamSet for chaining.

    Parameters without an entry in `grads` are treated as zero-gradient:
    their value is untouched up to moment decay.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, theta in params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {theta.shape}"
            )
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def lr_schedule(base_lr, epoch, step_size, decay):
    """base_lr * decay^floor(epoch/step_size)."""
    if step_size < 1:
        raise ValueError("step_size must be >= 1")
    return base_lr * decay ** math.floor(epoch / step_size)
