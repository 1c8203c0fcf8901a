"""Bias-corrected Adam on named parameter tensors."""

import numpy as np


class AdamState:
    """First/second moment accumulators plus the step counter.

    Moment arrays mirror the parameter shapes; ``step`` increases by one per
    update.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}


def named_grads(params, grad_map):
    """Re-key a backward() result by parameter name.

    Parameters the loss never touched get zero gradients so optimizer steps
    stay total over the parameter set.
    """
    out = {}
    for name, p in params.items():
        g = grad_map.get(p)
        out[name] = np.zeros_like(p.value) if g is None else g
    return out


def adam_step(params, grads, state):
    """One in-place Adam update; returns (params, state).

    ``params`` maps name -> Tensor, ``grads`` maps name -> ndarray with
    matching shapes.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.value.shape:
            raise ValueError(
                f"adam_step: gradient shape {g.shape} != parameter shape "
                f"{p.value.shape} for {name!r}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bias1
        vhat = v / bias2
        p.value -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state
