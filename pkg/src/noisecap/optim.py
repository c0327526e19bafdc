"""AdamW with decoupled weight decay and linear learning-rate warmup."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(RuntimeError):
    """Raised when a parameter's gradient contains NaN or inf; the step is aborted."""

    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}; step aborted")
        self.param_name = name


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Effective learning rate ramps linearly from 0 to `lr` over
    `warmup_steps` steps and stays constant afterwards. With
    weight_decay=0 the update is exactly Adam.
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.0, warmup_steps=0):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.warmup_steps = int(warmup_steps)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def effective_lr(self, step: int) -> float:
        """Learning rate used at 1-indexed step `step`."""
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        return self.lr

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        """Apply one update; aborts (no mutation) on any non-finite gradient."""
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteGradientError(name)
        self.step_count += 1
        t = self.step_count
        lr_t = self.effective_lr(t)
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (lr_t * update).astype(p.data.dtype, copy=False)
