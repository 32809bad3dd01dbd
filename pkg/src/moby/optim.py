"""AdamW with decoupled weight decay, and momentum SGD."""
import numpy as np

from .errors import ContractError, NumericalError


def adamw_update(w, g, m, v, t, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW update for step number ``t`` (1-based).

    Returns new ``(w, m, v)``.  Decay multiplies the pre-update weight by
    ``1 - lr * weight_decay``, so with zero gradients the contraction is exact.
    """
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    w = w * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return w, m, v


class _Optimizer:
    def __init__(self, named_params):
        self.named_params = [(n, p) for n, p in named_params]
        names = [n for n, _ in self.named_params]
        if len(set(names)) != len(names):
            raise ContractError("parameter names must be unique")

    def _grad(self, name, p):
        if p.grad is None:
            raise ContractError(f"no gradient for trainable parameter {name}")
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for parameter {name}", op=name)
        return p.grad

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None


class AdamW(_Optimizer):
    """AdamW over named parameters.

    ``exclude_norm_bias`` exempts 1-D parameters (norm scales, biases) from
    weight decay.
    """

    def __init__(self, named_params, lr=1e-3, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8,
                 exclude_norm_bias=False):
        super().__init__(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.exclude_norm_bias = exclude_norm_bias
        self.t = 0
        self.exp_avg = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self.exp_avg_sq = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def step(self):
        grads = [self._grad(n, p) for n, p in self.named_params]
        self.t += 1
        b1, b2 = self.betas
        for (name, p), g in zip(self.named_params, grads):
            wd = 0.0 if self.exclude_norm_bias and p.ndim <= 1 else self.weight_decay
            p.data, self.exp_avg[name], self.exp_avg_sq[name] = adamw_update(
                p.data, g, self.exp_avg[name], self.exp_avg_sq[name], self.t,
                self.lr, wd, b1, b2, self.eps)

    def state_arrays(self):
        out = {"t": np.array([self.t], dtype=np.int64)}
        for n, _ in self.named_params:
            out[f"exp_avg.{n}"] = self.exp_avg[n]
            out[f"exp_avg_sq.{n}"] = self.exp_avg_sq[n]
        return out

    def load_state_arrays(self, arrays):
        t = int(arrays["t"][0])
        avg, sq = {}, {}
        for n, p in self.named_params:
            for key, dest in ((f"exp_avg.{n}", avg), (f"exp_avg_sq.{n}", sq)):
                arr = arrays[key]
                if arr.shape != p.shape:
                    raise ContractError(f"optimizer state {key} has shape {arr.shape}, expected {p.shape}")
                dest[n] = arr.copy()
        self.t, self.exp_avg, self.exp_avg_sq = t, avg, sq


class SGD(_Optimizer):
    """Momentum SGD: v <- momentum * v + g;  w <- w - lr * v."""

    def __init__(self, named_params, lr, momentum=0.9, weight_decay=0.0):
        super().__init__(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def step(self):
        grads = [self._grad(n, p) for n, p in self.named_params]
        for (name, p), g in zip(self.named_params, grads):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            p.data = p.data - self.lr * v
