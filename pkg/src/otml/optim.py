"""LARS and Adam over named parameter tensors.

Parameters whose name marks them as a bias or a batch-norm affine term are
excluded from weight decay and (for LARS) from trust-ratio scaling.
Parameters whose gradient is missing or identically zero are skipped
entirely, so an all-zero loss leaves every parameter bit-for-bit unchanged.
"""

import numpy as np


def is_excluded(name):
    return name.endswith(".bias") or ".bn" in name


def _active(tensor):
    return tensor.grad is not None and np.any(tensor.grad)


class Optimizer:
    def __init__(self, params, lr, weight_decay=0.0, warmup_steps=0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.steps = 0

    def current_lr(self):
        if self.warmup_steps and self.steps < self.warmup_steps:
            return self.lr * (self.steps + 1) / self.warmup_steps
        return self.lr

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def step(self):
        lr = self.current_lr()
        for name, tensor in self.params.items():
            if _active(tensor):
                self._update(name, tensor, lr)
        self.steps += 1

    def _update(self, name, tensor, lr):
        raise NotImplementedError


def lars_update(weight, grad, buffer, lr, weight_decay=1e-4, momentum=0.9, trust_coeff=1e-3, excluded=False):
    """One LARS step on a single parameter group, in place.

    ``local_lr = trust_coeff * ||w|| / (||g|| + weight_decay * ||w|| + 1e-12)``
    scales the decayed gradient fed into the momentum buffer. Excluded
    groups use ``local_lr = 1`` and no decay. Returns the updated buffer.
    """
    if excluded:
        direction = grad
        local_lr = 1.0
    else:
        direction = grad + weight_decay * weight
        w_norm = np.linalg.norm(weight)
        g_norm = np.linalg.norm(grad)
        if w_norm > 0 and g_norm > 0:
            local_lr = trust_coeff * w_norm / (g_norm + weight_decay * w_norm + 1e-12)
        else:
            local_lr = 1.0
    buffer *= momentum
    buffer += local_lr * direction
    weight -= lr * buffer
    return buffer


class LARS(Optimizer):
    def __init__(self, params, lr=3e-4, weight_decay=1e-4, momentum=0.9, trust_coeff=1e-3, warmup_steps=0):
        super().__init__(params, lr, weight_decay, warmup_steps)
        self.momentum = momentum
        self.trust_coeff = trust_coeff
        self.buffers = {name: np.zeros_like(t.data) for name, t in self.params.items()}

    def _update(self, name, tensor, lr):
        lars_update(
            tensor.data,
            tensor.grad,
            self.buffers[name],
            lr,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            trust_coeff=self.trust_coeff,
            excluded=is_excluded(name),
        )


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8, warmup_steps=0):
        super().__init__(params, lr, weight_decay, warmup_steps)
        self.betas = betas
        self.eps = eps
        self.first = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.second = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.counts = {name: 0 for name in self.params}

    def _update(self, name, tensor, lr):
        b1, b2 = self.betas
        grad = tensor.grad
        if not is_excluded(name) and self.weight_decay:
            grad = grad + self.weight_decay * tensor.data
        self.counts[name] += 1
        t = self.counts[name]
        m, v = self.first[name], self.second[name]
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind, params, lr=None, weight_decay=1e-4, momentum=0.9, trust_coeff=1e-3, warmup_steps=0):
    """Build ``"lars"`` (default lr 3e-4) or ``"adam"`` (default lr 1e-3)."""
    if kind == "lars":
        return LARS(params, lr=3e-4 if lr is None else lr, weight_decay=weight_decay, momentum=momentum,
                    trust_coeff=trust_coeff, warmup_steps=warmup_steps)
    if kind == "adam":
        return Adam(params, lr=1e-3 if lr is None else lr, weight_decay=weight_decay, warmup_steps=warmup_steps)
    raise ValueError(f"unknown optimizer {kind!r}")
