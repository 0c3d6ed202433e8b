"""Cross-view attention producing the transport marginals.

A pooled vector of width ``d`` is split into ``n_tokens`` tokens of width
``d / n_tokens``; each token is further split into ``n_heads`` heads. The
queries come from one view and keys/values from the other, so every head
attends over the other view's tokens.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .exceptions import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor


@dataclass
class CvSimParams:
    w_query: Tensor
    w_key: Tensor
    w_value: Tensor
    n_heads: int = 2
    n_tokens: int = 8

    def __post_init__(self):
        d = self.w_query.shape[0]
        validate_geometry(d, self.n_tokens, self.n_heads)
        for w in (self.w_query, self.w_key, self.w_value):
            if w.shape != (d, d):
                raise DimensionError(f"projection weights must be {d}x{d}, got {w.shape}")

    @property
    def dim(self):
        return self.w_query.shape[0]

    def tensors(self):
        return {"w_query": self.w_query, "w_key": self.w_key, "w_value": self.w_value}


@dataclass
class MarginalPair:
    mu: Tensor
    nu: Tensor
    r_s: Tensor
    r_t: Tensor


def validate_geometry(d, n_tokens, n_heads):
    if n_tokens < 1 or n_heads < 1:
        raise ConfigurationError("n_tokens and n_heads must be positive")
    if d % n_tokens:
        raise ConfigurationError(f"d={d} is not divisible by n_tokens={n_tokens}")
    if (d // n_tokens) % n_heads:
        raise ConfigurationError(f"token width {d // n_tokens} is not divisible by n_heads={n_heads}")


def init_cvsim_params(d, n_tokens=8, n_heads=2, rng=None):
    """Orthogonal projections scaled by ``1/sqrt(d)``."""
    validate_geometry(d, n_tokens, n_heads)
    rng = np.random.default_rng(rng)
    weights = []
    for _ in range(3):
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        q = q * np.sign(np.diag(r))
        weights.append(Tensor(q / np.sqrt(d), requires_grad=True))
    return CvSimParams(*weights, n_heads=n_heads, n_tokens=n_tokens)


def cross_attend(g_src, g_tgt, params, return_attention=False):
    """Attend from ``g_src`` (queries) to ``g_tgt`` (keys and values).

    Inputs are ``(d,)`` vectors or ``(n, d)`` batches; the output has the
    same shape as ``g_src``.
    """
    g_src, g_tgt = as_tensor(g_src), as_tensor(g_tgt)
    if g_src.shape != g_tgt.shape:
        raise DimensionError(f"views differ in shape: {g_src.shape} vs {g_tgt.shape}")
    d = params.dim
    if g_src.shape[-1] != d:
        raise DimensionError(f"expected width {d}, got {g_src.shape[-1]}")
    single = g_src.ndim == 1
    src = tn.reshape(g_src, (1, d)) if single else g_src
    tgt = tn.reshape(g_tgt, (1, d)) if single else g_tgt
    n = src.shape[0]
    tokens, heads = params.n_tokens, params.n_heads
    head_dim = d // tokens // heads

    def split(x):
        return tn.transpose(tn.reshape(x, (n, tokens, heads, head_dim)), (0, 2, 1, 3))

    q = split(src @ tn.transpose(params.w_query))
    k = split(tgt @ tn.transpose(params.w_key))
    v = split(tgt @ tn.transpose(params.w_value))
    scores = (q @ tn.transpose(k)) * (1.0 / np.sqrt(head_dim))
    attention = tn.softmax(scores, axis=-1)
    out = tn.reshape(tn.transpose(attention @ v, (0, 2, 1, 3)), (n, d))
    if single:
        out = tn.reshape(out, (d,))
    return (out, attention) if return_attention else out


def make_marginals(g_s, g_t, params_s, params_t, temperature=1.0):
    """Refine both pooled views and turn them into probability vectors."""
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    r_s = cross_attend(g_s, g_t, params_s)
    r_t = cross_attend(g_t, g_s, params_t)
    inv = 1.0 / temperature
    return MarginalPair(
        mu=tn.softmax(r_s * inv, axis=-1),
        nu=tn.softmax(r_t * inv, axis=-1),
        r_s=r_s,
        r_t=r_t,
    )
