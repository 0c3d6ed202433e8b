"""Variance and covariance penalties on a batch of embeddings."""

import numpy as np

from . import tensor as tn
from .exceptions import BatchSizeError, DimensionError
from .tensor import as_tensor


def _check_batch(q):
    q = as_tensor(q)
    if q.ndim != 2:
        raise DimensionError(f"embeddings must be (n, D), got {q.shape}")
    if q.shape[0] < 2:
        raise BatchSizeError("batch statistics need at least 2 rows")
    return q


def variance_term(q, gamma=1.0, eps=1e-4):
    """Mean hinge ``max(0, gamma - sqrt(var_j + eps))`` over the D columns.

    ``var_j`` is the unbiased batch variance of column j.
    """
    q = _check_batch(q)
    std = tn.sqrt(tn.variance_along_axis(q, axis=0, ddof=1) + eps)
    return tn.mean(tn.relu(gamma - std))


def covariance_term(q):
    """Sum of squared off-diagonal entries of the batch covariance, divided by D."""
    q = _check_batch(q)
    n, dim = q.shape
    centered = q - tn.mean(q, axis=0, keepdims=True)
    cov = (tn.transpose(centered) @ centered) * (1.0 / (n - 1))
    off_diagonal = cov * (1.0 - np.eye(dim))
    return tn.sum_(off_diagonal * off_diagonal) * (1.0 / dim)
