"""Convolution and batch normalization with exact adjoints."""

import numpy as np

from .exceptions import BatchSizeError, ConfigurationError, DimensionError
from .tensor import _make, as_tensor, differentiable


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp, kh, kw, stride, oh, ow):
    """Patches of the channel-major padded input ``(c, n, H, W)`` as ``(c*kh*kw, n*oh*ow)``."""
    c, n = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow))
    for a in range(kh):
        for b in range(kw):
            cols[:, a, b] = xp[:, :, a : a + stride * oh : stride, b : b + stride * ow : stride]
    return cols.reshape(c * kh * kw, n * oh * ow)


@differentiable("conv2d")
def conv2d(x, kernels, bias=None, stride=1, padding=0):
    """2-D cross-correlation.

    Parameters
    ----------
    x : Tensor
        ``(c_in, h, w)`` or batched ``(n, c_in, h, w)``.
    kernels : Tensor
        ``(c_out, c_in, kh, kw)``.
    bias : Tensor, optional
        ``(c_out,)``.
    stride, padding : int
        Zero padding is applied symmetrically.

    Returns
    -------
    Tensor
        ``(c_out, h', w')`` (or batched) with
        ``h' = floor((h + 2 * padding - kh) / stride) + 1``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise DimensionError("conv2d expects (n, c, h, w) input and (o, c, kh, kw) kernels")
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernels.shape
    if ci != c:
        raise DimensionError(f"input has {c} channels, kernels expect {ci}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ConfigurationError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)

    xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + w] = xd.transpose(1, 0, 2, 3)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = kernels.data.reshape(co, -1)
    out = (wmat @ cols).reshape(co, n, oh, ow).transpose(1, 0, 2, 3)
    parents = (x, kernels)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)

    def backward(g):
        g = g[None] if single else g
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * oh * ow)
        gx = gk = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, oh, ow)
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a : a + stride * oh : stride, b : b + stride * ow : stride] += gcols[:, a, b]
            gx = gxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
            if single:
                gx = gx[0]
        if kernels.requires_grad:
            gk = (gmat @ cols.T).reshape(kernels.shape)
        grads = (gx, gk)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out[0] if single else out, parents, backward, "conv2d")


@differentiable("batchnorm1d")
def batchnorm1d(x, gamma, beta, eps=1e-5, training=True, running_mean=None, running_var=None, momentum=0.1):
    """Per-column standardization of an ``(n, d)`` batch with a learned affine map.

    In training mode the batch statistics are used and, when given, the
    ``running_mean`` / ``running_var`` arrays are updated in place
    (unbiased variance for the running estimate). In eval mode the running
    statistics are used instead.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise DimensionError("batchnorm1d expects an (n, d) input")
    n = x.shape[0]
    xd = x.data
    if training:
        if n < 2:
            raise BatchSizeError("batchnorm1d needs at least 2 rows in training mode")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    gd = gamma.data

    def backward(g):
        ggamma = np.sum(g * xhat, axis=0)
        gbeta = np.sum(g, axis=0)
        dxhat = g * gd
        if training:
            gx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        else:
            gx = dxhat * inv_std
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward, "batchnorm1d")
