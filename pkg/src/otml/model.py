"""Siamese encoder, pooling, expander head and the composite objective.

Both views go through the same convolutional encoder. The dense maps feed
the transport branch (cosine cost, CV-SIM marginals, Sinkhorn); their
spatial means feed the expander, whose outputs are only used by the
variance/covariance regularizers.
"""

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .cvsim import CvSimParams, init_cvsim_params, make_marginals
from .exceptions import BatchSizeError, ConfigurationError, DimensionError, OtmlError
from .nnops import batchnorm1d, conv2d, conv_output_size
from .regularizers import covariance_term, variance_term
from .tensor import Tensor
from .transport import TransportProblem, build_cost, build_discrepancy, ot_loss, sinkhorn


@dataclass(frozen=True)
class EncoderConfig:
    """Conv blocks as ``(out_channels, kernel, stride)``; padding is ``kernel // 2``."""

    blocks: tuple = ((8, 3, 1), (16, 3, 2), (32, 3, 2), (32, 3, 2))
    image_size: tuple = (32, 32)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(v) for v in b) for b in self.blocks))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if not self.blocks:
            raise ConfigurationError("encoder needs at least one conv block")
        channels, h, w = self.output_geometry()
        if h < 2 or w < 2:
            raise ConfigurationError(f"final feature map {h}x{w} is smaller than 2x2")
        if channels < 8:
            raise ConfigurationError(f"final channel count {channels} is below 8")

    def output_geometry(self):
        h, w = self.image_size
        for _, kernel, stride in self.blocks:
            h = conv_output_size(h, kernel, stride, kernel // 2)
            w = conv_output_size(w, kernel, stride, kernel // 2)
        return self.blocks[-1][0], h, w


@dataclass(frozen=True)
class ExpanderConfig:
    widths: tuple = (256, 256, 256)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ConfigurationError("expander needs at least one positive layer width")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.6
    beta: float = 25.0
    eta: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.eta) < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass(frozen=True)
class OTConfig:
    epsilon: float = 0.05
    iterations: int = 50
    mode: str = "unrolled"
    tol: float = 1e-6


@dataclass
class LossBreakdown:
    l_ot: float
    l_var: float
    l_cov: float
    total: float
    sinkhorn_iterations: int
    marginal_error: float
    feat_std: float


@contextmanager
def _attributed(module):
    try:
        yield
    except OtmlError as exc:
        if getattr(exc, "module", None) is None:
            exc.module = module
        raise


def _he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class OptimlModel:
    """Parameters and forward computations of the Siamese network.

    Parameters
    ----------
    encoder, expander : EncoderConfig, ExpanderConfig
    n_tokens, n_heads : int
        CV-SIM token and head counts.
    temperature : float
        Softmax temperature turning CV-SIM outputs into marginals.
    seed : int
        Initialization seed.
    """

    def __init__(self, encoder=None, expander=None, n_tokens=8, n_heads=2, temperature=1.0, seed=0):
        self.encoder = encoder or EncoderConfig()
        self.expander = expander or ExpanderConfig()
        self.n_tokens = n_tokens
        self.n_heads = n_heads
        self.temperature = temperature
        self.params = {}
        self.buffers = {}
        rng = np.random.default_rng(seed)

        c_in = 1
        for i, (c_out, k, _) in enumerate(self.encoder.blocks):
            self.params[f"encoder.conv{i}.weight"] = _he_normal(rng, (c_out, c_in, k, k), c_in * k * k)
            self.params[f"encoder.conv{i}.bias"] = np.zeros(c_out)
            c_in = c_out
        d = self.dim
        for branch in ("s", "t"):
            cv = init_cvsim_params(d, n_tokens, n_heads, rng)
            for key, value in cv.tensors().items():
                self.params[f"cvsim_{branch}.{key}"] = value.data
        width_in = d
        widths = self.expander.widths
        for i, width in enumerate(widths):
            bound = 1.0 / np.sqrt(width_in)
            self.params[f"expander.fc{i}.weight"] = rng.uniform(-bound, bound, (width_in, width))
            self.params[f"expander.fc{i}.bias"] = rng.uniform(-bound, bound, width)
            if i < len(widths) - 1:
                self.params[f"expander.bn{i}.gamma"] = np.ones(width)
                self.params[f"expander.bn{i}.beta"] = np.zeros(width)
                self.buffers[f"expander.bn{i}.running_mean"] = np.zeros(width)
                self.buffers[f"expander.bn{i}.running_var"] = np.ones(width)
            width_in = width
        self.params = {name: Tensor(v, requires_grad=True, name=name) for name, v in self.params.items()}

    # -- geometry ------------------------------------------------------
    @property
    def dim(self):
        return self.encoder.blocks[-1][0]

    @property
    def spatial(self):
        _, h, w = self.encoder.output_geometry()
        return h * w

    def cvsim(self, branch):
        p = self.params
        return CvSimParams(
            p[f"cvsim_{branch}.w_query"],
            p[f"cvsim_{branch}.w_key"],
            p[f"cvsim_{branch}.w_value"],
            n_heads=self.n_heads,
            n_tokens=self.n_tokens,
        )

    # -- forward pieces ------------------------------------------------
    def encode(self, images):
        """Dense feature map ``(d, hw)`` for a ``(1, h, w)`` image, or ``(n, d, hw)`` for a batch."""
        images = tn.as_tensor(images)
        single = images.ndim == 3
        if images.ndim not in (3, 4) or images.shape[-3] != 1:
            raise DimensionError(f"expected (1, h, w) or (n, 1, h, w) images, got {images.shape}")
        if tuple(images.shape[-2:]) != self.encoder.image_size:
            raise DimensionError(f"image size {images.shape[-2:]} does not match the configured {self.encoder.image_size}")
        x = tn.reshape(images, (1,) + images.shape) if single else images
        last = len(self.encoder.blocks) - 1
        for i, (_, k, stride) in enumerate(self.encoder.blocks):
            x = conv2d(
                x,
                self.params[f"encoder.conv{i}.weight"],
                self.params[f"encoder.conv{i}.bias"],
                stride=stride,
                padding=k // 2,
            )
            if i < last:
                x = tn.relu(x)
        n, d, h, w = x.shape
        z = tn.reshape(x, (n, d, h * w))
        return tn.reshape(z, (d, h * w)) if single else z

    @staticmethod
    def pool(z):
        return tn.mean(z, axis=-1)

    def expand(self, g, training=True):
        """Expander MLP on pooled ``(n, d)`` features."""
        x = g
        count = len(self.expander.widths)
        for i in range(count):
            x = x @ self.params[f"expander.fc{i}.weight"] + self.params[f"expander.fc{i}.bias"]
            if i < count - 1:
                x = batchnorm1d(
                    x,
                    self.params[f"expander.bn{i}.gamma"],
                    self.params[f"expander.bn{i}.beta"],
                    training=training,
                    running_mean=self.buffers[f"expander.bn{i}.running_mean"],
                    running_var=self.buffers[f"expander.bn{i}.running_var"],
                )
                x = tn.relu(x)
        return x

    def pool_and_expand(self, z, training=True):
        g = self.pool(z)
        if g.ndim == 1:
            raise BatchSizeError("the expander's batch normalization needs a batch of feature maps")
        return g, self.expand(g, training=training)

    def features(self, images, batch_size=256):
        """Pooled encoder features as a numpy ``(n, d)`` array (no graph recorded)."""
        images = np.asarray(images, dtype=float)
        out = []
        with tn.no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self.pool(self.encode(images[start : start + batch_size])).data)
        return np.concatenate(out, axis=0)

    def embed(self, images, batch_size=256):
        """Expander outputs (batch norm in eval mode) as a numpy array."""
        images = np.asarray(images, dtype=float)
        out = []
        with tn.no_grad():
            for start in range(0, len(images), batch_size):
                g = self.pool(self.encode(images[start : start + batch_size]))
                out.append(self.expand(g, training=False).data)
        return np.concatenate(out, axis=0)

    # -- objective -----------------------------------------------------
    def forward_loss(self, batch_s, batch_t, weights=None, ot=None, var_gamma=1.0, var_eps=1e-4):
        """Composite objective for two augmented batches of shape ``(n, 1, h, w)``.

        Returns
        -------
        (LossBreakdown, Tensor)
            The breakdown of float values and the scalar total for backward.
        """
        weights = weights or LossWeights()
        ot = ot or OTConfig()
        batch_s, batch_t = tn.as_tensor(batch_s), tn.as_tensor(batch_t)
        if batch_s.shape != batch_t.shape:
            raise DimensionError(f"view batches differ: {batch_s.shape} vs {batch_t.shape}")
        if batch_s.ndim != 4 or batch_s.shape[0] < 2:
            raise BatchSizeError("forward_loss needs two (n, 1, h, w) batches with n >= 2")
        n = batch_s.shape[0]

        with _attributed("model"):
            z = self.encode(tn.concat([batch_s, batch_t], axis=0))
            z_s, z_t = z[:n], z[n:]
            g = self.pool(z)
            g_s, g_t = g[:n], g[n:]
        with _attributed("otcore"):
            cost = build_cost(build_discrepancy(z_s, z_t))
        with _attributed("cvsim"):
            pair = make_marginals(g_s, g_t, self.cvsim("s"), self.cvsim("t"), self.temperature)
        with _attributed("otcore"):
            plan = sinkhorn(
                TransportProblem(cost, pair.mu, pair.nu, ot.epsilon),
                max_iters=ot.iterations,
                tol=ot.tol,
                mode=ot.mode,
            )
            l_ot = ot_loss(plan, cost)
        with _attributed("model"):
            q_s = self.expand(g_s)
            q_t = self.expand(g_t)
        with _attributed("vicreg"):
            l_var = variance_term(q_s, var_gamma, var_eps) + variance_term(q_t, var_gamma, var_eps)
            l_cov = covariance_term(q_s) + covariance_term(q_t)
        total = l_ot * weights.alpha + l_var * weights.beta + l_cov * weights.eta

        feat_std = 0.5 * (q_s.data.std(axis=0, ddof=1).mean() + q_t.data.std(axis=0, ddof=1).mean())
        breakdown = LossBreakdown(
            l_ot=l_ot.item(),
            l_var=l_var.item(),
            l_cov=l_cov.item(),
            total=total.item(),
            sinkhorn_iterations=plan.iterations,
            marginal_error=plan.marginal_error,
            feat_std=float(feat_std),
        )
        return breakdown, total

    # -- state ---------------------------------------------------------
    def state_dict(self):
        state = {name: t.data.copy() for name, t in self.params.items()}
        state.update({name: b.copy() for name, b in self.buffers.items()})
        return state

    def load_state_dict(self, state):
        expected = set(self.params) | set(self.buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise ConfigurationError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, value in state.items():
            target = self.params[name].data if name in self.params else self.buffers[name]
            if target.shape != np.shape(value):
                raise DimensionError(f"{name}: expected shape {target.shape}, got {np.shape(value)}")
            target[...] = value
