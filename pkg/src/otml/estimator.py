"""scikit-learn style wrapper around pretraining."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import Config
from .trainer import collapse_report, load_model, pretrain, save_model

# estimator parameter -> config key
PARAM_KEYS = {
    "blocks": "model.blocks",
    "image_size": "model.image_size",
    "expander": "model.expander",
    "n_tokens": "model.n_tokens",
    "n_heads": "model.n_heads",
    "temperature": "model.temperature",
    "alpha": "model.alpha",
    "beta": "model.beta",
    "eta": "model.eta",
    "var_gamma": "model.var_gamma",
    "var_eps": "model.var_eps",
    "epsilon": "ot.epsilon",
    "sinkhorn_iterations": "ot.iterations",
    "sinkhorn_mode": "ot.mode",
    "sinkhorn_tol": "ot.tol",
    "crop_lo": "augment.crop_lo",
    "crop_hi": "augment.crop_hi",
    "flip_prob": "augment.flip_prob",
    "brightness": "augment.brightness",
    "contrast": "augment.contrast",
    "blur_prob": "augment.blur_prob",
    "blur_sigma_lo": "augment.blur_sigma_lo",
    "blur_sigma_hi": "augment.blur_sigma_hi",
    "augment": "augment.enabled",
    "use_crop": "augment.use_crop",
    "use_flip": "augment.use_flip",
    "use_jitter": "augment.use_jitter",
    "use_blur": "augment.use_blur",
    "steps": "train.steps",
    "batch_size": "train.batch_size",
    "optimizer": "train.optimizer",
    "lr": "train.lr",
    "weight_decay": "train.weight_decay",
    "momentum": "train.momentum",
    "trust_coeff": "train.trust_coeff",
    "warmup_steps": "train.warmup_steps",
    "seed": "train.seed",
    "record_time": "train.record_time",
}


def check_images(X, image_size=None):
    """Validate and reshape images to ``(n, 1, h, w)`` floats in ``[0, 1]``.

    Accepts ``(n, h, w)``, ``(n, 1, h, w)`` or flattened ``(n, h*w)`` input
    (the last only when ``image_size`` is known).
    """
    X = check_array(X, allow_nd=True, ensure_min_samples=2, dtype=np.float64)
    if X.ndim == 2:
        if image_size is None or X.shape[1] != image_size * image_size:
            raise ValueError(f"cannot interpret flat rows of width {X.shape[1]} as square images")
        X = X.reshape(len(X), 1, image_size, image_size)
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected single-channel images, got shape {X.shape}")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


class OptimlPretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised pretraining of the encoder; ``transform`` yields pooled features.

    Every parameter mirrors one configuration key (see ``PARAM_KEYS``) and
    shares its default.

    Attributes
    ----------
    model_ : OptimlModel
    history_ : list of MetricsRow
    """

    def __init__(
        self,
        blocks=((8, 3, 1), (16, 3, 2), (32, 3, 2), (32, 3, 2)),
        image_size=32,
        expander=(256, 256, 256),
        n_tokens=8,
        n_heads=2,
        temperature=1.0,
        alpha=0.6,
        beta=25.0,
        eta=1.0,
        var_gamma=1.0,
        var_eps=1e-4,
        epsilon=0.05,
        sinkhorn_iterations=50,
        sinkhorn_mode="unrolled",
        sinkhorn_tol=1e-6,
        crop_lo=0.4,
        crop_hi=1.0,
        flip_prob=0.5,
        brightness=0.1,
        contrast=0.2,
        blur_prob=0.5,
        blur_sigma_lo=0.1,
        blur_sigma_hi=1.0,
        augment=True,
        use_crop=True,
        use_flip=True,
        use_jitter=True,
        use_blur=True,
        steps=2000,
        batch_size=64,
        optimizer="adam",
        lr="auto",
        weight_decay=1e-4,
        momentum=0.9,
        trust_coeff=1e-3,
        warmup_steps=0,
        seed=0,
        record_time=True,
    ):
        self.blocks = blocks
        self.image_size = image_size
        self.expander = expander
        self.n_tokens = n_tokens
        self.n_heads = n_heads
        self.temperature = temperature
        self.alpha = alpha
        self.beta = beta
        self.eta = eta
        self.var_gamma = var_gamma
        self.var_eps = var_eps
        self.epsilon = epsilon
        self.sinkhorn_iterations = sinkhorn_iterations
        self.sinkhorn_mode = sinkhorn_mode
        self.sinkhorn_tol = sinkhorn_tol
        self.crop_lo = crop_lo
        self.crop_hi = crop_hi
        self.flip_prob = flip_prob
        self.brightness = brightness
        self.contrast = contrast
        self.blur_prob = blur_prob
        self.blur_sigma_lo = blur_sigma_lo
        self.blur_sigma_hi = blur_sigma_hi
        self.augment = augment
        self.use_crop = use_crop
        self.use_flip = use_flip
        self.use_jitter = use_jitter
        self.use_blur = use_blur
        self.steps = steps
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.trust_coeff = trust_coeff
        self.warmup_steps = warmup_steps
        self.seed = seed
        self.record_time = record_time

    @classmethod
    def from_config(cls, config):
        return cls(**{param: config[key] for param, key in PARAM_KEYS.items()})

    def to_config(self, base=None):
        """Config holding this estimator's parameters on top of ``base``."""
        base = base or Config()
        return base.with_overrides({key: getattr(self, param) for param, key in PARAM_KEYS.items()})

    def fit(self, X, y=None, checkpoint=None):
        """Pretrain on unlabeled images; ``y`` is ignored.

        When ``checkpoint`` is a path, the final state and the metrics CSV
        are written next to it.
        """
        X = check_images(X, self.image_size)
        state = pretrain(self.to_config(), X, out=checkpoint)
        self.model_ = state.model
        self.history_ = state.history
        return self

    @classmethod
    def from_checkpoint(cls, path):
        model, config, _ = load_model(path)
        est = cls.from_config(config)
        est.model_ = model
        est.history_ = []
        return est

    def save(self, path):
        check_is_fitted(self, "model_")
        save_model(path, self.model_, self.to_config(), step=len(self.history_))

    def transform(self, X):
        """Pooled encoder features, shape ``(n, d)``."""
        check_is_fitted(self, "model_")
        return self.model_.features(check_images(X, self.image_size))

    def embed(self, X):
        """Expander outputs with batch norm in eval mode."""
        check_is_fitted(self, "model_")
        return self.model_.embed(check_images(X, self.image_size))

    def collapse_report(self, X):
        check_is_fitted(self, "model_")
        return collapse_report(self.model_, check_images(X, self.image_size))
